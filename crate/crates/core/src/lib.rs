//! Slot-vector simulation of row-packed homomorphic linear algebra.
//!
//! The crate models the SIMD computation style of leveled homomorphic
//! encryption with plain `f64` slots: a [`simd::SlotMachine`] exposes only
//! rotate / add / multiply / multiply-by-constant and counts every call.
//! On top of it sit row-by-row matrix packing ([`packing`]), matrix
//! multiplication with a transposed and cyclically extended right operand
//! ([`linalg`]), stride-1 convolution over a batch of images in one vector
//! ([`conv`]), a small CNN forward pass ([`network`]), and multiclass
//! logistic regression trained with a fixed diagonal Hessian bound
//! ([`quadgrad`]).

pub mod cli;
pub mod conv;
pub mod error;
pub mod idx;
pub mod libsvm;
pub mod linalg;
pub mod matrix;
pub mod network;
pub mod packing;
pub mod quadgrad;
pub mod simd;
pub mod verify;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use packing::PackedMatrix;
pub use simd::{LedgerReport, SlotMachine, SlotVector, DEFAULT_SLOTS};
