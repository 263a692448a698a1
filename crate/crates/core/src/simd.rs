//! The slot-vector machine.
//!
//! A [`SlotVector`] stands in for a ciphertext: a fixed number of real slots
//! that can only be touched through the five primitives of [`SlotMachine`]
//! (encode/decode, rotate, add, multiply, multiply-by-constant). Every
//! primitive except encode/decode is charged to an [`OpLedger`], which is the
//! cost model the higher layers are measured against.
//!
//! There is no encryption and no rescaling; slots are plain `f64`.

use std::ops::Sub;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::Serialize;

use crate::error::{shape, Error, Result};

/// 2^15, the slot count of the parameter set used for the MNIST batch.
pub const DEFAULT_SLOTS: usize = 1 << 15;

/// A packed vector of real slots. Immutable once built.
#[derive(Clone, PartialEq)]
pub struct SlotVector {
    slots: Vec<f64>,
}

impl SlotVector {
    pub fn slot_count(&self) -> usize {
        self.slots.len()
    }
}

impl std::fmt::Debug for SlotVector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let shown = self.slots.len().min(16);
        write!(
            f,
            "SlotVector({} slots, head {:?})",
            self.slots.len(),
            &self.slots[..shown]
        )
    }
}

/// Operation counters. Increments are atomic so totals do not depend on how
/// work is scheduled across threads.
#[derive(Debug, Default)]
pub struct OpLedger {
    rotations: AtomicU64,
    cipher_mults: AtomicU64,
    const_mults: AtomicU64,
    adds: AtomicU64,
}

impl OpLedger {
    pub fn report(&self) -> LedgerReport {
        LedgerReport {
            rotations: self.rotations.load(Ordering::Relaxed),
            cipher_mults: self.cipher_mults.load(Ordering::Relaxed),
            const_mults: self.const_mults.load(Ordering::Relaxed),
            adds: self.adds.load(Ordering::Relaxed),
        }
    }

    pub fn reset(&self) {
        self.rotations.store(0, Ordering::Relaxed);
        self.cipher_mults.store(0, Ordering::Relaxed);
        self.const_mults.store(0, Ordering::Relaxed);
        self.adds.store(0, Ordering::Relaxed);
    }
}

/// Snapshot of an [`OpLedger`].
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LedgerReport {
    pub rotations: u64,
    pub cipher_mults: u64,
    pub const_mults: u64,
    pub adds: u64,
}

impl LedgerReport {
    /// Counts accumulated since an earlier snapshot of the same ledger.
    pub fn since(&self, earlier: &LedgerReport) -> LedgerReport {
        *self - *earlier
    }
}

impl Sub for LedgerReport {
    type Output = LedgerReport;

    fn sub(self, rhs: LedgerReport) -> LedgerReport {
        LedgerReport {
            rotations: self.rotations - rhs.rotations,
            cipher_mults: self.cipher_mults - rhs.cipher_mults,
            const_mults: self.const_mults - rhs.const_mults,
            adds: self.adds - rhs.adds,
        }
    }
}

/// Evaluator for slot vectors of one fixed width.
#[derive(Debug)]
pub struct SlotMachine {
    slot_count: usize,
    ledger: OpLedger,
}

impl Default for SlotMachine {
    fn default() -> Self {
        Self {
            slot_count: DEFAULT_SLOTS,
            ledger: OpLedger::default(),
        }
    }
}

impl SlotMachine {
    pub fn new(slot_count: usize) -> Result<Self> {
        if slot_count == 0 {
            return Err(Error::InvalidArgument("slot count must be positive".into()));
        }
        Ok(Self {
            slot_count,
            ledger: OpLedger::default(),
        })
    }

    pub fn slot_count(&self) -> usize {
        self.slot_count
    }

    pub fn ledger(&self) -> &OpLedger {
        &self.ledger
    }

    pub fn report(&self) -> LedgerReport {
        self.ledger.report()
    }

    /// Places `values` in the leading slots; the rest are zero. Free.
    pub fn encode(&self, values: &[f64]) -> Result<SlotVector> {
        if values.len() > self.slot_count {
            return Err(Error::Overflow {
                needed: values.len(),
                available: self.slot_count,
            });
        }
        let mut slots = vec![0.0; self.slot_count];
        slots[..values.len()].copy_from_slice(values);
        Ok(SlotVector { slots })
    }

    /// Reads back the first `n` slots. Free.
    pub fn decode(&self, v: &SlotVector, n: usize) -> Result<Vec<f64>> {
        if n > v.slots.len() {
            return Err(Error::Overflow {
                needed: n,
                available: v.slots.len(),
            });
        }
        Ok(v.slots[..n].to_vec())
    }

    /// Left rotation: slot `i` of the result is slot `(i + l) mod N` of `v`.
    /// Negative `l` rotates right. Rotating by a multiple of `N` is free.
    pub fn rot(&self, v: &SlotVector, l: i64) -> SlotVector {
        let n = v.slots.len();
        let shift = l.rem_euclid(n as i64) as usize;
        if shift == 0 {
            return v.clone();
        }
        self.ledger.rotations.fetch_add(1, Ordering::Relaxed);
        let mut slots = Vec::with_capacity(n);
        slots.extend_from_slice(&v.slots[shift..]);
        slots.extend_from_slice(&v.slots[..shift]);
        SlotVector { slots }
    }

    pub fn add(&self, a: &SlotVector, b: &SlotVector) -> Result<SlotVector> {
        check_widths(a.slots.len(), b.slots.len())?;
        self.ledger.adds.fetch_add(1, Ordering::Relaxed);
        Ok(SlotVector {
            slots: a.slots.iter().zip(&b.slots).map(|(x, y)| x + y).collect(),
        })
    }

    /// Slot-wise product of two "ciphertexts".
    pub fn mul(&self, a: &SlotVector, b: &SlotVector) -> Result<SlotVector> {
        check_widths(a.slots.len(), b.slots.len())?;
        self.ledger.cipher_mults.fetch_add(1, Ordering::Relaxed);
        Ok(SlotVector {
            slots: a.slots.iter().zip(&b.slots).map(|(x, y)| x * y).collect(),
        })
    }

    /// Slot-wise product with public constants.
    pub fn cmul(&self, v: &SlotVector, constants: &[f64]) -> Result<SlotVector> {
        check_widths(v.slots.len(), constants.len())?;
        self.ledger.const_mults.fetch_add(1, Ordering::Relaxed);
        Ok(SlotVector {
            slots: v.slots.iter().zip(constants).map(|(x, c)| x * c).collect(),
        })
    }

    /// Adds a list of vectors left to right. An empty list gives zeros.
    pub fn add_many<'a>(&self, vs: impl IntoIterator<Item = &'a SlotVector>) -> Result<SlotVector> {
        let mut iter = vs.into_iter();
        let Some(first) = iter.next() else {
            return self.encode(&[]);
        };
        let mut acc = first.clone();
        for v in iter {
            acc = self.add(&acc, v)?;
        }
        Ok(acc)
    }
}

fn check_widths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(shape(format!("slot counts differ: {a} vs {b}")));
    }
    Ok(())
}

/// Rotates a plaintext constant vector the same way [`SlotMachine::rot`]
/// rotates a slot vector. Plaintext data is public, so this costs nothing.
pub fn rotate_plain(values: &[f64], l: i64) -> Vec<f64> {
    let n = values.len();
    if n == 0 {
        return Vec::new();
    }
    let shift = l.rem_euclid(n as i64) as usize;
    let mut out = Vec::with_capacity(n);
    out.extend_from_slice(&values[shift..]);
    out.extend_from_slice(&values[..shift]);
    out
}
