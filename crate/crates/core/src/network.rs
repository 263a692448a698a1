//! The small CNN: one convolution with several kernels, a cubic activation,
//! a dense layer, a second cubic activation and the output layer.
//!
//! [`he_forward`] runs the whole pass on a single packed batch using only
//! slot-machine primitives; [`plaintext_forward`] is the plain reference.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conv::{he_conv2d, pack_images, plain_conv2d, reconstruct_representation, ConvSpec};
use crate::error::{shape, Error, Result};
use crate::linalg::{dense_layer, WeightMode};
use crate::matrix::{format_row, parse_csv_rows, Matrix};
use crate::packing::PackedMatrix;
use crate::simd::{LedgerReport, SlotMachine};

/// First activation, lowest degree first.
pub const ACT1_PRESET: [f64; 4] = [-0.00015120704, 0.4610149, 2.0225089, -1.4511951];
/// Second activation, lowest degree first.
pub const ACT2_PRESET: [f64; 4] = [-1.5650465, -0.9943767, 1.6794522, 0.5350255];

/// Ciphertext products in one encrypted-weight pass of the default network
/// on a batch of 32: 4 maps x 2 for act1, 8 FC-1 products x 32 columns,
/// 2 x 2 for act2, 2 FC-2 products x 16 padded columns.
pub const HE_FORWARD_CIPHER_MULTS: u64 = 300;

pub const MNIST_SIDE: usize = 28;
pub const DEFAULT_BATCH: usize = 32;

/// Shapes of a model; the default is the MNIST network
/// (28x28 input, four 3x3 kernels, 2704 -> 64 -> 10).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub image_h: usize,
    pub image_w: usize,
    pub kernels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            image_h: MNIST_SIDE,
            image_w: MNIST_SIDE,
            kernels: 4,
            kernel_h: 3,
            kernel_w: 3,
            hidden: 64,
            classes: 10,
        }
    }
}

impl Architecture {
    pub fn out_h(&self) -> usize {
        self.image_h + 1 - self.kernel_h
    }

    pub fn out_w(&self) -> usize {
        self.image_w + 1 - self.kernel_w
    }

    pub fn map_len(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// Width of the flattened convolution output.
    pub fn features(&self) -> usize {
        self.kernels * self.map_len()
    }

    fn validate(&self) -> Result<()> {
        if self.kernel_h == 0
            || self.kernel_w == 0
            || self.kernel_h > self.image_h
            || self.kernel_w > self.image_w
        {
            return Err(Error::KernelTooLarge {
                kh: self.kernel_h,
                kw: self.kernel_w,
                rows: self.image_h,
                cols: self.image_w,
            });
        }
        if self.kernels == 0 || self.hidden == 0 || self.classes == 0 {
            return Err(shape("every layer needs at least one unit"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnnModel {
    pub arch: Architecture,
    pub conv_kernels: Vec<Matrix>,
    pub conv_biases: Vec<f64>,
    pub act1: [f64; 4],
    /// `hidden x features`
    pub fc1: Matrix,
    pub fc1_bias: Vec<f64>,
    pub act2: [f64; 4],
    /// `classes x hidden`
    pub fc2: Matrix,
    pub fc2_bias: Vec<f64>,
}

impl CnnModel {
    /// All weights zero, preset activations.
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        Ok(Self {
            arch,
            conv_kernels: vec![Matrix::zeros(arch.kernel_h, arch.kernel_w); arch.kernels],
            conv_biases: vec![0.0; arch.kernels],
            act1: ACT1_PRESET,
            fc1: Matrix::zeros(arch.hidden, arch.features()),
            fc1_bias: vec![0.0; arch.hidden],
            act2: ACT2_PRESET,
            fc2: Matrix::zeros(arch.classes, arch.hidden),
            fc2_bias: vec![0.0; arch.classes],
        })
    }

    /// Uniform Glorot initialisation from a seeded ChaCha stream. Biases stay
    /// at zero and activations at the presets.
    pub fn random(arch: Architecture, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(arch)?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut glorot = |rows: usize, cols: usize, fan_in: usize, fan_out: usize| {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-limit..limit))
        };
        let k_area = arch.kernel_h * arch.kernel_w;
        model.conv_kernels = (0..arch.kernels)
            .map(|_| glorot(arch.kernel_h, arch.kernel_w, k_area, k_area))
            .collect();
        model.fc1 = glorot(arch.hidden, arch.features(), arch.features(), arch.hidden);
        model.fc2 = glorot(arch.classes, arch.hidden, arch.hidden, arch.classes);
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let a = &self.arch;
        a.validate()?;
        let check = |what: &str, got: (usize, usize), want: (usize, usize)| {
            if got == want {
                Ok(())
            } else {
                Err(shape(format!(
                    "{what} is {}x{}, expected {}x{}",
                    got.0, got.1, want.0, want.1
                )))
            }
        };
        if self.conv_kernels.len() != a.kernels || self.conv_biases.len() != a.kernels {
            return Err(shape(format!(
                "{} kernels and {} conv biases, expected {}",
                self.conv_kernels.len(),
                self.conv_biases.len(),
                a.kernels
            )));
        }
        for k in &self.conv_kernels {
            check("conv kernel", k.shape(), (a.kernel_h, a.kernel_w))?;
        }
        check("fc1", self.fc1.shape(), (a.hidden, a.features()))?;
        check("fc2", self.fc2.shape(), (a.classes, a.hidden))?;
        check("fc1 bias", (self.fc1_bias.len(), 1), (a.hidden, 1))?;
        check("fc2 bias", (self.fc2_bias.len(), 1), (a.classes, 1))?;
        Ok(())
    }

    /// True when both activations are exactly the preset polynomials.
    pub fn has_preset_activations(&self) -> bool {
        self.act1 == ACT1_PRESET && self.act2 == ACT2_PRESET
    }

    fn conv_spec(&self, batch: usize) -> Result<ConvSpec> {
        ConvSpec::new(
            self.arch.image_h,
            self.arch.image_w,
            batch,
            self.conv_kernels.clone(),
            self.conv_biases.clone(),
        )
    }
}

/// Images plus optional labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub images: Vec<Matrix>,
    pub labels: Option<Vec<u8>>,
}

impl Batch {
    pub fn new(images: Vec<Matrix>, labels: Option<Vec<u8>>) -> Result<Self> {
        if images.is_empty() {
            return Err(shape("empty batch"));
        }
        if let Some(l) = &labels {
            if l.len() != images.len() {
                return Err(shape(format!(
                    "{} labels for {} images",
                    l.len(),
                    images.len()
                )));
            }
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Uniform pixels in [0, 1].
    pub fn random(arch: &Architecture, size: usize, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let images = (0..size)
            .map(|_| Matrix::from_fn(arch.image_h, arch.image_w, |_, _| rng.gen_range(0.0..=1.0)))
            .collect();
        Self {
            images,
            labels: None,
        }
    }
}

/// Scalar reference for the activation, in the same operation order as
/// [`poly_activate`].
pub fn eval_poly(c: &[f64; 4], x: f64) -> f64 {
    let x2 = x * x;
    let x3 = x2 * x;
    c[1] * x + c[2] * x2 + c[3] * x3 + c[0]
}

/// `c0 + c1 x + c2 x^2 + c3 x^3` on the occupied slots, zero elsewhere.
/// Two ciphertext products; the coefficients enter as masked constants.
pub fn poly_activate(ev: &SlotMachine, p: &PackedMatrix, c: &[f64; 4]) -> Result<PackedMatrix> {
    let mask = p.occupancy_mask();
    let scaled = |k: f64| mask.iter().map(|&m| m * k).collect::<Vec<_>>();
    let x = p.vec();
    let x2 = ev.mul(x, x)?;
    let x3 = ev.mul(&x2, x)?;
    let t1 = ev.cmul(x, &scaled(c[1]))?;
    let t2 = ev.cmul(&x2, &scaled(c[2]))?;
    let t3 = ev.cmul(&x3, &scaled(c[3]))?;
    let sum = ev.add(&ev.add(&t1, &t2)?, &t3)?;
    Ok(p.with_vec(ev.add(&sum, &ev.encode(&scaled(c[0]))?)?))
}

/// Result of a packed forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// `batch x classes`
    pub logits: Matrix,
    pub ledger: LedgerReport,
    pub wall_time_ms: f64,
}

impl Forward {
    pub fn argmax(&self) -> Vec<usize> {
        argmax_rows(&self.logits)
    }
}

/// Packed forward pass over the whole batch in one slot vector.
///
/// Each feature map is reconstructed into its own `batch x map_len` block
/// before the dense layer; the ledger covers only this pass.
pub fn he_forward(
    ev: &SlotMachine,
    batch: &Batch,
    model: &CnnModel,
    mode: WeightMode,
) -> Result<Forward> {
    model.validate()?;
    let start = Instant::now();
    let before = ev.report();
    let n = batch.len();
    for img in &batch.images {
        if img.shape() != (model.arch.image_h, model.arch.image_w) {
            return Err(shape(format!(
                "image of shape {:?}, model wants {}x{}",
                img.shape(),
                model.arch.image_h,
                model.arch.image_w
            )));
        }
    }
    let spec = model.conv_spec(n)?;
    let ct = pack_images(ev, &batch.images)?;
    let maps = he_conv2d(ev, &ct, &spec)?;
    let hidden_in = maps
        .par_iter()
        .map(|m| {
            let flat = reconstruct_representation(ev, std::slice::from_ref(m), &spec)?;
            poly_activate(ev, &flat, &model.act1)
        })
        .collect::<Result<Vec<_>>>()?;
    let hidden = dense_layer(ev, &hidden_in, &model.fc1, &model.fc1_bias, mode)?
        .iter()
        .map(|h| poly_activate(ev, h, &model.act2))
        .collect::<Result<Vec<_>>>()?;
    let out = dense_layer(ev, &hidden, &model.fc2, &model.fc2_bias, mode)?;
    let mut logits = Matrix::zeros(n, model.arch.classes);
    let mut col = 0;
    for chunk in &out {
        let d = chunk.decode(ev)?;
        for i in 0..n {
            logits.row_mut(i)[col..col + chunk.cols()].copy_from_slice(d.row(i));
        }
        col += chunk.cols();
    }
    Ok(Forward {
        logits,
        ledger: ev.report().since(&before),
        wall_time_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Plain reference pass; `batch x classes` logits.
pub fn plaintext_forward(batch: &Batch, model: &CnnModel) -> Result<Matrix> {
    model.validate()?;
    let spec = model.conv_spec(batch.len())?;
    let maps = plain_conv2d(&batch.images, &spec)?;
    let mut logits = Matrix::zeros(batch.len(), model.arch.classes);
    for (i, image_maps) in maps.iter().enumerate() {
        let features: Vec<f64> = image_maps
            .iter()
            .flat_map(|m| m.as_slice().iter().map(|&x| eval_poly(&model.act1, x)))
            .collect();
        let hidden: Vec<f64> = dense(&model.fc1, &model.fc1_bias, &features)
            .into_iter()
            .map(|x| eval_poly(&model.act2, x))
            .collect();
        logits
            .row_mut(i)
            .copy_from_slice(&dense(&model.fc2, &model.fc2_bias, &hidden));
    }
    Ok(logits)
}

fn dense(w: &Matrix, bias: &[f64], x: &[f64]) -> Vec<f64> {
    (0..w.rows())
        .map(|r| w.row(r).iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + bias[r])
        .collect()
}

/// Index of the largest entry per row; ties go to the lowest index.
pub fn argmax_rows(m: &Matrix) -> Vec<usize> {
    (0..m.rows())
        .map(|i| {
            m.row(i)
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (j, &x)| {
                    if x > best.1 {
                        (j, x)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    architecture: Architecture,
    act1: [f64; 4],
    act2: [f64; 4],
}

/// Writes `conv_k{i}.csv`, `fc1.csv`, `fc2.csv`, `biases.csv` (three lines:
/// conv, fc1, fc2 biases) and `manifest.json`.
pub fn save_model(model: &CnnModel, dir: impl AsRef<Path>) -> Result<()> {
    model.validate()?;
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    for (i, k) in model.conv_kernels.iter().enumerate() {
        k.write_csv(dir.join(format!("conv_k{i}.csv")))?;
    }
    model.fc1.write_csv(dir.join("fc1.csv"))?;
    model.fc2.write_csv(dir.join("fc2.csv"))?;
    let biases = [&model.conv_biases, &model.fc1_bias, &model.fc2_bias]
        .iter()
        .map(|b| format_row(b) + "\n")
        .collect::<String>();
    fs::write(dir.join("biases.csv"), biases)?;
    let manifest = Manifest {
        architecture: model.arch,
        act1: model.act1,
        act2: model.act2,
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

pub fn load_model(dir: impl AsRef<Path>) -> Result<CnnModel> {
    let dir = dir.as_ref();
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.exists() {
        return Err(Error::MissingFile(manifest_path));
    }
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
    let arch = manifest.architecture;
    arch.validate()?;
    let conv_kernels = (0..arch.kernels)
        .map(|i| Matrix::read_csv(dir.join(format!("conv_k{i}.csv"))))
        .collect::<Result<Vec<_>>>()?;
    let fc1 = Matrix::read_csv(dir.join("fc1.csv"))?;
    let fc2 = Matrix::read_csv(dir.join("fc2.csv"))?;
    let bias_path = dir.join("biases.csv");
    let (conv_biases, fc1_bias, fc2_bias) = if bias_path.exists() {
        let mut rows = parse_csv_rows(&fs::read_to_string(&bias_path)?)?.into_iter();
        let mut next = |len: usize| rows.next().unwrap_or_else(|| vec![0.0; len]);
        (next(arch.kernels), next(arch.hidden), next(arch.classes))
    } else {
        (
            vec![0.0; arch.kernels],
            vec![0.0; arch.hidden],
            vec![0.0; arch.classes],
        )
    };
    let model = CnnModel {
        arch,
        conv_kernels,
        conv_biases,
        act1: manifest.act1,
        fc1,
        fc1_bias,
        act2: manifest.act2,
        fc2,
        fc2_bias,
    };
    model.validate()?;
    Ok(model)
}
