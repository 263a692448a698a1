//! Stride-1 valid convolution over a batch of images packed in one vector.
//!
//! Images sit back to back, `h*w` slots each. For every kernel offset
//! `(a, b)` the packed batch is multiplied by a public filter vector holding
//! the kernel tiled with that offset, the window sums are formed with
//! [`sum_for_conv_stacked`], and a selector keeps only the output positions
//! whose tiling lines up with the kernel origin. The `kh*kw` selectors
//! partition the valid region, so adding the pieces gives the full map.
//!
//! This is cross-correlation (no kernel flip).

use rayon::prelude::*;

use crate::error::{shape, Error, Result};
use crate::matrix::Matrix;
use crate::packing::{region_mask_at, sum_for_conv_stacked, PackedMatrix};
use crate::simd::{SlotMachine, SlotVector};

#[derive(Debug, Clone, PartialEq)]
pub struct ConvSpec {
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub batch: usize,
    pub kernels: Vec<Matrix>,
    pub biases: Vec<f64>,
    pub stride: usize,
}

impl ConvSpec {
    /// Stride-1 spec; `biases` defaults to zeros when empty.
    pub fn new(
        h: usize,
        w: usize,
        batch: usize,
        kernels: Vec<Matrix>,
        biases: Vec<f64>,
    ) -> Result<Self> {
        let (kh, kw) = kernels
            .first()
            .map(Matrix::shape)
            .ok_or_else(|| shape("at least one kernel is required"))?;
        let biases = if biases.is_empty() {
            vec![0.0; kernels.len()]
        } else {
            biases
        };
        let spec = Self {
            h,
            w,
            kh,
            kw,
            batch,
            kernels,
            biases,
            stride: 1,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride != 1 {
            return Err(Error::UnsupportedStride(self.stride));
        }
        if self.kh == 0 || self.kw == 0 || self.kh > self.h || self.kw > self.w {
            return Err(Error::KernelTooLarge {
                kh: self.kh,
                kw: self.kw,
                rows: self.h,
                cols: self.w,
            });
        }
        if self.batch == 0 {
            return Err(shape("batch must hold at least one image"));
        }
        if let Some(k) = self
            .kernels
            .iter()
            .find(|k| k.shape() != (self.kh, self.kw))
        {
            return Err(shape(format!(
                "kernel of shape {:?} in a {}x{} spec",
                k.shape(),
                self.kh,
                self.kw
            )));
        }
        if self.biases.len() != self.kernels.len() {
            return Err(shape(format!(
                "{} biases for {} kernels",
                self.biases.len(),
                self.kernels.len()
            )));
        }
        Ok(())
    }

    pub fn out_h(&self) -> usize {
        self.h - self.kh + 1
    }

    pub fn out_w(&self) -> usize {
        self.w - self.kw + 1
    }

    pub fn image_len(&self) -> usize {
        self.h * self.w
    }

    /// Flattened width of all feature maps of one image.
    pub fn output_width(&self) -> usize {
        self.out_h() * self.out_w() * self.kernels.len()
    }

    fn check_fits(&self, slot_count: usize) -> Result<()> {
        let needed = self.batch * self.image_len();
        if needed > slot_count {
            return Err(Error::Overflow {
                needed,
                available: slot_count,
            });
        }
        Ok(())
    }
}

/// Public filter vectors for one kernel, one per offset `(a, b)`, stored
/// row-major by offset.
#[derive(Debug, Clone)]
pub struct FilterConstants {
    kh: usize,
    kw: usize,
    offsets: Vec<Vec<f64>>,
}

impl FilterConstants {
    pub fn offset(&self, a: usize, b: usize) -> &[f64] {
        &self.offsets[a * self.kw + b]
    }

    pub fn kernel_shape(&self) -> (usize, usize) {
        (self.kh, self.kw)
    }
}

/// Tiles kernel `kernel` across every image block: slot of pixel `(i, j)`
/// gets `K[(i + a) mod kh][(j + b) mod kw]` (0-based); zero outside images.
pub fn build_filter_constants(
    spec: &ConvSpec,
    kernel: usize,
    slot_count: usize,
) -> Result<FilterConstants> {
    spec.validate()?;
    spec.check_fits(slot_count)?;
    let k = spec
        .kernels
        .get(kernel)
        .ok_or_else(|| shape(format!("no kernel {kernel}")))?;
    let mut offsets = Vec::with_capacity(spec.kh * spec.kw);
    for a in 0..spec.kh {
        for b in 0..spec.kw {
            let mut tile = vec![0.0; slot_count];
            for img in 0..spec.batch {
                let base = img * spec.image_len();
                for i in 0..spec.h {
                    for j in 0..spec.w {
                        tile[base + i * spec.w + j] = k[((i + a) % spec.kh, (j + b) % spec.kw)];
                    }
                }
            }
            offsets.push(tile);
        }
    }
    Ok(FilterConstants {
        kh: spec.kh,
        kw: spec.kw,
        offsets,
    })
}

/// Positions of the valid region whose window starts on offset `(a, b)`.
pub fn offset_selector(spec: &ConvSpec, a: usize, b: usize, slot_count: usize) -> Vec<f64> {
    let mut mask = vec![0.0; slot_count];
    for img in 0..spec.batch {
        let base = img * spec.image_len();
        for r in (0..spec.out_h()).filter(|r| (r + a).is_multiple_of(spec.kh)) {
            for c in (0..spec.out_w()).filter(|c| (c + b).is_multiple_of(spec.kw)) {
                mask[base + r * spec.w + c] = 1.0;
            }
        }
    }
    mask
}

/// Packs a batch of `h x w` images back to back, one image per row of an
/// `batch x (h*w)` matrix.
pub fn pack_images(ev: &SlotMachine, images: &[Matrix]) -> Result<PackedMatrix> {
    let Some(first) = images.first() else {
        return Err(shape("no images to pack"));
    };
    let (h, w) = first.shape();
    let mut slots = Vec::with_capacity(images.len() * h * w);
    for img in images {
        if img.shape() != (h, w) {
            return Err(shape(format!(
                "image of shape {:?} in a {h}x{w} batch",
                img.shape()
            )));
        }
        slots.extend_from_slice(img.as_slice());
    }
    PackedMatrix::from_parts(ev.encode(&slots)?, images.len(), h * w, 0)
}

/// One output vector per kernel, in the same `batch x (h*w)` layout as the
/// input. Block `i` holds the valid map plus bias at its top-left
/// `out_h x out_w` corner and exact zeros elsewhere.
pub fn he_conv2d(
    ev: &SlotMachine,
    ct: &PackedMatrix,
    spec: &ConvSpec,
) -> Result<Vec<PackedMatrix>> {
    spec.validate()?;
    spec.check_fits(ev.slot_count())?;
    if ct.origin() != 0 || ct.len() != spec.batch * spec.image_len() {
        return Err(shape(format!(
            "input holds {} slots from {}, spec wants {} images of {}x{}",
            ct.len(),
            ct.origin(),
            spec.batch,
            spec.h,
            spec.w
        )));
    }
    let stacked = ct.reshape(spec.batch * spec.h, spec.w)?;
    let slots = ev.slot_count();
    let valid = region_mask_at(
        slots,
        0,
        spec.h,
        spec.w,
        spec.out_h(),
        spec.out_w(),
        spec.batch,
        spec.image_len(),
    )?;
    (0..spec.kernels.len())
        .into_par_iter()
        .map(|k| {
            let filters = build_filter_constants(spec, k, slots)?;
            let mut acc: Option<SlotVector> = None;
            for a in 0..spec.kh {
                for b in 0..spec.kw {
                    let select = offset_selector(spec, a, b, slots);
                    if select.iter().all(|&x| x == 0.0) {
                        continue;
                    }
                    let weighted = ev.cmul(stacked.vec(), filters.offset(a, b))?;
                    let sums = sum_for_conv_stacked(
                        ev,
                        &stacked.with_vec(weighted),
                        spec.h,
                        spec.kh,
                        spec.kw,
                    )?;
                    let part = ev.cmul(sums.vec(), &select)?;
                    acc = Some(match acc {
                        None => part,
                        Some(prev) => ev.add(&prev, &part)?,
                    });
                }
            }
            let acc = acc.expect("offset (0, 0) always selects the origin");
            let bias: Vec<f64> = valid.iter().map(|&m| m * spec.biases[k]).collect();
            let out = ev.add(&acc, &ev.encode(&bias)?)?;
            Ok(ct.with_vec(out))
        })
        .collect()
}

/// Upper bound on the rotations [`reconstruct_representation`] may spend:
/// `out_h + 1` per image per map.
pub fn reconstruction_budget(spec: &ConvSpec, maps: usize) -> u64 {
    (maps * spec.batch * (spec.out_h() + 1)) as u64
}

/// Squeezes the garbage slots out of [`he_conv2d`] outputs.
///
/// The result is a `batch x (maps * out_h * out_w)` row-major matrix: for
/// each image, map 0's valid region row by row, then map 1's, and so on.
/// Rows are first pulled together inside every image at once (one
/// rotation per valid row after the first), then each image block is moved
/// to its final offset (one rotation per nonzero move).
pub fn reconstruct_representation(
    ev: &SlotMachine,
    cts: &[PackedMatrix],
    spec: &ConvSpec,
) -> Result<PackedMatrix> {
    spec.validate()?;
    let maps = cts.len();
    if maps == 0 {
        return Err(shape("nothing to reconstruct"));
    }
    let (oh, ow) = (spec.out_h(), spec.out_w());
    let map_len = oh * ow;
    let row_len = maps * map_len;
    let slots = ev.slot_count();
    let needed = spec.batch * row_len;
    if needed > slots {
        return Err(Error::Overflow {
            needed,
            available: slots,
        });
    }
    let hw = spec.image_len();
    let parts = cts
        .par_iter()
        .enumerate()
        .map(|(k, ct)| {
            if ct.len() != spec.batch * hw {
                return Err(shape("input is not a convolution output for this spec"));
            }
            let mut rows = Vec::with_capacity(oh);
            for r in 0..oh {
                let mask = region_row_mask(slots, spec, r);
                let piece = ev.cmul(ct.vec(), &mask)?;
                rows.push(ev.rot(&piece, (r * (spec.w - ow)) as i64));
            }
            let compact = ev.add_many(&rows)?;
            let target = |b: usize| (b * row_len + k * map_len) as i64;
            if spec.batch == 1 {
                return Ok(vec![ev.rot(&compact, -target(0))]);
            }
            (0..spec.batch)
                .map(|b| {
                    let mut mask = vec![0.0; slots];
                    mask[b * hw..b * hw + map_len].fill(1.0);
                    let piece = ev.cmul(&compact, &mask)?;
                    Ok(ev.rot(&piece, (b * hw) as i64 - target(b)))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let out = ev.add_many(parts.iter().flatten())?;
    PackedMatrix::from_parts(out, spec.batch, row_len, 0)
}

fn region_row_mask(slots: usize, spec: &ConvSpec, r: usize) -> Vec<f64> {
    let mut mask = vec![0.0; slots];
    for b in 0..spec.batch {
        let start = b * spec.image_len() + r * spec.w;
        mask[start..start + spec.out_w()].fill(1.0);
    }
    mask
}

/// Reference valid cross-correlation: `result[image][kernel]` is an
/// `out_h x out_w` map including the kernel's bias.
pub fn plain_conv2d(images: &[Matrix], spec: &ConvSpec) -> Result<Vec<Vec<Matrix>>> {
    spec.validate()?;
    images
        .iter()
        .map(|img| {
            if img.shape() != (spec.h, spec.w) {
                return Err(shape(format!(
                    "image of shape {:?}, spec wants {}x{}",
                    img.shape(),
                    spec.h,
                    spec.w
                )));
            }
            Ok(spec
                .kernels
                .iter()
                .zip(&spec.biases)
                .map(|(k, &bias)| {
                    Matrix::from_fn(spec.out_h(), spec.out_w(), |r, c| {
                        let mut s = 0.0;
                        for p in 0..spec.kh {
                            for q in 0..spec.kw {
                                s += k[(p, q)] * img[(r + p, c + q)];
                            }
                        }
                        s + bias
                    })
                })
                .collect())
        })
        .collect()
}

/// Reads the valid `out_h x out_w` corner of image `image` from a
/// [`he_conv2d`] output.
pub fn decode_map(
    ev: &SlotMachine,
    out: &PackedMatrix,
    spec: &ConvSpec,
    image: usize,
) -> Result<Matrix> {
    let all = out.decode(ev)?;
    let block = all.row(image);
    Ok(Matrix::from_fn(spec.out_h(), spec.out_w(), |r, c| {
        block[r * spec.w + c]
    }))
}
