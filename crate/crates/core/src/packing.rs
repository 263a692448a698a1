//! Row-by-row ("database") packing of a matrix into one slot vector, and the
//! shifting and summation procedures built on top of it.
//!
//! Element `[i][j]` (1-based) of an `n x f` matrix lives in slot
//! `origin + (i-1)*f + (j-1)`. Everything here is expressed with the
//! [`SlotMachine`] primitives only; plaintext masks are ordinary `Vec<f64>`.

use crate::error::{shape, Error, Result};
use crate::matrix::Matrix;
use crate::simd::{SlotMachine, SlotVector};

/// A matrix packed row-major into a slot vector.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedMatrix {
    vec: SlotVector,
    rows: usize,
    cols: usize,
    origin: usize,
}

impl PackedMatrix {
    pub fn from_parts(vec: SlotVector, rows: usize, cols: usize, origin: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(shape(format!(
                "packed matrix must be non-empty, got {rows}x{cols}"
            )));
        }
        let needed = origin + rows * cols;
        if needed > vec.slot_count() {
            return Err(Error::Overflow {
                needed,
                available: vec.slot_count(),
            });
        }
        Ok(Self {
            vec,
            rows,
            cols,
            origin,
        })
    }

    pub fn vec(&self) -> &SlotVector {
        &self.vec
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn origin(&self) -> usize {
        self.origin
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn slot_count(&self) -> usize {
        self.vec.slot_count()
    }

    /// Same layout, new contents.
    pub fn with_vec(&self, vec: SlotVector) -> Self {
        Self {
            vec,
            ..self.clone()
        }
    }

    /// Reinterprets the occupied region with a different shape of equal size.
    pub fn reshape(&self, rows: usize, cols: usize) -> Result<Self> {
        if rows * cols != self.len() {
            return Err(shape(format!(
                "cannot view {}x{} as {rows}x{cols}",
                self.rows, self.cols
            )));
        }
        Ok(Self {
            rows,
            cols,
            ..self.clone()
        })
    }

    pub fn decode(&self, ev: &SlotMachine) -> Result<Matrix> {
        let all = ev.decode(&self.vec, self.origin + self.len())?;
        Matrix::from_vec(self.rows, self.cols, all[self.origin..].to_vec())
    }

    /// Mask with 1.0 on the occupied region and 0.0 elsewhere.
    pub fn occupancy_mask(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.slot_count()];
        m[self.origin..self.origin + self.len()].fill(1.0);
        m
    }
}

pub fn pack_matrix(ev: &SlotMachine, z: &Matrix) -> Result<PackedMatrix> {
    let v = ev.encode(z.as_slice())?;
    PackedMatrix::from_parts(v, z.rows(), z.cols(), 0)
}

/// Cyclic rotation of the occupied region by `l` positions to the left.
///
/// When the matrix fills every slot this is a single `rot`. Otherwise the
/// wrapped tail is brought in with a second rotation and the two pieces are
/// selected with masks: 2 rotations, 2 constant multiplies, 1 add.
pub fn rotate_within(ev: &SlotMachine, p: &PackedMatrix, l: i64) -> Result<PackedMatrix> {
    let len = p.len();
    let shift = l.rem_euclid(len as i64) as usize;
    if shift == 0 {
        return Ok(p.clone());
    }
    if p.origin == 0 && len == p.slot_count() {
        return Ok(p.with_vec(ev.rot(&p.vec, shift as i64)));
    }
    let o = p.origin;
    let n = p.slot_count();
    let mut head_mask = vec![0.0; n];
    head_mask[o..o + len - shift].fill(1.0);
    let mut tail_mask = vec![0.0; n];
    tail_mask[o + len - shift..o + len].fill(1.0);
    let head = ev.cmul(&ev.rot(&p.vec, shift as i64), &head_mask)?;
    let tail = ev.cmul(&ev.rot(&p.vec, shift as i64 - len as i64), &tail_mask)?;
    Ok(p.with_vec(ev.add(&head, &tail)?))
}

/// Shifts every element one column left; column 1 wraps into the last
/// column of the previous row and `z[1][1]` lands at `[n][f]`.
pub fn incomplete_column_shift(ev: &SlotMachine, p: &PackedMatrix) -> Result<PackedMatrix> {
    rotate_within(ev, p, 1)
}

/// Moves row `i+1` into row `i`; row 1 wraps around to row `n`.
pub fn row_shift(ev: &SlotMachine, p: &PackedMatrix) -> Result<PackedMatrix> {
    rotate_within(ev, p, p.cols as i64)
}

/// Number of rotations [`window_sum`] spends on a window of `len` terms.
pub fn window_rotations(len: usize) -> u64 {
    if len <= 1 {
        return 0;
    }
    let hi = usize::BITS - 1 - len.leading_zeros();
    (hi + len.count_ones() - 1) as u64
}

/// Slot `s` of the result is `v[s] + v[s+d] + ... + v[s+(len-1)d]`, where
/// `d = stride` when `forward` and `d = -stride` otherwise (indices cyclic).
///
/// Uses doubling: partial sums over 1, 2, 4, .. terms, then one shifted
/// copy per remaining set bit of `len`. Costs [`window_rotations`]`(len)`.
pub fn window_sum(
    ev: &SlotMachine,
    v: &SlotVector,
    len: usize,
    stride: usize,
    forward: bool,
) -> Result<SlotVector> {
    if len <= 1 {
        return Ok(v.clone());
    }
    let dir: i64 = if forward { 1 } else { -1 };
    let step = |k: usize| dir * (k * stride) as i64;
    let hi = (usize::BITS - 1 - len.leading_zeros()) as usize;
    let mut powers = Vec::with_capacity(hi + 1);
    powers.push(v.clone());
    for t in 0..hi {
        let prev = &powers[t];
        let next = ev.add(prev, &ev.rot(prev, step(1 << t)))?;
        powers.push(next);
    }
    let mut acc = powers[hi].clone();
    let mut offset = 1usize << hi;
    for t in (0..hi).rev() {
        if len & (1 << t) != 0 {
            acc = ev.add(&acc, &ev.rot(&powers[t], step(offset)))?;
            offset += 1 << t;
        }
    }
    Ok(acc)
}

/// Rotations used by [`sum_row_vec`] on a matrix with `rows` rows.
pub fn sum_row_vec_rotations(rows: usize) -> u64 {
    2 * window_rotations(rows)
}

/// Rotations used by [`sum_col_vec`] on a matrix with `cols` columns.
pub fn sum_col_vec_rotations(cols: usize) -> u64 {
    2 * window_rotations(cols)
}

/// Every row of the result is the vector of column sums of `p`.
pub fn sum_row_vec(ev: &SlotMachine, p: &PackedMatrix) -> Result<PackedMatrix> {
    let sums = window_sum(ev, &p.vec, p.rows, p.cols, true)?;
    let mut first_row = vec![0.0; p.slot_count()];
    first_row[p.origin..p.origin + p.cols].fill(1.0);
    let head = ev.cmul(&sums, &first_row)?;
    let spread = window_sum(ev, &head, p.rows, p.cols, false)?;
    Ok(p.with_vec(spread))
}

/// Every entry of row `i` of the result is the sum of row `i` of `p`.
pub fn sum_col_vec(ev: &SlotMachine, p: &PackedMatrix) -> Result<PackedMatrix> {
    let sums = window_sum(ev, &p.vec, p.cols, 1, true)?;
    let mut first_col = vec![0.0; p.slot_count()];
    for i in 0..p.rows {
        first_col[p.origin + i * p.cols] = 1.0;
    }
    let head = ev.cmul(&sums, &first_col)?;
    let spread = window_sum(ev, &head, p.cols, 1, false)?;
    Ok(p.with_vec(spread))
}

/// Window sums for a single image occupying the whole matrix.
///
/// Entry `[i][j]` of the result is the sum of the `kh x kw` window whose
/// top-left corner is `[i][j]`, for every window that fits; all other
/// entries are exactly zero.
pub fn sum_for_conv(
    ev: &SlotMachine,
    p: &PackedMatrix,
    kh: usize,
    kw: usize,
) -> Result<PackedMatrix> {
    sum_for_conv_stacked(ev, p, p.rows, kh, kw)
}

/// [`sum_for_conv`] over a vertical stack of images, each `image_rows`
/// rows tall and `p.cols()` wide; windows never straddle two images.
///
/// Step 1 adds `rot(v, q)` for `q < kw`, step 2 adds `rot(step1, p*cols)` for
/// `p < kh`, step 3 keeps the valid top-left corners with one constant
/// multiply. Exactly `(kw-1) + (kh-1)` rotations.
pub fn sum_for_conv_stacked(
    ev: &SlotMachine,
    p: &PackedMatrix,
    image_rows: usize,
    kh: usize,
    kw: usize,
) -> Result<PackedMatrix> {
    if image_rows == 0 || !p.rows.is_multiple_of(image_rows) {
        return Err(shape(format!(
            "{} rows do not split into images of {image_rows} rows",
            p.rows
        )));
    }
    if kh == 0 || kw == 0 || kh > image_rows || kw > p.cols {
        return Err(Error::KernelTooLarge {
            kh,
            kw,
            rows: image_rows,
            cols: p.cols,
        });
    }
    let mut step1 = p.vec.clone();
    for q in 1..kw {
        step1 = ev.add(&step1, &ev.rot(&p.vec, q as i64))?;
    }
    let mut step2 = step1.clone();
    for r in 1..kh {
        step2 = ev.add(&step2, &ev.rot(&step1, (r * p.cols) as i64))?;
    }
    let batch = p.rows / image_rows;
    let stride = image_rows * p.cols;
    let mask = region_mask_at(
        p.slot_count(),
        p.origin,
        image_rows,
        p.cols,
        image_rows - kh + 1,
        p.cols - kw + 1,
        batch,
        stride,
    )?;
    Ok(p.with_vec(ev.cmul(&step2, &mask)?))
}

/// Plaintext mask with 1.0 on the top-left `valid_rows x valid_cols` corner
/// of each of `batch` image blocks (`rows x cols`, `image_stride` slots
/// apart) and 0.0 elsewhere.
pub fn make_region_mask(
    slot_count: usize,
    rows: usize,
    cols: usize,
    valid_rows: usize,
    valid_cols: usize,
    batch: usize,
    image_stride: usize,
) -> Result<Vec<f64>> {
    region_mask_at(
        slot_count,
        0,
        rows,
        cols,
        valid_rows,
        valid_cols,
        batch,
        image_stride,
    )
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn region_mask_at(
    slot_count: usize,
    origin: usize,
    rows: usize,
    cols: usize,
    valid_rows: usize,
    valid_cols: usize,
    batch: usize,
    image_stride: usize,
) -> Result<Vec<f64>> {
    if valid_rows > rows || valid_cols > cols {
        return Err(shape(format!(
            "valid region {valid_rows}x{valid_cols} exceeds block {rows}x{cols}"
        )));
    }
    if rows * cols > image_stride && batch > 1 {
        return Err(shape(format!(
            "blocks of {rows}x{cols} overlap at stride {image_stride}"
        )));
    }
    let needed = if batch == 0 {
        origin
    } else {
        origin + (batch - 1) * image_stride + rows * cols
    };
    if needed > slot_count {
        return Err(Error::Overflow {
            needed,
            available: slot_count,
        });
    }
    let mut mask = vec![0.0; slot_count];
    for b in 0..batch {
        let base = origin + b * image_stride;
        for r in 0..valid_rows {
            let start = base + r * cols;
            mask[start..start + valid_cols].fill(1.0);
        }
    }
    Ok(mask)
}
