//! Matrix multiplication on packed matrices.
//!
//! The left operand `A` (`n x f`) is packed row by row. The right operand
//! `B` (`f x m`) is packed transposed and cyclically extended to `n` rows, so
//! row `r` of the pack holds column `r mod m` of `B`. Shifting the pack by
//! whole rows (the row shifter) advances which column of `B` meets each row
//! of `A`. Each of the `m` iterations then does one slot-wise product, one
//! row summation and one selector mask:
//!
//! ```text
//! for k in 0..m:
//!     S_k = sum_col_vec(A * shift^k(T))      // row i: <A_i, B_col((i+k) mod m)>
//!     C  += S_k * select_k                   // keep slot [i][(i+k) mod m]
//! ```
//!
//! so the whole product costs exactly `m` ciphertext multiplications.
//!
//! `m` is padded with zero columns up to the smallest divisor of `n`, which
//! keeps the cyclic extension exact. When `f != m` the accumulation runs at
//! row stride `max(f, m)` and is compacted to stride `m` at the end.

use rayon::prelude::*;

use crate::error::{shape, Error, Result};
use crate::matrix::Matrix;
use crate::packing::{self, rotate_within, sum_col_vec, PackedMatrix};
use crate::simd::{SlotMachine, SlotVector};

/// Whether the right operand is treated as a ciphertext or as public
/// constants. The arithmetic is identical; only the ledger differs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WeightMode {
    #[default]
    Encrypted,
    Plain,
}

/// `B` transposed, zero padded and cyclically extended to `n` rows.
#[derive(Debug, Clone)]
pub struct TransposedPack {
    pm: PackedMatrix,
    /// Output columns (columns of `B`).
    m: usize,
    /// `m` rounded up to a divisor of `n`.
    m_padded: usize,
    /// Inner dimension (rows of `B`).
    f: usize,
    /// Rows of `A`.
    n: usize,
}

impl TransposedPack {
    pub fn packed(&self) -> &PackedMatrix {
        &self.pm
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn m_padded(&self) -> usize {
        self.m_padded
    }

    pub fn f(&self) -> usize {
        self.f
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Row stride of the pack, `max(f, m_padded)`.
    pub fn width(&self) -> usize {
        self.pm.cols()
    }
}

/// Smallest divisor of `n` that is at least `m`, if any.
pub fn padded_columns(m: usize, n: usize) -> Option<usize> {
    (m.max(1)..=n).find(|d| n.is_multiple_of(*d))
}

struct Layout {
    m_padded: usize,
    width: usize,
}

fn layout(b: &Matrix, n: usize) -> Result<Layout> {
    let (f, m) = b.shape();
    if f == 0 || m == 0 || n == 0 {
        return Err(shape(format!("empty operand: B is {f}x{m}, n = {n}")));
    }
    let m_padded = padded_columns(m, n).ok_or_else(|| {
        shape(format!(
            "B has {m} columns but A only {n} rows; split B into column chunks of at most {n}"
        ))
    })?;
    Ok(Layout {
        m_padded,
        width: f.max(m_padded),
    })
}

/// Plaintext slots of the transposed pack after `shift` row shifts.
fn transposed_slots(
    b: &Matrix,
    n: usize,
    lay: &Layout,
    shift: usize,
    slot_count: usize,
) -> Result<Vec<f64>> {
    let (f, m) = b.shape();
    let needed = n * lay.width;
    if needed > slot_count {
        return Err(Error::Overflow {
            needed,
            available: slot_count,
        });
    }
    let mut slots = vec![0.0; slot_count];
    for r in 0..n {
        let col = (r + shift) % lay.m_padded;
        if col >= m {
            continue;
        }
        for j in 0..f {
            slots[r * lay.width + j] = b[(j, col)];
        }
    }
    Ok(slots)
}

pub fn pack_transposed(ev: &SlotMachine, b: &Matrix, n: usize) -> Result<TransposedPack> {
    let lay = layout(b, n)?;
    let slots = transposed_slots(b, n, &lay, 0, ev.slot_count())?;
    let v = ev.encode(&slots)?;
    Ok(TransposedPack {
        pm: PackedMatrix::from_parts(v, n, lay.width, 0)?,
        m: b.cols(),
        m_padded: lay.m_padded,
        f: b.rows(),
        n,
    })
}

/// Shifts the pack up by one row (cyclically), so row `r` now holds column
/// `(r + 1) mod m` of `B`.
pub fn row_shifter(ev: &SlotMachine, t: &TransposedPack) -> Result<TransposedPack> {
    Ok(TransposedPack {
        pm: packing::row_shift(ev, &t.pm)?,
        ..t.clone()
    })
}

fn row_mask(slot_count: usize, start: usize, len: usize) -> Vec<f64> {
    let mut mask = vec![0.0; slot_count];
    mask[start..start + len].fill(1.0);
    mask
}

/// Moves each row `i` of an `n`-row layout from stride `from` to stride `to`.
/// Costs one constant multiply per row and one rotation per nonzero move.
fn restride(
    ev: &SlotMachine,
    v: &SlotVector,
    n: usize,
    keep: usize,
    from: usize,
    to: usize,
) -> Result<SlotVector> {
    if from == to {
        return Ok(v.clone());
    }
    let moved = (0..n)
        .into_par_iter()
        .map(|i| {
            let piece = ev.cmul(v, &row_mask(v.slot_count(), i * from, keep))?;
            let shift = i as i64 * (from as i64 - to as i64);
            Ok(ev.rot(&piece, shift))
        })
        .collect::<Result<Vec<_>>>()?;
    ev.add_many(&moved)
}

/// Packed product `A * B`, with `B` given as its [`TransposedPack`].
pub fn he_matmul(ev: &SlotMachine, a: &PackedMatrix, t: &TransposedPack) -> Result<PackedMatrix> {
    check_left(a, t.n, t.f)?;
    let width = t.width();
    let a_wide = widen(ev, a, width)?;
    accumulate(ev, t.n, width, t.m, t.m_padded, |k| {
        let shifted = rotate_within(ev, &t.pm, (k * width) as i64)?;
        ev.mul(&a_wide, shifted.vec())
    })
}

/// [`he_matmul`] against a right operand given in the clear: the shifted
/// packs are formed as plaintext and multiplied in with `cmul`.
pub fn he_matmul_plain(ev: &SlotMachine, a: &PackedMatrix, b: &Matrix) -> Result<PackedMatrix> {
    let n = a.rows();
    check_left(a, n, b.rows())?;
    let lay = layout(b, n)?;
    let a_wide = widen(ev, a, lay.width)?;
    accumulate(ev, n, lay.width, b.cols(), lay.m_padded, |k| {
        let consts = transposed_slots(b, n, &lay, k, ev.slot_count())?;
        ev.cmul(&a_wide, &consts)
    })
}

/// Dispatches on [`WeightMode`].
pub fn he_matmul_with(
    ev: &SlotMachine,
    a: &PackedMatrix,
    b: &Matrix,
    mode: WeightMode,
) -> Result<PackedMatrix> {
    match mode {
        WeightMode::Encrypted => he_matmul(ev, a, &pack_transposed(ev, b, a.rows())?),
        WeightMode::Plain => he_matmul_plain(ev, a, b),
    }
}

fn check_left(a: &PackedMatrix, n: usize, f: usize) -> Result<()> {
    if a.origin() != 0 {
        return Err(shape("left operand must start at slot 0"));
    }
    if a.rows() != n || a.cols() != f {
        return Err(shape(format!(
            "left operand is {}x{}, expected {n}x{f}",
            a.rows(),
            a.cols()
        )));
    }
    Ok(())
}

fn widen(ev: &SlotMachine, a: &PackedMatrix, width: usize) -> Result<SlotVector> {
    let needed = a.rows() * width;
    if needed > ev.slot_count() {
        return Err(Error::Overflow {
            needed,
            available: ev.slot_count(),
        });
    }
    restride(ev, a.vec(), a.rows(), a.cols(), a.cols(), width)
}

fn accumulate(
    ev: &SlotMachine,
    n: usize,
    width: usize,
    m: usize,
    m_padded: usize,
    product: impl Fn(usize) -> Result<SlotVector> + Sync,
) -> Result<PackedMatrix> {
    let slots = ev.slot_count();
    let terms = (0..m_padded)
        .into_par_iter()
        .map(|k| {
            let p = PackedMatrix::from_parts(product(k)?, n, width, 0)?;
            let sums = sum_col_vec(ev, &p)?;
            let mut select = vec![0.0; slots];
            for i in 0..n {
                let j = (i + k) % m_padded;
                if j < m {
                    select[i * width + j] = 1.0;
                }
            }
            ev.cmul(sums.vec(), &select)
        })
        .collect::<Result<Vec<_>>>()?;
    let acc = ev.add_many(&terms)?;
    let out = restride(ev, &acc, n, m, width, m)?;
    PackedMatrix::from_parts(out, n, m, 0)
}

/// Closed-form rotation count of [`he_matmul`] for an `n x f` by `f x m`
/// product on `slot_count` slots (encrypted right operand).
///
/// With `w = max(f, m')` (`m'` = padded `m`):
/// widening `n-1` if `w > f`, plus `m'-1` row-shifter moves (1 rotation if the
/// pack fills every slot, else 2), plus `m' * 2*(floor(log2 w) + popcount(w) - 1)`
/// for the row summations, plus compaction `n-1` if `w > m`.
pub fn matmul_rotations(n: usize, f: usize, m: usize, slot_count: usize) -> Option<u64> {
    let mp = padded_columns(m, n)?;
    let w = f.max(mp);
    let moves = |from: usize, to: usize| {
        if from != to && n > 1 {
            (n - 1) as u64
        } else {
            0
        }
    };
    let shift_cost = if n * w == slot_count { 1 } else { 2 };
    let shifts = if n > 1 {
        (mp as u64 - 1) * shift_cost
    } else {
        0
    };
    Some(moves(f, w) + shifts + mp as u64 * packing::sum_col_vec_rotations(w) + moves(w, m))
}

/// Textbook triple-loop product, used as the reference.
pub fn plain_matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.rows() {
        return Err(shape(format!(
            "cannot multiply {}x{} by {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let mut c = Matrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut s = 0.0;
            for k in 0..a.cols() {
                s += a[(i, k)] * b[(k, j)];
            }
            c[(i, j)] = s;
        }
    }
    Ok(c)
}

/// A dense layer `X * W^T + bias` where the activations `X` (`n x in`) are
/// supplied as a list of column blocks, each in its own slot vector.
///
/// Output columns are split into chunks of at most `n` so the cyclic
/// extension always fits; the result is one packed matrix per chunk.
pub fn dense_layer(
    ev: &SlotMachine,
    blocks: &[PackedMatrix],
    weights: &Matrix,
    bias: &[f64],
    mode: WeightMode,
) -> Result<Vec<PackedMatrix>> {
    let Some(first) = blocks.first() else {
        return Err(shape("dense layer needs at least one input block"));
    };
    let n = first.rows();
    let in_total: usize = blocks.iter().map(|b| b.cols()).sum();
    if blocks.iter().any(|b| b.rows() != n) || in_total != weights.cols() {
        return Err(shape(format!(
            "input blocks ({} columns total) do not match weights {}x{}",
            in_total,
            weights.rows(),
            weights.cols()
        )));
    }
    let out = weights.rows();
    if bias.len() != out {
        return Err(shape(format!("{} biases for {out} outputs", bias.len())));
    }
    let chunk = out.min(n);
    let mut results = Vec::new();
    for start in (0..out).step_by(chunk) {
        let end = (start + chunk).min(out);
        let w_chunk = Matrix::from_fn(end - start, in_total, |i, j| weights[(start + i, j)]);
        let mut col = 0;
        let mut acc: Option<SlotVector> = None;
        for block in blocks {
            let b = w_chunk.column_block(col, col + block.cols()).transpose();
            col += block.cols();
            let part = he_matmul_with(ev, block, &b, mode)?;
            acc = Some(match acc {
                None => part.vec().clone(),
                Some(prev) => ev.add(&prev, part.vec())?,
            });
        }
        let width = end - start;
        let mut bias_slots = Vec::with_capacity(n * width);
        for _ in 0..n {
            bias_slots.extend_from_slice(&bias[start..end]);
        }
        let biased = ev.add(&acc.expect("at least one block"), &ev.encode(&bias_slots)?)?;
        results.push(PackedMatrix::from_parts(biased, n, width, 0)?);
    }
    Ok(results)
}
