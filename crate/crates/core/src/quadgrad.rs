//! Multiclass logistic regression trained with the quadratic gradient.
//!
//! The Hessian of the log-likelihood is bounded by a fixed diagonal built
//! from `-X^T X / 2`: column `j` of that matrix, in absolute value, summed.
//! Scaling the gradient entry-wise by its reciprocal gives the quadratic
//! gradient `G`, which the NAG and Adagrad variants below step along.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;

use crate::error::{shape, Error, Result};
use crate::matrix::Matrix;

pub const DEFAULT_EPSILON: f64 = 1e-8;

/// Records with a leading ones column, features in [0, 1], labels `0..c`.
#[derive(Debug, Clone, PartialEq)]
pub struct LrDataset {
    x: Matrix,
    y: Vec<usize>,
    classes: usize,
}

impl LrDataset {
    pub fn new(x: Matrix, y: Vec<usize>, classes: usize) -> Result<Self> {
        if x.rows() != y.len() || x.cols() == 0 {
            return Err(shape(format!(
                "{} labels for {}x{} records",
                y.len(),
                x.rows(),
                x.cols()
            )));
        }
        if classes == 0 {
            return Err(shape("need at least one class"));
        }
        if let Some(&bad) = y.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange {
                label: bad as i64,
                classes,
            });
        }
        for i in 0..x.rows() {
            let row = x.row(i);
            if row[0] != 1.0 || row[1..].iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::InvalidArgument(format!(
                    "record {i} needs a leading 1 and features in [0, 1]"
                )));
            }
        }
        Ok(Self { x, y, classes })
    }

    pub fn x(&self) -> &Matrix {
        &self.x
    }

    pub fn y(&self) -> &[usize] {
        &self.y
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn n(&self) -> usize {
        self.x.rows()
    }

    /// Feature count, not counting the ones column.
    pub fn d(&self) -> usize {
        self.x.cols() - 1
    }

    pub fn one_hot(&self) -> Matrix {
        one_hot(&self.y, self.classes).expect("labels validated on construction")
    }
}

pub fn one_hot(y: &[usize], classes: usize) -> Result<Matrix> {
    let mut out = Matrix::zeros(y.len(), classes);
    for (i, &l) in y.iter().enumerate() {
        if l >= classes {
            return Err(Error::LabelOutOfRange {
                label: l as i64,
                classes,
            });
        }
        out[(i, l)] = 1.0;
    }
    Ok(out)
}

fn logits(x: &Matrix, w: &Matrix) -> Result<Matrix> {
    if x.cols() != w.cols() {
        return Err(shape(format!(
            "records have {} columns, weights {}x{}",
            x.cols(),
            w.rows(),
            w.cols()
        )));
    }
    x.matmul(&w.transpose())
}

/// Row-wise softmax of `X W^T`, shifted by the row maximum.
pub fn softmax_probs(x: &Matrix, w: &Matrix) -> Result<Matrix> {
    let mut z = logits(x, w)?;
    for i in 0..z.rows() {
        let row = z.row_mut(i);
        let top = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - top).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(z)
}

/// `sum_i (z_{i,y_i} - logsumexp(z_i))`.
pub fn log_likelihood(x: &Matrix, yh: &Matrix, w: &Matrix) -> Result<f64> {
    let z = logits(x, w)?;
    if yh.shape() != z.shape() {
        return Err(shape(format!(
            "labels {:?}, logits {:?}",
            yh.shape(),
            z.shape()
        )));
    }
    let mut total = 0.0;
    for i in 0..z.rows() {
        let row = z.row(i);
        let top = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = top + row.iter().map(|v| (v - top).exp()).sum::<f64>().ln();
        total += row
            .iter()
            .zip(yh.row(i))
            .map(|(z, y)| y * (z - lse))
            .sum::<f64>();
    }
    Ok(total)
}

/// `(Yh - P)^T X`, shape `c x (1+d)`.
pub fn gradient(x: &Matrix, yh: &Matrix, p: &Matrix) -> Result<Matrix> {
    if yh.shape() != p.shape() || p.rows() != x.rows() {
        return Err(shape(format!(
            "records {:?}, labels {:?}, probabilities {:?}",
            x.shape(),
            yh.shape(),
            p.shape()
        )));
    }
    yh.zip_map(p, |a, b| a - b)?.transpose().matmul(x)
}

/// Diagonal bound before taking reciprocals: `eps + sum_i |(-X^T X / 2)[i][j]|`
/// for each column `j`.
pub fn bbar_row(x: &Matrix, epsilon: f64) -> Vec<f64> {
    let h = x
        .transpose()
        .matmul(x)
        .expect("X^T X is square")
        .map(|v| -0.5 * v);
    (0..h.cols())
        .map(|j| (0..h.rows()).fold(epsilon, |acc, i| acc + h[(i, j)].abs()))
        .collect()
}

/// `c x (1+d)` reciprocals of the bound; all rows equal.
pub fn build_bbar_inv(x: &Matrix, classes: usize, epsilon: f64) -> Matrix {
    let row = bbar_row(x, epsilon);
    Matrix::from_fn(classes, row.len(), |_, j| 1.0 / row[j])
}

pub fn quadratic_gradient(g: &Matrix, bbar_inv: &Matrix) -> Result<Matrix> {
    bbar_inv.zip_map(g, |b, g| b * g)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceEntry {
    pub iter: usize,
    pub loglik: f64,
    pub grad_maxnorm: f64,
}

/// Working state of either trainer. `v`, `alpha0` and `alpha1` drive NAG;
/// `gt` accumulates squared steps for Adagrad.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub w: Matrix,
    pub v: Matrix,
    pub bbar_inv: Matrix,
    pub gt: Matrix,
    pub alpha0: f64,
    pub alpha1: f64,
    pub epsilon: f64,
}

impl TrainState {
    pub fn new(ds: &LrDataset, epsilon: f64) -> Self {
        let zeros = Matrix::zeros(ds.classes(), ds.d() + 1);
        let alpha0 = 0.01;
        Self {
            w: zeros.clone(),
            v: zeros.clone(),
            bbar_inv: build_bbar_inv(ds.x(), ds.classes(), epsilon),
            gt: zeros,
            alpha0,
            alpha1: next_alpha(alpha0),
            epsilon,
        }
    }
}

pub fn next_alpha(alpha0: f64) -> f64 {
    0.5 * (1.0 + (1.0 + 4.0 * alpha0 * alpha0).sqrt())
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub weights: Matrix,
    /// Entry 0 is the starting point `W = 0`, entry `k` follows iteration `k`.
    pub trace: Vec<TraceEntry>,
}

fn observe(ds: &LrDataset, yh: &Matrix, w: &Matrix, iter: usize) -> Result<TraceEntry> {
    let p = softmax_probs(ds.x(), w)?;
    Ok(TraceEntry {
        iter,
        loglik: log_likelihood(ds.x(), yh, w)?,
        grad_maxnorm: gradient(ds.x(), yh, &p)?.max_abs(),
    })
}

fn check_iters(kappa: usize) -> Result<()> {
    if kappa == 0 {
        return Err(Error::InvalidArgument(
            "at least one iteration is required".into(),
        ));
    }
    Ok(())
}

/// Nesterov-accelerated ascent along the quadratic gradient.
pub fn train_nag(ds: &LrDataset, kappa: usize, epsilon: f64) -> Result<TrainOutput> {
    check_iters(kappa)?;
    let yh = ds.one_hot();
    let n = ds.n() as f64;
    let mut st = TrainState::new(ds, epsilon);
    let mut trace = vec![observe(ds, &yh, &st.w, 0)?];
    for count in 1..=kappa {
        let p = softmax_probs(ds.x(), &st.v)?;
        let g = gradient(ds.x(), &yh, &p)?;
        let big_g = quadratic_gradient(&g, &st.bbar_inv)?;
        let eta = (1.0 - st.alpha0) / st.alpha1;
        let gamma = 1.0 / (n * count as f64);
        let w_temp = st.w.zip_map(&big_g, |w, g| w + (1.0 + gamma) * g)?;
        st.w = w_temp.zip_map(&st.v, |t, v| (1.0 - eta) * t + eta * v)?;
        st.v = w_temp;
        st.alpha0 = st.alpha1;
        st.alpha1 = next_alpha(st.alpha0);
        trace.push(observe(ds, &yh, &st.w, count)?);
    }
    Ok(TrainOutput {
        weights: st.w,
        trace,
    })
}

/// Adagrad along the quadratic gradient with step constant 1.01.
/// `epsilon` regularises the bound, `ada_epsilon` the step denominator.
pub fn train_adagrad(
    ds: &LrDataset,
    kappa: usize,
    epsilon: f64,
    ada_epsilon: f64,
) -> Result<TrainOutput> {
    check_iters(kappa)?;
    let yh = ds.one_hot();
    let mut st = TrainState::new(ds, epsilon);
    let mut trace = vec![observe(ds, &yh, &st.w, 0)?];
    for count in 1..=kappa {
        let p = softmax_probs(ds.x(), &st.w)?;
        let g = gradient(ds.x(), &yh, &p)?;
        let big_g = quadratic_gradient(&g, &st.bbar_inv)?;
        st.gt = st.gt.zip_map(&big_g, |acc, g| acc + g * g)?;
        let gamma = st.gt.map(|acc| 1.01 / (ada_epsilon + acc).sqrt());
        let step = gamma.zip_map(&big_g, |r, g| r * g)?;
        st.w = st.w.zip_map(&step, |w, s| w + s)?;
        trace.push(observe(ds, &yh, &st.w, count)?);
    }
    Ok(TrainOutput {
        weights: st.w,
        trace,
    })
}

/// Plain fixed-Hessian ascent `W <- W + Bbar^-1 (.) g`; returns the
/// log-likelihood before and after each step.
pub fn fixed_hessian_ascent(ds: &LrDataset, iters: usize, epsilon: f64) -> Result<Vec<f64>> {
    let yh = ds.one_hot();
    let bbar_inv = build_bbar_inv(ds.x(), ds.classes(), epsilon);
    let mut w = Matrix::zeros(ds.classes(), ds.d() + 1);
    let mut out = vec![log_likelihood(ds.x(), &yh, &w)?];
    for _ in 0..iters {
        let g = gradient(ds.x(), &yh, &softmax_probs(ds.x(), &w)?)?;
        w = w.zip_map(&quadratic_gradient(&g, &bbar_inv)?, |w, s| w + s)?;
        out.push(log_likelihood(ds.x(), &yh, &w)?);
    }
    Ok(out)
}

/// Hessian of the log-likelihood with respect to the row-major flattening
/// of `W`: `sum_i M_i (x) x_i^T x_i` with `M_i = p_i p_i^T - diag(p_i)`.
pub fn exact_hessian(x: &Matrix, p: &Matrix) -> Result<Matrix> {
    if x.rows() != p.rows() {
        return Err(shape(format!(
            "{} records, {} probability rows",
            x.rows(),
            p.rows()
        )));
    }
    let (c, dim) = (p.cols(), x.cols());
    let mut h = Matrix::zeros(c * dim, c * dim);
    for i in 0..x.rows() {
        let (xi, pi) = (x.row(i), p.row(i));
        for j in 0..c {
            for k in 0..c {
                let m = if j == k {
                    pi[j] * (pi[j] - 1.0)
                } else {
                    pi[j] * pi[k]
                };
                for a in 0..dim {
                    for b in 0..dim {
                        h[(j * dim + a, k * dim + b)] += m * (xi[a] * xi[b]);
                    }
                }
            }
        }
    }
    Ok(h)
}

/// Smallest eigenvalue of `diag(Bbar) + H` at `W`; passes when it is at
/// least `-1e-8`.
pub fn dominance_check(x: &Matrix, w: &Matrix, epsilon: f64) -> Result<(f64, bool)> {
    let p = softmax_probs(x, w)?;
    let h = exact_hessian(x, &p)?;
    let row = bbar_row(x, epsilon);
    let dim = h.rows();
    let full = DMatrix::from_fn(dim, dim, |r, c| {
        h[(r, c)] + if r == c { row[r % row.len()] } else { 0.0 }
    });
    let min = SymmetricEigen::new(full)
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    Ok((min, min >= -1e-8))
}
