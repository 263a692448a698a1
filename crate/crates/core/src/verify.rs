//! Randomised self-checks of every packed procedure against plain oracles.
//! Backs the `verify` subcommand.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

use crate::conv::{
    decode_map, he_conv2d, pack_images, plain_conv2d, reconstruct_representation,
    reconstruction_budget, ConvSpec,
};
use crate::error::{Error, Result};
use crate::linalg::{he_matmul, matmul_rotations, pack_transposed, plain_matmul};
use crate::matrix::Matrix;
use crate::packing::{pack_matrix, sum_col_vec, sum_for_conv, sum_row_vec};
use crate::quadgrad::{
    dominance_check, gradient, log_likelihood, one_hot, softmax_probs, DEFAULT_EPSILON,
};
use crate::simd::SlotMachine;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Packing,
    Matmul,
    Conv,
    Quadgrad,
    All,
}

impl Suite {
    pub fn name(self) -> &'static str {
        match self {
            Suite::Packing => "packing",
            Suite::Matmul => "matmul",
            Suite::Conv => "conv",
            Suite::Quadgrad => "quadgrad",
            Suite::All => "all",
        }
    }
}

impl std::str::FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "packing" => Suite::Packing,
            "matmul" => Suite::Matmul,
            "conv" => Suite::Conv,
            "quadgrad" => Suite::Quadgrad,
            "all" => Suite::All,
            other => return Err(Error::InvalidArgument(format!("unknown suite {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: String,
    pub cases: usize,
    pub failures: usize,
    pub worst_err: f64,
}

#[derive(Debug, Clone)]
pub struct VerifyConfig {
    pub slots: usize,
    pub seed: u64,
    pub tolerance: f64,
    /// Corrupts the first case so the harness itself can be tested.
    pub inject_fault: bool,
}

struct Tally {
    cases: usize,
    failures: usize,
    worst: f64,
    fault: bool,
}

impl Tally {
    /// `err` is compared to `tol`; `ok` carries any exact-count checks.
    fn record(&mut self, mut err: f64, tol: f64, ok: bool) {
        if self.fault {
            err += 1.0;
            self.fault = false;
        }
        self.cases += 1;
        self.worst = self.worst.max(err);
        if err > tol || err.is_nan() || !ok {
            self.failures += 1;
        }
    }
}

pub fn run_suite(suite: Suite, cfg: &VerifyConfig) -> Result<SuiteReport> {
    let ev = SlotMachine::new(cfg.slots)?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut t = Tally {
        cases: 0,
        failures: 0,
        worst: 0.0,
        fault: cfg.inject_fault,
    };
    let parts: &[Suite] = match suite {
        Suite::All => &[Suite::Packing, Suite::Matmul, Suite::Conv, Suite::Quadgrad],
        _ => std::slice::from_ref(&suite),
    };
    for part in parts {
        match part {
            Suite::Packing => packing(&ev, &mut rng, cfg.tolerance, &mut t)?,
            Suite::Matmul => matmul(&ev, &mut rng, cfg.tolerance, &mut t)?,
            Suite::Conv => conv(&ev, &mut rng, cfg.tolerance, &mut t)?,
            Suite::Quadgrad => quadgrad(&mut rng, &mut t)?,
            Suite::All => unreachable!(),
        }
    }
    Ok(SuiteReport {
        suite: suite.name().to_string(),
        cases: t.cases,
        failures: t.failures,
        worst_err: t.worst,
    })
}

fn random(rows: usize, cols: usize, rng: &mut ChaCha20Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..=1.0))
}

fn packing(ev: &SlotMachine, rng: &mut ChaCha20Rng, tol: f64, t: &mut Tally) -> Result<()> {
    for _ in 0..40 {
        let rows = rng.gen_range(1..=8);
        let cols = rng.gen_range(1..=8);
        let z = random(rows, cols, rng);
        let p = pack_matrix(ev, &z)?;
        let col_sums: Vec<f64> = (0..cols)
            .map(|j| (0..rows).map(|i| z[(i, j)]).sum())
            .collect();
        let got = sum_row_vec(ev, &p)?.decode(ev)?;
        let err = (0..rows * cols).fold(0.0f64, |e, s| {
            e.max((got.as_slice()[s] - col_sums[s % cols]).abs())
        });
        t.record(err, tol, true);

        let got = sum_col_vec(ev, &p)?.decode(ev)?;
        let err = (0..rows).fold(0.0f64, |e, i| {
            let s: f64 = z.row(i).iter().sum();
            got.row(i).iter().fold(e, |e, v| e.max((v - s).abs()))
        });
        t.record(err, tol, true);

        let kh = rng.gen_range(1..=rows.min(3));
        let kw = rng.gen_range(1..=cols.min(3));
        let before = ev.report();
        let got = sum_for_conv(ev, &p, kh, kw)?.decode(ev)?;
        let rots = ev.report().since(&before).rotations;
        let mut err = 0.0f64;
        for i in 0..rows {
            for j in 0..cols {
                let want = if i + kh <= rows && j + kw <= cols {
                    (0..kh)
                        .flat_map(|a| (0..kw).map(move |b| (a, b)))
                        .map(|(a, b)| z[(i + a, j + b)])
                        .sum()
                } else {
                    0.0
                };
                err = err.max((got[(i, j)] - want).abs());
            }
        }
        t.record(err, tol, rots == ((kh - 1) + (kw - 1)) as u64);
    }
    Ok(())
}

fn matmul(ev: &SlotMachine, rng: &mut ChaCha20Rng, tol: f64, t: &mut Tally) -> Result<()> {
    const SIZES: [usize; 5] = [1, 2, 4, 8, 16];
    for _ in 0..40 {
        let n = SIZES[rng.gen_range(0..5)];
        let f = SIZES[rng.gen_range(0..5)];
        let divisors: Vec<usize> = (1..=n).filter(|m| n.is_multiple_of(*m)).collect();
        let m = divisors[rng.gen_range(0..divisors.len())];
        let a = random(n, f, rng);
        let b = random(f, m, rng);
        let before = ev.report();
        let tp = pack_transposed(ev, &b, n)?;
        let got = he_matmul(ev, &pack_matrix(ev, &a)?, &tp)?.decode(ev)?;
        let used = ev.report().since(&before);
        let err = got.max_abs_diff(&plain_matmul(&a, &b)?)?;
        let counts = used.cipher_mults == m as u64
            && Some(used.rotations) == matmul_rotations(n, f, m, ev.slot_count());
        t.record(err, tol, counts);
    }
    Ok(())
}

fn conv(ev: &SlotMachine, rng: &mut ChaCha20Rng, tol: f64, t: &mut Tally) -> Result<()> {
    for _ in 0..12 {
        let h = rng.gen_range(3..=10);
        let w = rng.gen_range(3..=10);
        let kh = rng.gen_range(2..=3);
        let kw = rng.gen_range(2..=3);
        let batch = rng.gen_range(1..=3);
        let kernels = (0..rng.gen_range(1..=3))
            .map(|_| random(kh, kw, rng))
            .collect();
        let spec = ConvSpec::new(h, w, batch, kernels, vec![])?;
        if batch * h * w > ev.slot_count() {
            continue;
        }
        let images: Vec<Matrix> = (0..batch).map(|_| random(h, w, rng)).collect();
        let out = he_conv2d(ev, &pack_images(ev, &images)?, &spec)?;
        let want = plain_conv2d(&images, &spec)?;
        let mut err = 0.0f64;
        for (k, map) in out.iter().enumerate() {
            for (b, maps) in want.iter().enumerate() {
                err = err.max(decode_map(ev, map, &spec, b)?.max_abs_diff(&maps[k])?);
            }
        }
        t.record(err, tol, true);

        let before = ev.report();
        let flat = reconstruct_representation(ev, &out, &spec)?.decode(ev)?;
        let rots = ev.report().since(&before).rotations;
        let mut err = 0.0f64;
        for (b, maps) in want.iter().enumerate() {
            let row: Vec<f64> = maps.iter().flat_map(|m| m.as_slice().to_vec()).collect();
            err = flat
                .row(b)
                .iter()
                .zip(&row)
                .fold(err, |e, (x, y)| e.max((x - y).abs()));
        }
        t.record(err, tol, rots <= reconstruction_budget(&spec, out.len()));
    }
    Ok(())
}

fn quadgrad(rng: &mut ChaCha20Rng, t: &mut Tally) -> Result<()> {
    for _ in 0..20 {
        let n = rng.gen_range(2..=12);
        let d = rng.gen_range(1..=4);
        let c = rng.gen_range(2..=3);
        let x = Matrix::from_fn(n, d + 1, |_, j| {
            if j == 0 {
                1.0
            } else {
                rng.gen_range(0.0..=1.0)
            }
        });
        let y: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
        let yh = one_hot(&y, c)?;
        let w = random(c, d + 1, rng);
        let g = gradient(&x, &yh, &softmax_probs(&x, &w)?)?;
        let step = 1e-5;
        let mut worst = 0.0f64;
        for k in 0..c {
            for j in 0..=d {
                let mut up = w.clone();
                up[(k, j)] += step;
                let mut down = w.clone();
                down[(k, j)] -= step;
                let fd = (log_likelihood(&x, &yh, &up)? - log_likelihood(&x, &yh, &down)?)
                    / (2.0 * step);
                worst = worst.max((fd - g[(k, j)]).abs() / fd.abs().max(g[(k, j)].abs()).max(1e-3));
            }
        }
        t.record(worst, 1e-5, true);
        let (min, ok) =
            dominance_check(&x, &random(c, d + 1, rng).map(|v| 5.0 * v), DEFAULT_EPSILON)?;
        t.record((-min).max(0.0), 1e-8, ok);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(fault: bool) -> VerifyConfig {
        VerifyConfig {
            slots: 1 << 12,
            seed: 42,
            tolerance: 1e-9,
            inject_fault: fault,
        }
    }

    #[test]
    fn suites_pass() {
        for s in [Suite::Packing, Suite::Matmul, Suite::Conv, Suite::Quadgrad] {
            let r = run_suite(s, &cfg(false)).unwrap();
            assert_eq!(r.failures, 0, "{r:?}");
            assert!(r.cases > 0);
        }
    }

    #[test]
    fn all_is_union() {
        let all = run_suite(Suite::All, &cfg(false)).unwrap();
        let parts: usize = [Suite::Packing, Suite::Matmul, Suite::Conv, Suite::Quadgrad]
            .iter()
            .map(|&s| run_suite(s, &cfg(false)).unwrap().cases)
            .sum();
        assert_eq!(all.suite, "all");
        assert_eq!(all.cases, parts);
    }

    #[test]
    fn fault_is_reported() {
        let r = run_suite(Suite::Packing, &cfg(true)).unwrap();
        assert_eq!(r.failures, 1);
        assert!(r.worst_err >= 1.0);
    }

    #[test]
    fn suite_names_parse() {
        assert_eq!("conv".parse::<Suite>().unwrap(), Suite::Conv);
        assert!("bogus".parse::<Suite>().is_err());
    }
}
