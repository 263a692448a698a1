//! Acceptance gate: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use volley::conv::{
    decode_map, he_conv2d, pack_images, plain_conv2d, reconstruct_representation,
    reconstruction_budget, ConvSpec,
};
use volley::libsvm::{iris, wine};
use volley::linalg::WeightMode;
use volley::linalg::{he_matmul, pack_transposed, plain_matmul};
use volley::matrix::Matrix;
use volley::network::{
    argmax_rows, he_forward, plaintext_forward, poly_activate, Architecture, Batch, CnnModel,
    ACT1_PRESET, ACT2_PRESET, HE_FORWARD_CIPHER_MULTS,
};
use volley::packing::{pack_matrix, sum_for_conv, PackedMatrix};
use volley::quadgrad::{
    dominance_check, exact_hessian, fixed_hessian_ascent, gradient, log_likelihood, one_hot,
    softmax_probs, train_adagrad, train_nag, LrDataset, DEFAULT_EPSILON,
};
use volley::simd::{SlotMachine, DEFAULT_SLOTS};

const MATMUL_TOL: f64 = 1e-9;
const MATMUL_SECONDS: f64 = 10.0;
const WINDOW_TOL: f64 = 1e-12;
const CONV_TOL: f64 = 1e-9;
const CNN_TOL: f64 = 1e-6;
const GRAD_REL_TOL: f64 = 1e-5;
const HESS_REL_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;
const EIG_FLOOR: f64 = -1e-8;
const ASCENT_SLACK: f64 = 1e-9;

type Outcome = Result<String, String>;
type Criterion<'a> = (usize, &'static str, Box<dyn Fn() -> Outcome + 'a>);

fn uniform(rows: usize, cols: usize, rng: &mut ChaCha20Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..=1.0))
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

struct MatmulRun {
    worst: f64,
    seconds: f64,
    mult_mismatches: Vec<String>,
}

fn matmul_instances() -> MatmulRun {
    const SIZES: [usize; 5] = [1, 2, 4, 8, 16];
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let ev = SlotMachine::new(DEFAULT_SLOTS).unwrap();
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut mult_mismatches = Vec::new();
    for case in 0..200 {
        let n = SIZES[rng.gen_range(0..5)];
        let f = SIZES[rng.gen_range(0..5)];
        let divisors: Vec<usize> = (1..=n).filter(|m| n.is_multiple_of(*m)).collect();
        let m = divisors[rng.gen_range(0..divisors.len())];
        let a = uniform(n, f, &mut rng);
        let b = uniform(f, m, &mut rng);
        let before = ev.report();
        let t = pack_transposed(&ev, &b, n).unwrap();
        let got = he_matmul(&ev, &pack_matrix(&ev, &a).unwrap(), &t)
            .unwrap()
            .decode(&ev)
            .unwrap();
        let used = ev.report().since(&before);
        worst = worst.max(got.max_abs_diff(&plain_matmul(&a, &b).unwrap()).unwrap());
        if used.cipher_mults != m as u64 {
            mult_mismatches.push(format!(
                "case {case}: n={n} f={f} m={m} used {}",
                used.cipher_mults
            ));
        }
    }
    MatmulRun {
        worst,
        seconds: start.elapsed().as_secs_f64(),
        mult_mismatches,
    }
}

fn criterion_1(run: &MatmulRun) -> Outcome {
    check(
        run.worst <= MATMUL_TOL && run.seconds <= MATMUL_SECONDS,
        format!(
            "200 products, max abs err {:.3e} (tol {MATMUL_TOL:e}), {:.2}s (limit {MATMUL_SECONDS}s)",
            run.worst, run.seconds
        ),
    )
}

fn criterion_2(run: &MatmulRun) -> Outcome {
    check(
        run.mult_mismatches.is_empty(),
        if run.mult_mismatches.is_empty() {
            "cipher_mults == m on all 200 products".to_string()
        } else {
            run.mult_mismatches.join("; ")
        },
    )
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let ev = SlotMachine::new(128).unwrap();
    let (mut cases, mut worst) = (0, 0.0f64);
    let mut problems = Vec::new();
    for rows in 1..=8 {
        for cols in 1..=8 {
            for (kh, kw) in [(2, 2), (2, 3), (3, 2), (3, 3)] {
                if kh > rows || kw > cols {
                    continue;
                }
                cases += 1;
                let z = uniform(rows, cols, &mut rng);
                let p = pack_matrix(&ev, &z).unwrap();
                let before = ev.report();
                let out = sum_for_conv(&ev, &p, kh, kw).unwrap();
                let rots = ev.report().since(&before).rotations;
                if rots != ((kh - 1) + (kw - 1)) as u64 {
                    problems.push(format!("{rows}x{cols} k{kh}x{kw}: {rots} rotations"));
                }
                let slots = ev.decode(out.vec(), ev.slot_count()).unwrap();
                for (s, &v) in slots.iter().enumerate() {
                    let (i, j) = (s / cols, s % cols);
                    if s < rows * cols && i + kh <= rows && j + kw <= cols {
                        let mut want = 0.0;
                        for a in 0..kh {
                            for b in 0..kw {
                                want += z[(i + a, j + b)];
                            }
                        }
                        worst = worst.max((v - want).abs());
                    } else if v != 0.0 {
                        problems.push(format!("{rows}x{cols} k{kh}x{kw}: garbage slot {s} = {v}"));
                    }
                }
            }
        }
    }
    check(
        worst <= WINDOW_TOL && problems.is_empty(),
        format!(
            "{cases} shapes, max abs err {worst:.3e} (tol {WINDOW_TOL:e}), garbage exact zero and rotations (kh-1)+(kw-1){}",
            if problems.is_empty() { String::new() } else { format!("; {}", problems.join("; ")) }
        ),
    )
}

fn conv_error(ev: &SlotMachine, images: &[Matrix], spec: &ConvSpec) -> f64 {
    let out = he_conv2d(ev, &pack_images(ev, images).unwrap(), spec).unwrap();
    let want = plain_conv2d(images, spec).unwrap();
    let mut worst = 0.0f64;
    for (k, map) in out.iter().enumerate() {
        for (b, per_image) in want.iter().enumerate() {
            worst = worst.max(
                decode_map(ev, map, spec, b)
                    .unwrap()
                    .max_abs_diff(&per_image[k])
                    .unwrap(),
            );
        }
    }
    worst
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(4);
    let ev = SlotMachine::new(DEFAULT_SLOTS).unwrap();
    let kernels = (0..4).map(|_| uniform(3, 3, &mut rng)).collect();
    let table = ConvSpec::new(28, 28, 32, kernels, vec![]).unwrap();
    let images: Vec<Matrix> = (0..32)
        .map(|_| Matrix::from_fn(28, 28, |_, _| rng.gen_range(0.0..=1.0)))
        .collect();
    let mut worst = conv_error(&ev, &images, &table);
    for _ in 1..50 {
        let h = rng.gen_range(3..=16);
        let w = rng.gen_range(3..=16);
        let kh = rng.gen_range(1..=h.min(5));
        let kw = rng.gen_range(1..=w.min(5));
        let batch = rng.gen_range(1..=4);
        let kernels = (0..rng.gen_range(1..=4))
            .map(|_| uniform(kh, kw, &mut rng))
            .collect();
        let biases = (0..4)
            .map(|_| rng.gen_range(-1.0..=1.0))
            .collect::<Vec<_>>();
        let mut spec = ConvSpec::new(h, w, batch, kernels, vec![]).unwrap();
        spec.biases = biases[..spec.kernels.len()].to_vec();
        let images: Vec<Matrix> = (0..batch).map(|_| uniform(h, w, &mut rng)).collect();
        worst = worst.max(conv_error(&ev, &images, &spec));
    }
    let width = table.output_width();
    check(
        worst <= CONV_TOL && width == 2704,
        format!("50 convolutions incl. 28x28/3x3/batch 32, max abs err {worst:.3e} (tol {CONV_TOL:e}), flattened width {width}"),
    )
}

fn reconstruction_case(
    ev: &SlotMachine,
    spec: &ConvSpec,
    per_map: bool,
    rng: &mut ChaCha20Rng,
) -> (u64, u64, f64) {
    let images: Vec<Matrix> = (0..spec.batch)
        .map(|_| uniform(spec.h, spec.w, rng))
        .collect();
    let out = he_conv2d(ev, &pack_images(ev, &images).unwrap(), spec).unwrap();
    let want = plain_conv2d(&images, spec).unwrap();
    let groups: Vec<Vec<PackedMatrix>> = if per_map {
        out.iter().map(|m| vec![m.clone()]).collect()
    } else {
        vec![out.clone()]
    };
    let (mut used, mut budget, mut worst) = (0, 0, 0.0f64);
    for (g, group) in groups.iter().enumerate() {
        let before = ev.report();
        let flat = reconstruct_representation(ev, group, spec)
            .unwrap()
            .decode(ev)
            .unwrap();
        used += ev.report().since(&before).rotations;
        budget += reconstruction_budget(spec, group.len());
        for (b, per_image) in want.iter().enumerate() {
            let maps: Vec<&Matrix> = if per_map {
                vec![&per_image[g]]
            } else {
                per_image.iter().collect()
            };
            let row: Vec<f64> = maps.iter().flat_map(|m| m.as_slice().to_vec()).collect();
            worst = flat
                .row(b)
                .iter()
                .zip(&row)
                .fold(worst, |e, (x, y)| e.max((x - y).abs()));
        }
    }
    (used, budget, worst)
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    let ev = SlotMachine::new(DEFAULT_SLOTS).unwrap();
    let ones = Matrix::from_fn(3, 3, |_, _| 1.0);
    let cases = [
        (
            "4x4/3x3 batch 1",
            ConvSpec::new(4, 4, 1, vec![ones.clone()], vec![]).unwrap(),
            false,
        ),
        (
            "28x28/3x3 4 maps batch 1",
            ConvSpec::new(
                28,
                28,
                1,
                (0..4).map(|_| uniform(3, 3, &mut rng)).collect(),
                vec![],
            )
            .unwrap(),
            false,
        ),
        (
            "28x28/3x3 4 maps batch 32, per map",
            ConvSpec::new(
                28,
                28,
                32,
                (0..4).map(|_| uniform(3, 3, &mut rng)).collect(),
                vec![],
            )
            .unwrap(),
            true,
        ),
    ];
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, spec, per_map) in &cases {
        let (used, budget, err) = reconstruction_case(&ev, spec, *per_map, &mut rng);
        let maps = spec.kernels.len() * spec.batch;
        ok &= used <= budget && err <= CONV_TOL;
        parts.push(format!(
            "{name}: {used} rotations for {maps} image maps (budget {budget} = {} per image map), err {err:.1e}",
            spec.out_h() + 1
        ));
    }
    check(ok, parts.join("; "))
}

fn criterion_6() -> Outcome {
    let arch = Architecture::default();
    let ev = SlotMachine::new(DEFAULT_SLOTS).unwrap();
    let (mut worst, mut agree, mut mults_ok) = (0.0f64, true, true);
    for seed in 0..20 {
        let model = CnnModel::random(arch, 1000 + seed).unwrap();
        let batch = Batch::random(&arch, 32, 2000 + seed);
        let out = he_forward(&ev, &batch, &model, WeightMode::Encrypted).unwrap();
        let plain = plaintext_forward(&batch, &model).unwrap();
        worst = worst.max(out.logits.max_abs_diff(&plain).unwrap());
        agree &= out.argmax() == argmax_rows(&plain);
        mults_ok &= out.ledger.cipher_mults == HE_FORWARD_CIPHER_MULTS;
    }
    check(
        worst <= CNN_TOL && agree,
        format!(
            "20 models x 32 images, max abs logit err {worst:.3e} (tol {CNN_TOL:e}), argmax agreement {}, {} cipher_mults per pass{}",
            if agree { "32/32 on every batch" } else { "BROKEN" },
            HE_FORWARD_CIPHER_MULTS,
            if mults_ok { "" } else { " (count drifted)" }
        ),
    )
}

fn criterion_7() -> Outcome {
    let ev = SlotMachine::new(DEFAULT_SLOTS).unwrap();
    let zeros =
        PackedMatrix::from_parts(ev.encode(&vec![0.0; 32 * 676]).unwrap(), 32, 676, 0).unwrap();
    let a1 = poly_activate(&ev, &zeros, &ACT1_PRESET)
        .unwrap()
        .decode(&ev)
        .unwrap();
    let a2 = poly_activate(&ev, &zeros, &ACT2_PRESET)
        .unwrap()
        .decode(&ev)
        .unwrap();
    let ok1 = a1.as_slice().iter().all(|&v| v == -0.00015120704);
    let ok2 = a2.as_slice().iter().all(|&v| v == -1.5650465);
    check(
        ok1 && ok2,
        format!(
            "act1(0) = {:?}, act2(0) = {:?} on every slot",
            a1[(0, 0)],
            a2[(0, 0)]
        ),
    )
}

fn random_dataset(rng: &mut ChaCha20Rng, max_n: usize, max_d: usize, max_c: usize) -> LrDataset {
    let n = rng.gen_range(1..=max_n);
    let d = rng.gen_range(1..=max_d);
    let c = rng.gen_range(1..=max_c);
    let x = Matrix::from_fn(n, d + 1, |_, j| {
        if j == 0 {
            1.0
        } else {
            rng.gen_range(0.0..=1.0)
        }
    });
    let y = (0..n).map(|_| rng.gen_range(0..c)).collect();
    LrDataset::new(x, y, c).unwrap()
}

/// Relative error in the max norm: `|fd - exact|_inf / |exact|_inf`.
fn norm_rel(fd: &[f64], exact: &[f64]) -> f64 {
    let diff = fd
        .iter()
        .zip(exact)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    let scale = exact.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn criterion_8() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(8);
    let (mut worst_g, mut worst_h) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let ds = {
            let mut ds = random_dataset(&mut rng, 12, 4, 3);
            while ds.classes() < 2 {
                ds = random_dataset(&mut rng, 12, 4, 3);
            }
            ds
        };
        let (c, dim) = (ds.classes(), ds.d() + 1);
        let x = ds.x();
        let yh = one_hot(ds.y(), c).unwrap();
        let w = uniform(c, dim, &mut rng);
        let grad_at = |w: &Matrix| gradient(x, &yh, &softmax_probs(x, w).unwrap()).unwrap();
        let g = grad_at(&w);
        let h = exact_hessian(x, &softmax_probs(x, &w).unwrap()).unwrap();
        let mut fd_g = Vec::new();
        let mut fd_h = Matrix::zeros(c * dim, c * dim);
        for l in 0..c {
            for m in 0..dim {
                let mut up = w.clone();
                up[(l, m)] += FD_STEP;
                let mut down = w.clone();
                down[(l, m)] -= FD_STEP;
                fd_g.push(
                    (log_likelihood(x, &yh, &up).unwrap() - log_likelihood(x, &yh, &down).unwrap())
                        / (2.0 * FD_STEP),
                );
                let (gu, gd) = (grad_at(&up), grad_at(&down));
                for k in 0..c {
                    for j in 0..dim {
                        fd_h[(k * dim + j, l * dim + m)] =
                            (gu[(k, j)] - gd[(k, j)]) / (2.0 * FD_STEP);
                    }
                }
            }
        }
        worst_g = worst_g.max(norm_rel(&fd_g, g.as_slice()));
        worst_h = worst_h.max(norm_rel(fd_h.as_slice(), h.as_slice()));
    }
    check(
        worst_g <= GRAD_REL_TOL && worst_h <= HESS_REL_TOL,
        format!(
            "50 instances, gradient rel err {worst_g:.3e} (tol {GRAD_REL_TOL:e}), Hessian rel err {worst_h:.3e} (tol {HESS_REL_TOL:e})"
        ),
    )
}

fn criterion_9() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(9);
    let mut lowest = f64::INFINITY;
    let mut all = true;
    for case in 0..100 {
        let ds = random_dataset(&mut rng, 20, 4, 3);
        let scale = if case % 2 == 0 { 0.0 } else { 5.0 };
        let w = Matrix::from_fn(ds.classes(), ds.d() + 1, |_, _| {
            rng.gen_range(-scale..=scale)
        });
        let (min, ok) = dominance_check(ds.x(), &w, DEFAULT_EPSILON).unwrap();
        lowest = lowest.min(min);
        all &= ok && min >= EIG_FLOOR;
    }
    check(
        all,
        format!("100 instances (W = 0 and W ~ U[-5,5]), smallest eigenvalue {lowest:.3e} (floor {EIG_FLOOR:e})"),
    )
}

fn criterion_10() -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for (name, ds) in [("iris", iris()), ("wine", wine())] {
        let trace = fixed_hessian_ascent(&ds, 50, DEFAULT_EPSILON).unwrap();
        let worst_drop = trace
            .windows(2)
            .map(|p| p[0] - p[1])
            .fold(f64::NEG_INFINITY, f64::max);
        ok &= worst_drop <= ASCENT_SLACK;
        parts.push(format!(
            "{name}: loglik {:.4} -> {:.4}, largest step decrease {worst_drop:.3e}",
            trace[0], trace[50]
        ));
    }
    check(ok, format!("{} (slack {ASCENT_SLACK:e})", parts.join("; ")))
}

fn criterion_11() -> Outcome {
    let ds = iris();
    let mut parts = Vec::new();
    let mut ok = true;
    let runs = [
        (
            "nag",
            train_nag(&ds, 200, DEFAULT_EPSILON).unwrap(),
            train_nag(&ds, 200, DEFAULT_EPSILON).unwrap(),
        ),
        (
            "adagrad",
            train_adagrad(&ds, 200, DEFAULT_EPSILON, DEFAULT_EPSILON).unwrap(),
            train_adagrad(&ds, 200, DEFAULT_EPSILON, DEFAULT_EPSILON).unwrap(),
        ),
    ];
    for (name, a, b) in &runs {
        let (first, last) = (a.trace[0], a.trace[a.trace.len() - 1]);
        let same = a.trace.len() == b.trace.len()
            && a.trace.iter().zip(&b.trace).all(|(x, y)| {
                x.loglik.to_bits() == y.loglik.to_bits()
                    && x.grad_maxnorm.to_bits() == y.grad_maxnorm.to_bits()
            });
        ok &= last.loglik > first.loglik && last.grad_maxnorm < first.grad_maxnorm && same;
        parts.push(format!(
            "{name}: loglik {:.4} -> {:.4}, grad max-norm {:.4} -> {:.4}, repeat run {}",
            first.loglik,
            last.loglik,
            first.grad_maxnorm,
            last.grad_maxnorm,
            if same { "bit-identical" } else { "DIFFERS" }
        ));
    }
    check(ok, parts.join("; "))
}

fn main() {
    let matmul = matmul_instances();
    let criteria: Vec<Criterion> = vec![
        (
            1,
            "matmul oracle equivalence",
            Box::new(|| criterion_1(&matmul)),
        ),
        (
            2,
            "matmul cipher_mults = m",
            Box::new(|| criterion_2(&matmul)),
        ),
        (3, "window sums for convolution", Box::new(criterion_3)),
        (4, "convolution", Box::new(criterion_4)),
        (5, "reconstruction rotation budget", Box::new(criterion_5)),
        (6, "end-to-end CNN", Box::new(criterion_6)),
        (7, "activation constants", Box::new(criterion_7)),
        (8, "gradient and Hessian", Box::new(criterion_8)),
        (9, "bound dominance", Box::new(criterion_9)),
        (10, "fixed-Hessian monotonicity", Box::new(criterion_10)),
        (11, "optimizer sanity", Box::new(criterion_11)),
    ];
    let mut failed = 0;
    for (id, name, run) in &criteria {
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(run))
            .unwrap_or_else(|_| Err("panicked".to_string()));
        match outcome {
            Ok(detail) => println!("PASS criterion {id:>2} ({name}): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {id:>2} ({name}): {detail}");
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
