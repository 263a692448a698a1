use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use volley::idx::{encode_idx_images, encode_idx_labels};
use volley::matrix::Matrix;
use volley::network::{save_model, Architecture, Batch, CnnModel};

fn volley(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_volley"))
        .current_dir(dir)
        .env_remove("VOLLEY_SLOTS")
        .args(args)
        .output()
        .expect("binary runs")
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!(
            "bad json ({e}): {}\nstderr: {}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        )
    })
}

fn write(dir: &Path, name: &str, m: &Matrix) -> String {
    let p = dir.join(name);
    m.write_csv(&p).unwrap();
    p.display().to_string()
}

#[test]
fn matmul_identity_and_random() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let b = Matrix::from_fn(4, 3, |i, j| (i * 3 + j) as f64 - 5.0);
    let a = write(d, "a.csv", &Matrix::identity(4));
    let bp = write(d, "b.csv", &b);
    let out = volley(d, &["matmul", "--a", &a, "--b", &bp, "--verify"]);
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    assert_eq!(v["max_abs_err"], 0.0);
    let result = Matrix::read_csv(d.join("result.csv")).unwrap();
    assert_eq!(result, b);

    let a = Matrix::from_fn(8, 5, |i, j| ((i * 7 + j * 3) % 11) as f64 / 11.0 - 0.5);
    let b = Matrix::from_fn(5, 4, |i, j| ((i * 5 + j * 2) % 7) as f64 / 7.0 - 0.5);
    let ap = write(d, "a8.csv", &a);
    let bp = write(d, "b5.csv", &b);
    let out = volley(
        d,
        &[
            "matmul", "--a", &ap, "--b", &bp, "--verify", "--result", "p.csv",
        ],
    );
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    assert!(v["max_abs_err"].as_f64().unwrap() <= 1e-9);
    assert_eq!(v["ledger"]["cipher_mults"], 4);
    assert_eq!(v["ledger"]["rotations"], v["rotations_closed_form"]);
    assert_eq!(v["result_path"], "p.csv");

    let out = volley(d, &["matmul", "--a", &ap, "--b", &ap]);
    assert_eq!(out.status.code(), Some(1));
    let out = volley(d, &["matmul", "--a", "missing.csv", "--b", &bp]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn matmul_wider_than_rows_and_plain_weights() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let a = Matrix::from_fn(2, 3, |i, j| (i + j) as f64);
    let b = Matrix::from_fn(3, 5, |i, j| (i * j) as f64 - 1.0);
    let ap = write(d, "a.csv", &a);
    let bp = write(d, "b.csv", &b);
    let out = volley(
        d,
        &[
            "matmul",
            "--a",
            &ap,
            "--b",
            &bp,
            "--verify",
            "--weights-plain",
        ],
    );
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    assert_eq!(v["max_abs_err"], 0.0);
    assert_eq!(v["ledger"]["cipher_mults"], 0);
}

#[test]
fn conv_ones_and_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let kdir = d.join("k");
    fs::create_dir(&kdir).unwrap();
    Matrix::from_fn(3, 3, |_, _| 1.0)
        .write_csv(kdir.join("conv_k0.csv"))
        .unwrap();
    let imgs = write(d, "imgs.csv", &Matrix::from_fn(1, 16, |_, _| 1.0));
    let k = kdir.display().to_string();
    let base = [
        "conv",
        "--images",
        &imgs,
        "--kernels",
        &k,
        "--h",
        "4",
        "--w",
        "4",
    ];
    let mut args = base.to_vec();
    args.extend(["--kh", "3", "--kw", "3", "--verify", "--result", "flat.csv"]);
    let out = volley(d, &args);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let v = json(&out);
    assert_eq!(v["max_abs_err"], 0.0);
    assert_eq!(v["output_width"], 4);
    assert!(v["reconstruction_rotations"].as_u64() <= v["reconstruction_budget"].as_u64());
    let flat = Matrix::read_csv(d.join("flat.csv")).unwrap();
    assert_eq!(flat.as_slice(), &[9.0; 4]);

    let mut args = base.to_vec();
    args.extend(["--kh", "5", "--kw", "3"]);
    let out = volley(d, &args);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not fit"));

    let mut args = base.to_vec();
    args.extend(["--kh", "3", "--kw", "3", "--stride", "2"]);
    assert_eq!(volley(d, &args).status.code(), Some(1));
}

#[test]
fn conv_on_idx_batch() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let arch = Architecture::default();
    let model = CnnModel::random(arch, 5).unwrap();
    save_model(&model, d.join("m")).unwrap();
    let batch = Batch::random(&arch, 3, 6);
    fs::write(
        d.join("imgs.idx"),
        encode_idx_images(&batch.images).unwrap(),
    )
    .unwrap();
    let out = volley(
        d,
        &[
            "conv",
            "--images",
            "imgs.idx",
            "--kernels",
            "m",
            "--h",
            "28",
            "--w",
            "28",
            "--kh",
            "3",
            "--kw",
            "3",
            "--verify",
        ],
    );
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let v = json(&out);
    assert_eq!(v["output_width"], 2704);
    assert_eq!(v["images"], 3);
    assert!(v["max_abs_err"].as_f64().unwrap() <= 1e-9);
    assert!(v["reconstruction_rotations"].as_u64() <= v["reconstruction_budget"].as_u64());
}

#[test]
fn infer_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let out = volley(d, &["init-model", "--dir", "m", "--seed", "9"]);
    assert_eq!(out.status.code(), Some(0));
    let arch = Architecture::default();
    let batch = Batch::random(&arch, 32, 1);
    fs::write(
        d.join("imgs.idx"),
        encode_idx_images(&batch.images).unwrap(),
    )
    .unwrap();
    let labels: Vec<u8> = (0..32).map(|i| (i % 10) as u8).collect();
    fs::write(d.join("labels.idx"), encode_idx_labels(&labels)).unwrap();

    let out = volley(
        d,
        &[
            "infer",
            "--model",
            "m",
            "--images",
            "imgs.idx",
            "--labels",
            "labels.idx",
        ],
    );
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let v = json(&out);
    assert!(v["max_err_vs_plain"].as_f64().unwrap() <= 1e-6);
    assert_eq!(v["argmax_agreement"], 32);
    assert_eq!(v["per_image_argmax"].as_array().unwrap().len(), 32);
    assert!(v["accuracy"].is_number());
    assert_eq!(v["ledger"]["cipher_mults"], 300);
    assert!(v["wall_time_ms"].is_number());

    let out = volley(
        d,
        &[
            "infer", "--model", "m", "--images", "imgs.idx", "--batch", "64",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("overflow"));

    let out = volley(
        d,
        &[
            "infer",
            "--model",
            "m",
            "--images",
            "imgs.idx",
            "--batch",
            "4",
            "--weights-plain",
        ],
    );
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    assert!(v["accuracy"].is_null());
    // only the activations multiply ciphertexts: 4 maps, 64 / 4 hidden chunks
    assert_eq!(v["ledger"]["cipher_mults"], 2 * (4 + 16));
}

#[test]
fn infer_zero_model_ties_to_first_class() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let arch = Architecture::default();
    save_model(&CnnModel::zeros(arch).unwrap(), d.join("z")).unwrap();
    let batch = Batch::random(&arch, 2, 3);
    fs::write(
        d.join("imgs.idx"),
        encode_idx_images(&batch.images).unwrap(),
    )
    .unwrap();
    let out = volley(
        d,
        &[
            "infer", "--model", "z", "--images", "imgs.idx", "--batch", "2",
        ],
    );
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(json(&out)["per_image_argmax"], serde_json::json!([0, 0]));
}

#[test]
fn train_trace_and_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let data = concat!(env!("CARGO_MANIFEST_DIR"), "/data/iris.libsvm");
    let out = volley(
        d,
        &[
            "train",
            "--data",
            data,
            "--classes",
            "3",
            "--optimizer",
            "nag",
            "--iters",
            "50",
        ],
    );
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let v = json(&out);
    let trace = v["trace"].as_array().unwrap();
    assert_eq!(trace.len(), 51);
    let first = trace[0]["loglik"].as_f64().unwrap();
    let last = trace[50]["loglik"].as_f64().unwrap();
    assert!(last > first);
    for key in ["iter", "loglik", "grad_maxnorm"] {
        assert!(trace[1].get(key).is_some());
    }
    let w = Matrix::read_csv(d.join("weights.csv")).unwrap();
    assert_eq!(w.shape(), (3, 5));

    let again = volley(
        d,
        &[
            "train",
            "--data",
            data,
            "--classes",
            "3",
            "--optimizer",
            "nag",
            "--iters",
            "50",
        ],
    );
    assert_eq!(again.stdout, out.stdout);

    let bad = |args: &[&str]| volley(d, args).status.code();
    assert_eq!(
        bad(&[
            "train",
            "--data",
            data,
            "--classes",
            "3",
            "--optimizer",
            "bogus",
            "--iters",
            "5"
        ]),
        Some(1)
    );
    assert_eq!(
        bad(&[
            "train",
            "--data",
            data,
            "--classes",
            "3",
            "--optimizer",
            "adagrad",
            "--iters",
            "0"
        ]),
        Some(1)
    );
    assert_eq!(
        bad(&[
            "train",
            "--data",
            data,
            "--classes",
            "2",
            "--optimizer",
            "adagrad",
            "--iters",
            "3"
        ]),
        Some(1)
    );
}

#[test]
fn verify_suites_and_fault() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let out = volley(d, &["verify", "--suite", "packing"]);
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    assert_eq!(v["suite"], "packing");
    assert_eq!(v["failures"], 0);

    let out = volley(d, &["verify", "--suite", "packing", "--inject-fault"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(json(&out)["failures"].as_u64().unwrap() > 0);

    let out = volley(d, &["verify", "--output", "report.json"]);
    assert_eq!(out.status.code(), Some(0));
    let v: Value =
        serde_json::from_str(&fs::read_to_string(d.join("report.json")).unwrap()).unwrap();
    assert_eq!(v["suite"], "all");
    assert_eq!(v["failures"], 0);
}

#[test]
fn slots_from_environment_and_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let m = write(d, "m.csv", &Matrix::identity(2));
    let out = Command::new(env!("CARGO_BIN_EXE_volley"))
        .current_dir(d)
        .env("VOLLEY_SLOTS", "64")
        .args(["pack", "--input", &m])
        .output()
        .unwrap();
    assert_eq!(json(&out)["slot_count"], 64);
    let out = Command::new(env!("CARGO_BIN_EXE_volley"))
        .current_dir(d)
        .env("VOLLEY_SLOTS", "64")
        .args(["pack", "--input", &m, "--slots", "128", "--show", "4"])
        .output()
        .unwrap();
    let v = json(&out);
    assert_eq!(v["slot_count"], 128);
    assert_eq!(v["leading_slots"], serde_json::json!([1.0, 0.0, 0.0, 1.0]));
    assert_eq!(
        volley(d, &["pack", "--input", &m, "--slots", "100"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(volley(d, &["--help"]).status.code(), Some(0));
    assert_eq!(volley(d, &["frobnicate"]).status.code(), Some(1));
}

#[test]
fn report_closed_forms() {
    let tmp = tempfile::tempdir().unwrap();
    let out = volley(
        tmp.path(),
        &["report", "--n", "32", "--f", "676", "--m", "10"],
    );
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    assert_eq!(v["m_padded"], 16);
    assert_eq!(v["cipher_mults"], 16);
    assert!(v["matmul_rotations"].is_u64());
}
