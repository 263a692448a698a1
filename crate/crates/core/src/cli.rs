//! Command-line front end for the `volley` binary.
//!
//! Exit codes: 0 on success, 1 on usage or input errors, 2 when a
//! verification step finds an error above tolerance.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::conv::{
    he_conv2d, pack_images, plain_conv2d, reconstruct_representation, reconstruction_budget,
    ConvSpec,
};
use crate::error::{Error, Result};
use crate::idx::{load_idx_images, load_idx_labels};
use crate::libsvm::load_libsvm;
use crate::linalg::{he_matmul_with, matmul_rotations, padded_columns, plain_matmul, WeightMode};
use crate::matrix::Matrix;
use crate::network::{
    argmax_rows, he_forward, load_model, plaintext_forward, save_model, Architecture, Batch,
    CnnModel, DEFAULT_BATCH,
};
use crate::packing::{pack_matrix, sum_col_vec_rotations, sum_row_vec_rotations};
use crate::quadgrad::{train_adagrad, train_nag, TraceEntry, DEFAULT_EPSILON};
use crate::simd::{LedgerReport, SlotMachine, DEFAULT_SLOTS};
use crate::verify::{run_suite, Suite, VerifyConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 1;
pub const EXIT_VERIFY: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "volley",
    version,
    about = "Packed-slot matrix products, convolutions and CNN inference, plus quadratic-gradient logistic regression"
)]
pub struct Cli {
    #[command(flatten)]
    pub run: RunConfig,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct RunConfig {
    /// Slots per vector; must be a power of two
    #[arg(long, global = true, env = "VOLLEY_SLOTS", default_value_t = DEFAULT_SLOTS, value_parser = parse_slots)]
    pub slots: usize,
    #[arg(long, global = true, default_value_t = 42)]
    pub seed: u64,
    /// Maximum absolute error accepted by --verify and the verify suites
    #[arg(long, global = true, default_value_t = 1e-9, value_parser = parse_tolerance)]
    pub tolerance: f64,
    /// Where to write the JSON report, "-" for stdout
    #[arg(long, global = true, default_value = "-")]
    pub output: String,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Multiply two CSV matrices with the packed algorithm
    Matmul(MatmulArgs),
    /// Valid convolution of a batch of images
    Conv(ConvArgs),
    /// Packed CNN inference on IDX images
    Infer(InferArgs),
    /// Train multiclass logistic regression on a libsvm file
    Train(TrainArgs),
    /// Run the randomised oracle suites
    Verify(VerifyArgs),
    /// Show how a CSV matrix lands in the slots
    Pack(PackArgs),
    /// Closed-form operation counts for a matrix product
    Report(ReportArgs),
    /// Write a randomly initialised model directory
    InitModel(InitModelArgs),
}

#[derive(Debug, Args)]
pub struct MatmulArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    /// Compare against a plain product
    #[arg(long)]
    pub verify: bool,
    /// Multiply by B as plaintext constants
    #[arg(long)]
    pub weights_plain: bool,
    #[arg(long, default_value = "result.csv")]
    pub result: PathBuf,
}

#[derive(Debug, Args)]
pub struct ConvArgs {
    /// IDX image file, or CSV with one flattened image per row
    #[arg(long)]
    pub images: PathBuf,
    /// Directory holding conv_k0.csv, conv_k1.csv, ...
    #[arg(long)]
    pub kernels: PathBuf,
    #[arg(long)]
    pub h: usize,
    #[arg(long)]
    pub w: usize,
    #[arg(long)]
    pub kh: usize,
    #[arg(long)]
    pub kw: usize,
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    /// Use at most this many images
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub verify: bool,
    /// Write the reconstructed feature rows here
    #[arg(long)]
    pub result: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_BATCH)]
    pub batch: usize,
    /// Index of the first image to use
    #[arg(long, default_value_t = 0)]
    pub offset: usize,
    #[arg(long)]
    pub weights_plain: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Nag,
    Adagrad,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub classes: usize,
    #[arg(long, value_enum)]
    pub optimizer: Optimizer,
    #[arg(long)]
    pub iters: usize,
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    pub epsilon: f64,
    /// Adagrad denominator regulariser
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    pub ada_epsilon: f64,
    #[arg(long, default_value = "weights.csv")]
    pub weights: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SuiteArg {
    Packing,
    Matmul,
    Conv,
    Quadgrad,
    All,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, value_enum, default_value = "all")]
    pub suite: SuiteArg,
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

#[derive(Debug, Args)]
pub struct PackArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// How many leading slots to list
    #[arg(long, default_value_t = 16)]
    pub show: usize,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub f: usize,
    #[arg(long)]
    pub m: usize,
}

#[derive(Debug, Args)]
pub struct InitModelArgs {
    #[arg(long)]
    pub dir: PathBuf,
}

fn parse_slots(s: &str) -> std::result::Result<usize, String> {
    let n: usize = s.parse().map_err(|e| format!("{e}"))?;
    if n.is_power_of_two() {
        Ok(n)
    } else {
        Err(format!("{n} is not a power of two"))
    }
}

fn parse_tolerance(s: &str) -> std::result::Result<f64, String> {
    let t: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if t > 0.0 && t.is_finite() {
        Ok(t)
    } else {
        Err("tolerance must be positive".into())
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_INPUT
        }
    }
}

pub fn run(cli: &Cli) -> Result<i32> {
    let cfg = &cli.run;
    match &cli.command {
        Command::Matmul(a) => cmd_matmul(cfg, a),
        Command::Conv(a) => cmd_conv(cfg, a),
        Command::Infer(a) => cmd_infer(cfg, a),
        Command::Train(a) => cmd_train(cfg, a),
        Command::Verify(a) => cmd_verify(cfg, a),
        Command::Pack(a) => cmd_pack(cfg, a),
        Command::Report(a) => cmd_report(cfg, a),
        Command::InitModel(a) => cmd_init_model(cfg, a),
    }
}

fn emit<T: Serialize>(cfg: &RunConfig, report: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    if cfg.output == "-" {
        std::io::stdout().lock().write_all(text.as_bytes())?;
    } else {
        fs::write(&cfg.output, text)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct MatmulReport {
    result_path: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_abs_err: Option<f64>,
    ledger: LedgerReport,
    rotations_closed_form: Option<u64>,
}

fn cmd_matmul(cfg: &RunConfig, args: &MatmulArgs) -> Result<i32> {
    let a = Matrix::read_csv(&args.a)?;
    let b = Matrix::read_csv(&args.b)?;
    if a.cols() != b.rows() {
        return Err(Error::ShapeMismatch(format!(
            "cannot multiply {}x{} by {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let ev = SlotMachine::new(cfg.slots)?;
    let mode = if args.weights_plain {
        WeightMode::Plain
    } else {
        WeightMode::Encrypted
    };
    let n = a.rows();
    let packed = pack_matrix(&ev, &a)?;
    // column blocks of at most n, each a separate product
    let mut product = Matrix::zeros(n, b.cols());
    let mut closed_form = Some(0u64);
    for start in (0..b.cols()).step_by(n.max(1)) {
        let end = (start + n).min(b.cols());
        let part = he_matmul_with(&ev, &packed, &b.column_block(start, end), mode)?.decode(&ev)?;
        for i in 0..n {
            product.row_mut(i)[start..end].copy_from_slice(part.row(i));
        }
        closed_form = match (
            closed_form,
            matmul_rotations(n, a.cols(), end - start, cfg.slots),
        ) {
            (Some(t), Some(r)) if mode == WeightMode::Encrypted => Some(t + r),
            _ => None,
        };
    }
    product.write_csv(&args.result)?;
    let max_abs_err = if args.verify {
        Some(product.max_abs_diff(&plain_matmul(&a, &b)?)?)
    } else {
        None
    };
    emit(
        cfg,
        &MatmulReport {
            result_path: args.result.display().to_string(),
            max_abs_err,
            ledger: ev.report(),
            rotations_closed_form: closed_form,
        },
    )?;
    Ok(verdict(max_abs_err, cfg.tolerance))
}

fn verdict(err: Option<f64>, tolerance: f64) -> i32 {
    match err {
        Some(e) if e > tolerance || e.is_nan() => EXIT_VERIFY,
        _ => EXIT_OK,
    }
}

fn read_kernels(dir: &Path) -> Result<Vec<Matrix>> {
    let mut kernels = Vec::new();
    loop {
        let path = dir.join(format!("conv_k{}.csv", kernels.len()));
        if !path.exists() {
            break;
        }
        kernels.push(Matrix::read_csv(path)?);
    }
    if kernels.is_empty() {
        return Err(Error::MissingFile(dir.join("conv_k0.csv")));
    }
    Ok(kernels)
}

fn read_images(path: &Path, h: usize, w: usize) -> Result<Vec<Matrix>> {
    let is_csv = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let images = if is_csv {
        let flat = Matrix::read_csv(path)?;
        if flat.cols() != h * w {
            return Err(Error::ShapeMismatch(format!(
                "image rows have {} values, expected {h}x{w}",
                flat.cols()
            )));
        }
        (0..flat.rows())
            .map(|i| Matrix::from_vec(h, w, flat.row(i).to_vec()))
            .collect::<Result<Vec<_>>>()?
    } else {
        load_idx_images(path)?
    };
    if let Some(img) = images.iter().find(|m| m.shape() != (h, w)) {
        return Err(Error::ShapeMismatch(format!(
            "images are {}x{}, expected {h}x{w}",
            img.rows(),
            img.cols()
        )));
    }
    Ok(images)
}

#[derive(Serialize)]
struct ConvReport {
    images: usize,
    kernels: usize,
    out_h: usize,
    out_w: usize,
    output_width: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_abs_err: Option<f64>,
    reconstruction_rotations: u64,
    reconstruction_budget: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    result_path: Option<String>,
    ledger: LedgerReport,
}

fn cmd_conv(cfg: &RunConfig, args: &ConvArgs) -> Result<i32> {
    if args.stride != 1 {
        return Err(Error::UnsupportedStride(args.stride));
    }
    if args.kh > args.h || args.kw > args.w || args.kh == 0 || args.kw == 0 {
        return Err(Error::KernelTooLarge {
            kh: args.kh,
            kw: args.kw,
            rows: args.h,
            cols: args.w,
        });
    }
    let kernels = read_kernels(&args.kernels)?;
    let mut images = read_images(&args.images, args.h, args.w)?;
    if let Some(b) = args.batch {
        images.truncate(b);
    }
    let spec = ConvSpec::new(args.h, args.w, images.len(), kernels, vec![])?;
    if (spec.kh, spec.kw) != (args.kh, args.kw) {
        return Err(Error::ShapeMismatch(format!(
            "kernels are {}x{}, --kh/--kw say {}x{}",
            spec.kh, spec.kw, args.kh, args.kw
        )));
    }
    let needed = images.len() * args.h * args.w;
    if needed > cfg.slots {
        return Err(Error::Overflow {
            needed,
            available: cfg.slots,
        });
    }
    let ev = SlotMachine::new(cfg.slots)?;
    let maps = he_conv2d(&ev, &pack_images(&ev, &images)?, &spec)?;
    let before = ev.report();
    let flat = reconstruct_representation(&ev, &maps, &spec)?.decode(&ev)?;
    let reconstruction_rotations = ev.report().since(&before).rotations;
    let max_abs_err = if args.verify {
        let want = plain_conv2d(&images, &spec)?;
        let mut err = 0.0f64;
        for (b, per_image) in want.iter().enumerate() {
            let row: Vec<f64> = per_image
                .iter()
                .flat_map(|m| m.as_slice().to_vec())
                .collect();
            err = flat
                .row(b)
                .iter()
                .zip(&row)
                .fold(err, |e, (x, y)| e.max((x - y).abs()));
        }
        Some(err)
    } else {
        None
    };
    if let Some(path) = &args.result {
        flat.write_csv(path)?;
    }
    emit(
        cfg,
        &ConvReport {
            images: images.len(),
            kernels: maps.len(),
            out_h: spec.out_h(),
            out_w: spec.out_w(),
            output_width: spec.output_width(),
            max_abs_err,
            reconstruction_rotations,
            reconstruction_budget: reconstruction_budget(&spec, maps.len()),
            result_path: args.result.as_ref().map(|p| p.display().to_string()),
            ledger: ev.report(),
        },
    )?;
    Ok(verdict(max_abs_err, cfg.tolerance))
}

#[derive(Serialize)]
struct InferReport {
    images: usize,
    accuracy: Option<f64>,
    per_image_argmax: Vec<usize>,
    argmax_agreement: usize,
    max_err_vs_plain: f64,
    logits: Vec<Vec<f64>>,
    ledger: LedgerReport,
    wall_time_ms: f64,
}

fn cmd_infer(cfg: &RunConfig, args: &InferArgs) -> Result<i32> {
    let model = load_model(&args.model)?;
    let arch = model.arch;
    let needed = args.batch * arch.image_h * arch.image_w;
    if needed > cfg.slots {
        return Err(Error::Overflow {
            needed,
            available: cfg.slots,
        });
    }
    let all = load_idx_images(&args.images)?;
    let end = args.offset + args.batch;
    if args.batch == 0 || end > all.len() {
        return Err(Error::InvalidArgument(format!(
            "images {}..{end} requested, file holds {}",
            args.offset,
            all.len()
        )));
    }
    let labels = match &args.labels {
        Some(p) => {
            let l = load_idx_labels(p)?;
            if l.len() < end {
                return Err(Error::InvalidArgument(format!(
                    "labels file holds only {} entries",
                    l.len()
                )));
            }
            Some(l[args.offset..end].to_vec())
        }
        None => None,
    };
    let batch = Batch::new(all[args.offset..end].to_vec(), labels)?;
    let ev = SlotMachine::new(cfg.slots)?;
    let mode = if args.weights_plain {
        WeightMode::Plain
    } else {
        WeightMode::Encrypted
    };
    let out = he_forward(&ev, &batch, &model, mode)?;
    let plain = plaintext_forward(&batch, &model)?;
    let argmax = out.argmax();
    let plain_argmax = argmax_rows(&plain);
    let accuracy = batch.labels.as_ref().map(|l| {
        let hits = l
            .iter()
            .zip(&argmax)
            .filter(|(y, p)| **y as usize == **p)
            .count();
        hits as f64 / l.len() as f64
    });
    emit(
        cfg,
        &InferReport {
            images: batch.len(),
            accuracy,
            argmax_agreement: argmax
                .iter()
                .zip(&plain_argmax)
                .filter(|(a, b)| a == b)
                .count(),
            per_image_argmax: argmax,
            max_err_vs_plain: out.logits.max_abs_diff(&plain)?,
            logits: (0..out.logits.rows())
                .map(|i| out.logits.row(i).to_vec())
                .collect(),
            ledger: out.ledger,
            wall_time_ms: out.wall_time_ms,
        },
    )?;
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct TrainReport {
    optimizer: Optimizer,
    iters: usize,
    n: usize,
    d: usize,
    classes: usize,
    weights_path: String,
    trace: Vec<TraceEntry>,
}

fn cmd_train(cfg: &RunConfig, args: &TrainArgs) -> Result<i32> {
    if args.iters == 0 {
        return Err(Error::InvalidArgument("--iters must be at least 1".into()));
    }
    let ds = load_libsvm(&args.data, args.classes)?;
    let out = match args.optimizer {
        Optimizer::Nag => train_nag(&ds, args.iters, args.epsilon)?,
        Optimizer::Adagrad => train_adagrad(&ds, args.iters, args.epsilon, args.ada_epsilon)?,
    };
    out.weights.write_csv(&args.weights)?;
    emit(
        cfg,
        &TrainReport {
            optimizer: args.optimizer,
            iters: args.iters,
            n: ds.n(),
            d: ds.d(),
            classes: ds.classes(),
            weights_path: args.weights.display().to_string(),
            trace: out.trace,
        },
    )?;
    Ok(EXIT_OK)
}

fn cmd_verify(cfg: &RunConfig, args: &VerifyArgs) -> Result<i32> {
    let suite = match args.suite {
        SuiteArg::Packing => Suite::Packing,
        SuiteArg::Matmul => Suite::Matmul,
        SuiteArg::Conv => Suite::Conv,
        SuiteArg::Quadgrad => Suite::Quadgrad,
        SuiteArg::All => Suite::All,
    };
    let report = run_suite(
        suite,
        &VerifyConfig {
            slots: cfg.slots,
            seed: cfg.seed,
            tolerance: cfg.tolerance,
            inject_fault: args.inject_fault,
        },
    )?;
    emit(cfg, &report)?;
    Ok(if report.failures == 0 {
        EXIT_OK
    } else {
        EXIT_VERIFY
    })
}

#[derive(Serialize)]
struct PackReport {
    rows: usize,
    cols: usize,
    slot_count: usize,
    used_slots: usize,
    leading_slots: Vec<f64>,
}

fn cmd_pack(cfg: &RunConfig, args: &PackArgs) -> Result<i32> {
    let m = Matrix::read_csv(&args.input)?;
    let ev = SlotMachine::new(cfg.slots)?;
    let p = pack_matrix(&ev, &m)?;
    emit(
        cfg,
        &PackReport {
            rows: p.rows(),
            cols: p.cols(),
            slot_count: cfg.slots,
            used_slots: p.len(),
            leading_slots: ev.decode(p.vec(), args.show.min(cfg.slots))?,
        },
    )?;
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct CostReport {
    n: usize,
    f: usize,
    m: usize,
    m_padded: Option<usize>,
    cipher_mults: Option<usize>,
    matmul_rotations: Option<u64>,
    sum_col_vec_rotations: u64,
    sum_row_vec_rotations: u64,
}

fn cmd_report(cfg: &RunConfig, args: &ReportArgs) -> Result<i32> {
    let m_padded = padded_columns(args.m, args.n);
    emit(
        cfg,
        &CostReport {
            n: args.n,
            f: args.f,
            m: args.m,
            m_padded,
            cipher_mults: m_padded,
            matmul_rotations: matmul_rotations(args.n, args.f, args.m, cfg.slots),
            sum_col_vec_rotations: sum_col_vec_rotations(args.f.max(args.m)),
            sum_row_vec_rotations: sum_row_vec_rotations(args.n),
        },
    )?;
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct InitModelReport {
    dir: String,
    seed: u64,
    architecture: Architecture,
}

fn cmd_init_model(cfg: &RunConfig, args: &InitModelArgs) -> Result<i32> {
    let model = CnnModel::random(Architecture::default(), cfg.seed)?;
    save_model(&model, &args.dir)?;
    emit(
        cfg,
        &InitModelReport {
            dir: args.dir.display().to_string(),
            seed: cfg.seed,
            architecture: model.arch,
        },
    )?;
    Ok(EXIT_OK)
}
