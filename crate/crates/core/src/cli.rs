//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
//! Settings are resolved as flag > config file > built-in default, except
//! the seed: `--seed` > `DIFFQ_SEED` > config file > default.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::codec::{self, HardenedModel};
use crate::diffq::{DiffqConfig, NoiseKind};
use crate::error::{Error, Result};
use crate::harness::{self, DatasetSpec, LmsConfig, LmsMethod, Method, OptimizerConfig, ToyTask};

pub const SEED_ENV: &str = "DIFFQ_SEED";

// A closed stdout (e.g. piped into `head`) must not abort the command.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

#[derive(Debug, Parser)]
#[command(name = "diffq", version, about = "Quantization with learnable bitwidths")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the 1-D least-squares problem and write its trajectory.
    Lms(LmsArgs),
    /// Train a toy model and write metrics.json, curves.csv and model.dfq.
    Train(TrainArgs),
    /// Train one model per (lambda, group size) and write sweep.csv.
    Sweep(SweepArgs),
    /// Pack a hardened model from JSON into the binary format.
    Pack(ConvertArgs),
    /// Unpack a binary model into JSON.
    Unpack(ConvertArgs),
    /// Print sizes and bit allocation of a packed model.
    Inspect(InspectArgs),
    /// Compare autodiff gradients of a noisy MLP with finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum NoiseArg {
    Uniform,
    Gaussian,
}

impl From<NoiseArg> for NoiseKind {
    fn from(n: NoiseArg) -> Self {
        match n {
            NoiseArg::Uniform => NoiseKind::Uniform,
            NoiseArg::Gaussian => NoiseKind::Gaussian,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LmsMethodArg {
    Ste,
    Pqn,
}

#[derive(Debug, Args)]
struct LmsArgs {
    #[arg(long, default_value_t = 0.11)]
    w_star: f64,
    #[arg(long, default_value_t = 4)]
    bits: u32,
    #[arg(long, default_value_t = 0.5)]
    lr: f64,
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    #[arg(long, value_enum, default_value = "ste")]
    method: LmsMethodArg,
    #[arg(long, value_enum, default_value = "uniform")]
    noise: NoiseArg,
    /// Second moment of X.
    #[arg(long, default_value_t = 1.0)]
    sigma2: f64,
    /// Sample X each step instead of using the expected gradient.
    #[arg(long)]
    stochastic_x: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Steps at the end of the trajectory checked for oscillation.
    #[arg(long, default_value_t = 500)]
    tail: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    Fp32,
    Qat,
    Diffq,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    group_size: Option<usize>,
    #[arg(long, value_enum)]
    noise: Option<NoiseArg>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, value_enum)]
    method: Option<MethodKind>,
    /// Bitwidth for QAT.
    #[arg(long)]
    qat_bits: Option<u32>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Comma-separated penalty weights.
    #[arg(long, value_delimiter = ',')]
    lambdas: Option<Vec<f64>>,
    /// Comma-separated group sizes.
    #[arg(long, value_delimiter = ',')]
    g_values: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
struct ConvertArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct InspectArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Print the full inspection as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    /// First seed; later ones count up from it.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 1e-6)]
    step: f64,
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
}

/// Task, method and optimizer settings of a `train` or `sweep` run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub method: MethodKind,
    pub qat_bits: u32,
    pub dataset: DatasetSpec,
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub diffq: DiffqConfig,
    pub lambdas: Vec<f64>,
    pub g_values: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let task = ToyTask::default();
        Self {
            seed: 0,
            out_dir: PathBuf::from("run"),
            method: MethodKind::Diffq,
            qat_bits: 4,
            dataset: task.dataset,
            hidden: task.hidden,
            epochs: task.epochs,
            batch_size: task.batch_size,
            optimizer: OptimizerConfig::default(),
            // Toy tensors are far below the usual skip threshold.
            diffq: DiffqConfig {
                skip_threshold_mb: 0.0,
                ..DiffqConfig::default()
            },
            lambdas: vec![1e-3, 1e-2, 1e-1],
            g_values: vec![8],
        }
    }
}

impl RunConfig {
    pub fn task(&self) -> ToyTask {
        ToyTask {
            dataset: self.dataset.clone(),
            hidden: self.hidden.clone(),
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
        }
    }

    pub fn method(&self) -> Method {
        match self.method {
            MethodKind::Fp32 => Method::Fp32,
            MethodKind::Qat => Method::Qat {
                bits: self.qat_bits,
                exclude: self.diffq.exclude.clone(),
            },
            MethodKind::Diffq => Method::Diffq(self.diffq.clone()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.diffq.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(1..=32).contains(&self.qat_bits) {
            return Err(Error::Config(format!("qat_bits {} outside 1..=32", self.qat_bits)));
        }
        Ok(())
    }
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

type CliResult = std::result::Result<(), Failure>;

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Lms(a) => run_lms_cmd(a),
        Command::Train(a) => run_train(a),
        Command::Sweep(a) => run_sweep(a),
        Command::Pack(a) => run_pack(a),
        Command::Unpack(a) => run_unpack(a),
        Command::Inspect(a) => run_inspect(a),
        Command::Gradcheck(a) => run_gradcheck(a),
    };
    match result {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            2
        }
    }
}

fn env_seed() -> std::result::Result<Option<u64>, Failure> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Failure::Usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn resolve_seed(flag: Option<u64>, configured: u64) -> std::result::Result<u64, Failure> {
    Ok(match flag {
        Some(s) => s,
        None => env_seed()?.unwrap_or(configured),
    })
}

fn runtime<E: std::fmt::Display>(context: &Path) -> impl FnOnce(E) -> Failure + '_ {
    move |e| Failure::Runtime(format!("{}: {e}", context.display()))
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult {
    fs::write(path, bytes).map_err(runtime(path))
}

fn run_lms_cmd(a: LmsArgs) -> CliResult {
    let cfg = LmsConfig {
        w_star: a.w_star,
        bits: a.bits,
        lr: a.lr,
        steps: a.steps,
        method: match a.method {
            LmsMethodArg::Ste => LmsMethod::Ste,
            LmsMethodArg::Pqn => LmsMethod::Pqn,
        },
        noise: a.noise.into(),
        sigma2: a.sigma2,
        stochastic_x: a.stochastic_x,
        seed: resolve_seed(a.seed, 0)?,
    };
    let traj = harness::run_lms(&cfg).map_err(|e| Failure::Usage(e.to_string()))?;
    for w in &traj.warnings {
        eprintln!("warning: {w}");
    }
    let mut buf = Vec::new();
    traj.write_csv(&mut buf)?;
    write_file(&a.out, &buf)?;
    let tail = a.tail.min(traj.points.len());
    let osc = harness::detect_oscillation(&traj, tail)?;
    let levels: Vec<String> = osc.levels.iter().map(|l| l.to_string()).collect();
    say!("rows {}", traj.points.len());
    say!("oscillating {} (last {tail} steps, levels {})", osc.oscillating, levels.join(" "));
    say!("wrote {}", a.out.display());
    Ok(())
}

fn load_config(path: Option<&Path>) -> std::result::Result<RunConfig, Failure> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("config {}: {e}", path.display())))
}

fn apply_run_args(cfg: &mut RunConfig, a: &RunArgs) -> CliResult {
    cfg.seed = resolve_seed(a.seed, cfg.seed)?;
    if let Some(out) = &a.out {
        cfg.out_dir = out.clone();
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(l) = a.lambda {
        cfg.diffq.lambda = l;
    }
    if let Some(g) = a.group_size {
        cfg.diffq.group_size = g;
    }
    if let Some(n) = a.noise {
        cfg.diffq.noise = n.into();
    }
    Ok(())
}

fn prepare_dir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir).map_err(runtime(dir))
}

fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable report");
    text.push('\n');
    text.into_bytes()
}

#[derive(Serialize)]
struct TrainMetrics<'a> {
    config: &'a RunConfig,
    report: &'a harness::RunReport,
}

fn run_train(a: TrainArgs) -> CliResult {
    let mut cfg = load_config(a.run.config.as_deref())?;
    apply_run_args(&mut cfg, &a.run)?;
    if let Some(m) = a.method {
        cfg.method = m;
    }
    if let Some(b) = a.qat_bits {
        cfg.qat_bits = b;
    }
    cfg.validate()?;
    prepare_dir(&cfg.out_dir)?;

    let run = harness::train_toy(&cfg.task(), &cfg.method(), &cfg.optimizer)?;
    let metrics = cfg.out_dir.join("metrics.json");
    let curves = cfg.out_dir.join("curves.csv");
    let model = cfg.out_dir.join("model.dfq");
    write_file(
        &metrics,
        &to_json(&TrainMetrics {
            config: &cfg,
            report: &run.report,
        }),
    )?;
    let mut buf = Vec::new();
    harness::write_curves_csv(&run.report.curves, &mut buf)?;
    write_file(&curves, &buf)?;
    write_file(&model, &run.packed)?;
    say!(
        "accuracy {} (unquantized {}), size {} MB, mean bits {}",
        run.report.accuracy, run.report.float_accuracy, run.report.true_size_mb, run.report.mean_bits
    );
    for p in [&metrics, &curves, &model] {
        say!("wrote {}", p.display());
    }
    Ok(())
}

#[derive(Serialize)]
struct SweepMetrics<'a> {
    config: &'a RunConfig,
    rows: &'a [harness::SweepRow],
}

fn run_sweep(a: SweepArgs) -> CliResult {
    let mut cfg = load_config(a.run.config.as_deref())?;
    apply_run_args(&mut cfg, &a.run)?;
    if let Some(l) = &a.lambdas {
        cfg.lambdas = l.clone();
    }
    if let Some(g) = &a.g_values {
        cfg.g_values = g.clone();
    }
    cfg.method = MethodKind::Diffq;
    cfg.validate()?;
    if cfg.lambdas.is_empty() || cfg.g_values.is_empty() {
        return Err(Failure::Usage("sweep needs at least one lambda and one group size".into()));
    }
    prepare_dir(&cfg.out_dir)?;

    let rows = harness::sweep_lambda(&cfg.task(), &cfg.diffq, &cfg.optimizer, &cfg.lambdas, &cfg.g_values)?;
    let sweep = cfg.out_dir.join("sweep.csv");
    let metrics = cfg.out_dir.join("metrics.json");
    let mut buf = Vec::new();
    harness::write_sweep_csv(&rows, &mut buf)?;
    write_file(&sweep, &buf)?;
    write_file(&metrics, &to_json(&SweepMetrics { config: &cfg, rows: &rows }))?;
    for r in &rows {
        say!(
            "lambda {} g {}: acc {} size {} MB mean bits {}",
            r.lambda, r.g, r.acc, r.size_mb, r.mean_bits
        );
    }
    say!("wrote {}", sweep.display());
    say!("wrote {}", metrics.display());
    Ok(())
}

fn run_pack(a: ConvertArgs) -> CliResult {
    let text = fs::read_to_string(&a.input).map_err(runtime(&a.input))?;
    let model: HardenedModel = serde_json::from_str(&text).map_err(runtime(&a.input))?;
    let bytes = codec::pack(&model)?;
    write_file(&a.out, &bytes)?;
    say!("packed {} tensors, {} bytes", model.tensors.len(), bytes.len());
    say!("wrote {}", a.out.display());
    Ok(())
}

fn run_unpack(a: ConvertArgs) -> CliResult {
    let bytes = fs::read(&a.input).map_err(runtime(&a.input))?;
    let model = codec::unpack(&bytes)?;
    write_file(&a.out, &to_json(&model))?;
    say!("unpacked {} tensors", model.tensors.len());
    say!("wrote {}", a.out.display());
    Ok(())
}

fn run_inspect(a: InspectArgs) -> CliResult {
    let bytes = fs::read(&a.input).map_err(runtime(&a.input))?;
    let info = codec::inspect(&bytes)?;
    if a.json {
        use std::io::Write as _;
        let _ = std::io::stdout().write_all(&to_json(&info));
        return Ok(());
    }
    say!("paper-bits {}", info.paper_bits);
    say!("paper-mb {}", info.paper_mb);
    say!("file-bytes {}", info.file_bytes);
    say!("framing-bits {}", info.framing_bits);
    say!("padding-bits {}", info.padding_bits);
    say!("mean-bits {}", info.mean_bits);
    for t in &info.tensors {
        let hist: Vec<String> = t.bit_histogram.iter().map(|(b, n)| format!("{b}:{n}")).collect();
        let groups = match (t.group_size, t.b_min, t.max_code_bits) {
            (Some(g), Some(b), Some(c)) => format!(" group-size {g} b-min {b} code-bits {c}"),
            _ => String::new(),
        };
        say!(
            "tensor {} {} shape {:?}{groups} bits [{}] paper-bits {}",
            t.name,
            t.kind,
            t.shape,
            hist.join(" "),
            t.paper_bits
        );
    }
    if !info.raw_tensors.is_empty() {
        say!("raw tensors counted at 32 bits: {}", info.raw_tensors.join(", "));
    }
    Ok(())
}

fn run_gradcheck(a: GradcheckArgs) -> CliResult {
    let first = resolve_seed(a.seed, 0)?;
    let cfg = gradcheck_config();
    let mut worst = 0.0f64;
    for seed in first..first + a.seeds {
        let r = harness::gradcheck_mlp(&[2, 16, 2], &cfg, 16, a.step, seed)?;
        say!(
            "seed {seed}: {} coordinates, max relative error {:e} at {}",
            r.checked, r.max_rel_error, r.worst
        );
        worst = worst.max(r.max_rel_error);
    }
    if worst < a.tolerance {
        say!("ok: max relative error {worst:e} < {:e}", a.tolerance);
        Ok(())
    } else {
        Err(Failure::Runtime(format!(
            "max relative error {worst:e} exceeds {:e}",
            a.tolerance
        )))
    }
}

/// Low initial bitwidths and a strong penalty, so both the noise path and
/// the size term contribute visibly to the logit gradients.
pub fn gradcheck_config() -> DiffqConfig {
    DiffqConfig {
        b_init: 4.0,
        lambda: 1e3,
        skip_threshold_mb: 0.0,
        ..DiffqConfig::default()
    }
}
