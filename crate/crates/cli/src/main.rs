mod commands;
mod config;
mod predictions;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ofnet::eval::EvalConfig;
use ofnet::model::ModelVariant;
use ofnet::synth::SceneSpec;
use ofnet::train::TrainConfig;
use ofnet::{Error, Result};

use config::{AblateConfig, EvalRunConfig, GenDataConfig, InferConfig, PlotConfig, RunConfig, TrainRunConfig};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

/// Occlusion boundary and orientation toolkit.
///
/// Set OFNET_THREADS to cap the number of worker threads.
#[derive(Parser, Debug)]
#[command(name = "ofnet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic occlusion dataset.
    GenData(GenDataArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Run a checkpoint on images and write raw maps plus thinned boundaries.
    Infer(InferArgs),
    /// Score predictions against a dataset (EPR and OPR).
    Eval(EvalArgs),
    /// Draw precision-recall curves from one or more eval reports.
    Plot(PlotArgs),
    /// Train and score several variants over several seeds.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// Output directory. Defaults to the directory of --config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// A config.toml written by a previous run; flags given here override it.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of samples.
    #[arg(long)]
    count: Option<usize>,
    /// Height of every sample.
    #[arg(long)]
    height: Option<usize>,
    /// Width of every sample.
    #[arg(long)]
    width: Option<usize>,
    /// Shorthand for equal --height and --width.
    #[arg(long, conflicts_with_all = ["height", "width"])]
    size: Option<usize>,
    #[arg(long)]
    prefix: Option<String>,
    /// Allow a non-empty output directory; earlier dataset files are replaced.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// full, no-mcl, head-3x3, baseline, single-edge or single-ori.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iters: Option<usize>,
    /// Side of the square training crop (0 = whole samples).
    #[arg(long)]
    crop: Option<usize>,
    /// Weight of the orientation loss.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Print a progress line every N steps (0 = quiet).
    #[arg(long, default_value_t = 50)]
    log_every: usize,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Dataset directory; every listed image is processed.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Individual PNG images.
    images: Vec<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Directory written by `infer`.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Ground-truth dataset directory.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Match radius as a fraction of the image diagonal.
    #[arg(long)]
    tol: Option<f64>,
    /// Number of evenly spaced thresholds.
    #[arg(long)]
    thresholds: Option<usize>,
}

#[derive(Args, Debug)]
struct PlotArgs {
    #[command(flatten)]
    common: Common,
    /// Eval output directories or epr_*/opr_* CSV files.
    reports: Vec<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated variant names; the first is the reference.
    #[arg(long, value_delimiter = ',')]
    variants: Option<Vec<String>>,
    /// Comma-separated training seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Seed of the synthetic split.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    crop: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    train_count: Option<usize>,
    #[arg(long)]
    test_count: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long, requires = "test_dataset")]
    train_dataset: Option<PathBuf>,
    #[arg(long, requires = "train_dataset")]
    test_dataset: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Usage(_) => EXIT_USAGE,
        Error::Numeric(_) => EXIT_NUMERIC,
        Error::Data(_) | Error::Checkpoint(_) | Error::Dataset(_) | Error::Io { .. } => EXIT_DATA,
    }
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("OFNET_THREADS") else { return Ok(()) };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Usage(format!("OFNET_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Usage(format!("cannot configure {n} threads: {e}")))
}

/// Loads `--config` when given and checks it belongs to `command`.
fn base_config(common: &Common, command: &str) -> Result<Option<RunConfig>> {
    let Some(path) = &common.config else { return Ok(None) };
    let cfg = RunConfig::load(path)?;
    if cfg.command() != command {
        return Err(Error::Usage(format!("{} is a {} config, not {command}", path.display(), cfg.command())));
    }
    Ok(Some(cfg))
}

fn out_dir(common: &Common) -> Result<PathBuf> {
    if let Some(out) = &common.out {
        return Ok(out.clone());
    }
    match &common.config {
        Some(c) => Ok(c.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new(".")).to_path_buf()),
        None => Err(Error::Usage("--out is required".into())),
    }
}

fn required<T>(v: Option<T>, flag: &str) -> Result<T> {
    v.ok_or_else(|| Error::Usage(format!("{flag} is required")))
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut cfg = match base_config(&a.common, "gen-data")? {
        Some(RunConfig::GenData(c)) => c,
        _ => GenDataConfig { seed: 0, count: 100, prefix: String::new(), scene: SceneSpec::default() },
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.count {
        cfg.count = n;
    }
    if let Some(s) = a.size {
        cfg.scene.height = s;
        cfg.scene.width = s;
    }
    if let Some(h) = a.height {
        cfg.scene.height = h;
    }
    if let Some(w) = a.width {
        cfg.scene.width = w;
    }
    if let Some(p) = a.prefix {
        cfg.prefix = p;
    }
    cfg.scene.seed = cfg.seed;
    cfg.scene.validate()?;
    commands::gen_data(&cfg, &out_dir(&a.common)?, a.force)
}

fn train(a: TrainArgs) -> Result<()> {
    let base = match base_config(&a.common, "train")? {
        Some(RunConfig::Train(c)) => Some(c),
        _ => None,
    };
    let variant = a.variant.clone().or_else(|| base.as_ref().map(|c| c.variant.clone())).unwrap_or_else(|| "full".into());
    let mut cfg = match base {
        // Keep a loaded model description unless the variant changes.
        Some(c) if c.variant == variant => c,
        Some(c) => TrainRunConfig { model: ModelVariant::named(ModelVariant::tiny(), &variant)?, variant, ..c },
        None => TrainRunConfig {
            dataset: required(a.dataset.clone(), "--dataset")?,
            seed: 0,
            model: ModelVariant::named(ModelVariant::tiny(), &variant)?,
            variant,
            train: TrainConfig::default(),
        },
    };
    if let Some(d) = a.dataset {
        cfg.dataset = d;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.train.seed = cfg.seed;
    if let Some(n) = a.iters {
        cfg.train.iterations = n;
    }
    if let Some(c) = a.crop {
        cfg.train.crop = c;
    }
    if let Some(l) = a.lambda {
        cfg.train.loss.lambda = l;
    }
    if let Some(lr) = a.lr {
        cfg.train.learning_rate = lr;
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(c) = a.checkpoint_every {
        cfg.train.checkpoint_every = c;
    }
    cfg.train.validate()?;
    cfg.model.validate()?;
    commands::train_cmd(&cfg, &out_dir(&a.common)?, a.log_every)
}

fn infer(a: InferArgs) -> Result<()> {
    let mut cfg = match base_config(&a.common, "infer")? {
        Some(RunConfig::Infer(c)) => c,
        _ => InferConfig { checkpoint: required(a.checkpoint.clone(), "--checkpoint")?, dataset: None, images: Vec::new() },
    };
    if let Some(c) = a.checkpoint {
        cfg.checkpoint = c;
    }
    if a.dataset.is_some() || !a.images.is_empty() {
        cfg.dataset = a.dataset;
        cfg.images = a.images;
    }
    commands::infer(&cfg, &out_dir(&a.common)?)
}

fn eval(a: EvalArgs) -> Result<()> {
    let mut cfg = match base_config(&a.common, "eval")? {
        Some(RunConfig::Eval(c)) => c,
        _ => EvalRunConfig {
            predictions: required(a.predictions.clone(), "--predictions")?,
            dataset: required(a.dataset.clone(), "--dataset")?,
            eval: EvalConfig::default(),
        },
    };
    if let Some(p) = a.predictions {
        cfg.predictions = p;
    }
    if let Some(d) = a.dataset {
        cfg.dataset = d;
    }
    if let Some(t) = a.tol {
        cfg.eval.tolerance = t;
    }
    if let Some(n) = a.thresholds {
        cfg.eval.thresholds = n;
    }
    cfg.eval.validate()?;
    commands::eval_cmd(&cfg, &out_dir(&a.common)?)
}

fn plot(a: PlotArgs) -> Result<()> {
    let mut cfg = match base_config(&a.common, "plot")? {
        Some(RunConfig::Plot(c)) => c,
        _ => PlotConfig { reports: Vec::new() },
    };
    if !a.reports.is_empty() {
        cfg.reports = a.reports;
    }
    commands::plot(&cfg, &out_dir(&a.common)?)
}

fn ablate(a: AblateArgs) -> Result<()> {
    let mut cfg = match base_config(&a.common, "ablate")? {
        Some(RunConfig::Ablate(c)) => c,
        _ => {
            let d = ofnet::ablation::AblationConfig::default();
            AblateConfig {
                data_seed: 2024,
                train_dataset: None,
                test_dataset: None,
                train_count: 200,
                test_count: 50,
                size: 128,
                variants: d.variants,
                seeds: d.seeds,
                model: d.base,
                train: d.train,
                eval: d.eval,
            }
        }
    };
    if let Some(v) = a.variants {
        cfg.variants = v;
    }
    if let Some(s) = a.seeds {
        cfg.seeds = s;
    }
    if let Some(s) = a.seed {
        cfg.data_seed = s;
    }
    if let Some(n) = a.iters {
        cfg.train.iterations = n;
    }
    if let Some(c) = a.crop {
        cfg.train.crop = c;
    }
    if let Some(l) = a.lambda {
        cfg.train.loss.lambda = l;
    }
    if let Some(n) = a.train_count {
        cfg.train_count = n;
    }
    if let Some(n) = a.test_count {
        cfg.test_count = n;
    }
    if let Some(s) = a.size {
        cfg.size = s;
    }
    if a.train_dataset.is_some() {
        cfg.train_dataset = a.train_dataset;
        cfg.test_dataset = a.test_dataset;
    }
    cfg.train.validate()?;
    commands::ablate(&cfg, &out_dir(&a.common)?)
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
        Command::Plot(a) => plot(a),
        Command::Ablate(a) => ablate(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
