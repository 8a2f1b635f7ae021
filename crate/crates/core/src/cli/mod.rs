//! Command-line front end.
//!
//! Every subcommand also reads its flags from a `--config` file of
//! `key=value` lines, where a key is a long flag name without the dashes.
//! Flags given on the command line override the file.

mod config_file;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};

use crate::data::{load_manifest, load_patches, read_image, synth_generate, PatchPair, SplitMode, SynthSpec};
use crate::error::{Error, Result};
use crate::pipeline::{
    evaluate_images, infer_pair, load_checkpoint, run_cv, save_checkpoint, train, write_training_logs, TrainRunConfig,
};
use crate::satnet::checks::{block_checks, model_check};
use crate::satnet::{BaselineMode, BlockKind, ModelConfig, PoolingStrategy, SatNet, SatVariant};
use crate::tensor::checks::{primitive_checks, CheckResult};

pub use config_file::parse_config_file;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// Exit code for a library error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_USAGE,
        Error::Numerical(_) => EXIT_NUMERICAL,
        Error::Shape(_) | Error::Data { .. } | Error::Checkpoint(_) | Error::Io { .. } => EXIT_DATA,
    }
}

#[derive(Parser, Debug)]
#[command(name = "satnet", version, about = "Stereo image quality assessment with stereo-attention networks")]
pub struct Cli {
    /// Read flags from a key=value file; command-line flags win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render the synthetic stereo-distortion dataset.
    Synth(SynthArgs),
    /// Train a model on every record of a manifest.
    Train(TrainArgs),
    /// Score a manifest with a checkpoint and report the metrics.
    Eval(EvalArgs),
    /// Score one stereo pair.
    Infer(InferArgs),
    /// Repeated random train/test splits of one manifest.
    Cv(CvArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Count the trainable parameters of an architecture.
    Params(ParamsArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub scenes: usize,
    #[arg(long, default_value_t = 4)]
    pub levels: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Also emit pairs whose two views differ by one level.
    #[arg(long)]
    pub asymmetric: bool,
    #[arg(long, default_value_t = 40)]
    pub height: usize,
    #[arg(long, default_value_t = 40)]
    pub width: usize,
}

/// Architecture flags shared by `train`, `cv` and `params`.
#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    #[arg(long, default_value = "se")]
    pub variant: SatVariant,
    /// Residual block kind; defaults to the one paired with the depth.
    #[arg(long)]
    pub block: Option<BlockKind>,
    #[arg(long, default_value = "none")]
    pub baseline: BaselineMode,
    /// Disable the energy coefficient (plain sum fusion).
    #[arg(long)]
    pub no_ec: bool,
    /// Head pooling, e.g. `fusion:min,diff:max`.
    #[arg(long, default_value = "fusion:min,diff:max")]
    pub pooling: PoolingStrategy,
    #[arg(long, default_value_t = 64)]
    pub channels: usize,
    /// Bottleneck ratio of the attention MLPs.
    #[arg(long, default_value_t = 4)]
    pub reduction: usize,
}

impl ModelArgs {
    pub fn build(&self, k: usize, seed: u64) -> Result<ModelConfig> {
        let mut m = ModelConfig::with_depth(k);
        m.block_kind = self.block.unwrap_or(BlockKind::for_depth(k));
        m.sat.variant = self.variant;
        m.sat.ec_enabled = !self.no_ec;
        m.sat.channels = self.channels;
        m.sat.reduction_ratio = self.reduction;
        m.pooling = self.pooling;
        m.baseline = self.baseline;
        m.seed = seed;
        m.validate()?;
        Ok(m)
    }
}

/// Optimization flags shared by `train` and `cv`.
#[derive(Args, Debug, Clone)]
pub struct OptimArgs {
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    /// Peak learning rate of each cosine cycle.
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 4e-4)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Hold out this fraction of training scenes to pick the best epoch.
    #[arg(long)]
    pub validation_fraction: Option<f64>,
}

impl OptimArgs {
    pub fn build(&self, model: ModelConfig) -> Result<TrainRunConfig> {
        let run = TrainRunConfig {
            model,
            epochs: self.epochs,
            batch_size: self.batch_size,
            base_lr: self.lr,
            weight_decay: self.weight_decay,
            seed: self.seed,
            validation_fraction: self.validation_fraction,
            ..TrainRunConfig::default()
        };
        run.validate()?;
        Ok(run)
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Number of residual levels (3, 7, 14 or 15).
    #[arg(long, default_value_t = 7)]
    pub k: usize,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Directory for loss and energy-coefficient logs; defaults to
    /// `<out>.logs`.
    #[arg(long)]
    pub log_dir: Option<PathBuf>,
    /// Store Adam moments in the checkpoint.
    #[arg(long)]
    pub keep_optimizer: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Also write the report as CSV.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub left: PathBuf,
    #[arg(long)]
    pub right: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Scene,
    Image,
}

#[derive(Args, Debug)]
pub struct CvArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Number of random splits.
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Number of residual levels of the trained models.
    #[arg(long, default_value_t = 7)]
    pub sat_blocks: usize,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[arg(long, value_enum, default_value = "scene")]
    pub split: SplitArg,
    /// Also write per-fold results as CSV.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Scope {
    Primitive,
    Block,
    Model,
    All,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "all")]
    pub scope: Scope,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct ParamsArgs {
    #[arg(long, default_value_t = 7)]
    pub k: usize,
    #[command(flatten)]
    pub model: ModelArgs,
}

/// Published parameter counts of SAT-SE at each supported depth.
pub fn reference_parameter_count(k: usize) -> Option<usize> {
    match k {
        3 => Some(6_870_000),
        7 => Some(7_470_000),
        14 => Some(8_510_000),
        15 => Some(7_800_000),
        _ => None,
    }
}

/// Parses `args` (including the program name), merging in a `--config`
/// file when one is given.
pub fn parse_args<I, S>(args: I) -> std::result::Result<Cli, clap::Error>
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let first = Cli::try_parse_from(&argv)?;
    let Some(path) = first.config.clone() else {
        return Ok(first);
    };
    let sub_name = subcommand_name(&first.command);
    let mut cmd = Cli::command();
    let sub = cmd.find_subcommand_mut(sub_name).expect("parsed subcommand exists");
    let given: Vec<String> = argv
        .iter()
        .filter_map(|a| a.to_str()?.strip_prefix("--").map(|f| f.split('=').next().unwrap_or(f).to_string()))
        .collect();
    let extra = config_file::load_as_args(&path, sub, &given)
        .map_err(|msg| Cli::command().error(clap::error::ErrorKind::ValueValidation, msg))?;
    let at = argv.iter().skip(1).position(|a| a == sub_name).map(|i| i + 2).expect("subcommand in argv");
    let mut merged = argv[..at].to_vec();
    merged.extend(extra);
    merged.extend_from_slice(&argv[at..]);
    Cli::try_parse_from(merged)
}

fn subcommand_name(c: &Command) -> &'static str {
    match c {
        Command::Synth(_) => "synth",
        Command::Train(_) => "train",
        Command::Eval(_) => "eval",
        Command::Infer(_) => "infer",
        Command::Cv(_) => "cv",
        Command::Gradcheck(_) => "gradcheck",
        Command::Params(_) => "params",
    }
}

/// Runs the CLI with `args`, writing results to `out` and diagnostics to
/// `err`. Returns the process exit code.
pub fn run<I, S>(args: I, out: &mut dyn std::io::Write, err: &mut dyn std::io::Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match parse_args(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = if e.use_stderr() { write!(err, "{e}") } else { write!(out, "{e}") };
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn emit(out: &mut dyn std::io::Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn execute(command: Command, out: &mut dyn std::io::Write) -> Result<i32> {
    match command {
        Command::Synth(a) => cmd_synth(a, out),
        Command::Train(a) => cmd_train(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Infer(a) => cmd_infer(a, out),
        Command::Cv(a) => cmd_cv(a, out),
        Command::Gradcheck(a) => cmd_gradcheck(a, out),
        Command::Params(a) => cmd_params(a, out),
    }
}

fn cmd_synth(a: SynthArgs, out: &mut dyn std::io::Write) -> Result<i32> {
    let spec = SynthSpec {
        scenes: a.scenes,
        levels: a.levels,
        seed: a.seed,
        asymmetric: a.asymmetric,
        height: a.height,
        width: a.width,
    };
    let s = synth_generate(&spec, &a.out)?;
    emit(
        out,
        &format!(
            "manifest: {}\nrecords: {}\ndistorted: {}\npristine: {}\n",
            s.manifest.display(),
            s.records.len(),
            s.distorted,
            s.pristine
        ),
    )?;
    Ok(EXIT_OK)
}

fn load_images(manifest: &Path) -> Result<Vec<Vec<PatchPair>>> {
    let records = load_manifest(manifest)?;
    if records.is_empty() {
        return Err(Error::data(format!("{} lists no records", manifest.display())));
    }
    load_patches(&records, true)
}

fn cmd_train(a: TrainArgs, out: &mut dyn std::io::Write) -> Result<i32> {
    let model = a.model.build(a.k, a.optim.seed)?;
    let mut run = a.optim.build(model)?;
    run.keep_optimizer_state = a.keep_optimizer;
    let records = load_manifest(&a.manifest)?;
    if records.is_empty() {
        return Err(Error::data(format!("{} lists no records", a.manifest.display())));
    }
    let images = load_patches(&records, true)?;
    let pick = |idx: &[usize]| -> Vec<PatchPair> { idx.iter().flat_map(|&i| images[i].clone()).collect() };
    let all: Vec<usize> = (0..records.len()).collect();
    let outcome = match run.validation_fraction {
        None => train(&run, &pick(&all), None)?,
        Some(f) => {
            let (fit, val) = crate::data::holdout_scenes(&records, &all, f, run.seed)?;
            train(&run, &pick(&fit), Some(&pick(&val)))?
        }
    };
    let ckpt = outcome.best_checkpoint().unwrap_or_else(|| outcome.checkpoint(run.keep_optimizer_state));
    save_checkpoint(&a.out, &ckpt)?;
    let log_dir = a.log_dir.unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".logs");
        PathBuf::from(p)
    });
    write_training_logs(&log_dir, &outcome)?;
    let mut text = format!("checkpoint: {}\nlogs: {}\n", a.out.display(), log_dir.display());
    if let Some(last) = outcome.loss_log.last() {
        text.push_str(&format!("final_loss: {last:.6}\n"));
    }
    if let Some(alphas) = outcome.ec_trace.epochs.last() {
        let list: Vec<String> = alphas.iter().map(|v| format!("{v:.4}")).collect();
        text.push_str(&format!("ec_alpha: {}\n", list.join(",")));
    }
    emit(out, &text)?;
    Ok(EXIT_OK)
}

fn cmd_eval(a: EvalArgs, out: &mut dyn std::io::Write) -> Result<i32> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let images = load_images(&a.manifest)?;
    let report = evaluate_images(&ckpt.model, &images)?;
    if let Some(path) = &a.report {
        write_file(path, &format!("{}\n{}\n", crate::evalmetrics::MetricsReport::CSV_HEADER, report.to_csv_row()))?;
    }
    emit(out, &report.to_text())?;
    Ok(EXIT_OK)
}

fn cmd_infer(a: InferArgs, out: &mut dyn std::io::Write) -> Result<i32> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let left = read_image(&a.left)?;
    let right = read_image(&a.right)?;
    let score = infer_pair(&ckpt.model, &left, &right)?;
    emit(out, &format!("{score:.6}\n"))?;
    Ok(EXIT_OK)
}

fn cmd_cv(a: CvArgs, out: &mut dyn std::io::Write) -> Result<i32> {
    let model = a.model.build(a.sat_blocks, a.optim.seed)?;
    let mut run = a.optim.build(model)?;
    run.parallel_loading = true;
    let records = load_manifest(&a.manifest)?;
    let mode = match a.split {
        SplitArg::Scene => SplitMode::Scene,
        SplitArg::Image => SplitMode::Image,
    };
    let report = run_cv(&run, &records, a.k, mode)?;
    if let Some(path) = &a.report {
        write_file(path, &report.to_csv())?;
    }
    emit(out, &report.to_text())?;
    Ok(EXIT_OK)
}

/// Runs the checks selected by `scope`.
pub fn run_gradcheck(scope: Scope, seed: u64) -> Result<Vec<CheckResult>> {
    let mut results = Vec::new();
    if matches!(scope, Scope::Primitive | Scope::All) {
        results.extend(primitive_checks(seed)?);
    }
    if matches!(scope, Scope::Block | Scope::All) {
        results.extend(block_checks(seed)?);
    }
    if matches!(scope, Scope::Model | Scope::All) {
        results.push(model_check(seed)?);
    }
    Ok(results)
}

fn cmd_gradcheck(a: GradcheckArgs, out: &mut dyn std::io::Write) -> Result<i32> {
    let results = run_gradcheck(a.scope, a.seed)?;
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    let mut text = String::new();
    for r in &results {
        text.push_str(&format!(
            "{:<width$}  {:.3e}  (tol {:.0e})  {}\n",
            r.name,
            r.report.max_rel_error,
            r.report.tolerance,
            if r.passed() { "ok" } else { "FAIL" }
        ));
    }
    emit(out, &text)?;
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(EXIT_OK)
    } else {
        Err(Error::Numerical(format!("gradient check failed for: {}", failed.join(", "))))
    }
}

fn cmd_params(a: ParamsArgs, out: &mut dyn std::io::Write) -> Result<i32> {
    let config = a.model.build(a.k, 0)?;
    let count = SatNet::new(config)?.parameter_count();
    let mut text = format!("variant: {}\nk: {}\nblock: {}\nparameters: {count}\n", config.sat.variant, config.k, config.block_kind);
    if let Some(reference) = reference_parameter_count(a.k) {
        let dev = 100.0 * (count as f64 - reference as f64) / reference as f64;
        text.push_str(&format!("reference: {reference}\ndeviation: {dev:+.2}%\n"));
    }
    emit(out, &text)?;
    Ok(EXIT_OK)
}
