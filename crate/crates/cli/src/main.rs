//! `atv-prune`: prune a toy multimodal transformer checkpoint with a
//! text-anchored calibration pool, probe pathway sensitivity, export
//! per-block drift statistics, or generate synthetic inputs.
//!
//! Exit codes: 0 ok, 2 validation, 3 empty calibration, 4 I/O.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use atv_core::calibration::PoolKind;
use atv_core::error::AtvError;
use atv_core::evalgen::{calibration_split, drift_report, generate, toy_model, SynthSpec, ToyModelSpec};
use atv_core::io::checkpoint::{read_checkpoint, write_checkpoint};
use atv_core::io::config::RunConfig;
use atv_core::io::jsonl::{read_calibration, write_calibration};
use atv_core::io::report::{
    to_report_json, write_drift_csv, write_iou_csv, write_sensitivity_csv, ProbeRunReport,
    PruneRunReport,
};
use atv_core::model::{Model, ModelConfig, TokenSequence};
use atv_core::mot::{run_probe_grid, ProbeConfig};
use atv_core::pruner::{run_atv_pipeline, ComparisonGroup, Propagation};
use atv_core::saliency::SaliencySignal;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "atv-prune", version, about = "Modality-aware activation pruning for toy multimodal transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Prune every block and write the pruned checkpoint plus a JSON report
    Prune(PruneArgs),
    /// Run the pathway x calibration-pool sensitivity grid on a decoupled copy
    ProbeMot(ProbeArgs),
    /// Write block-wise mean visual drift and visual-token budgets as CSV
    DriftStats(DriftArgs),
    /// Generate a synthetic bimodal calibration set and a random toy model
    GenSynth(GenArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Signal {
    Drift,
    Abs,
    Dbs,
    Random,
}

impl From<Signal> for SaliencySignal {
    fn from(s: Signal) -> Self {
        match s {
            Signal::Drift => SaliencySignal::Drift,
            Signal::Abs => SaliencySignal::Abs,
            Signal::Dbs => SaliencySignal::Dbs,
            Signal::Random => SaliencySignal::Random,
        }
    }
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
#[value(rename_all = "snake_case")]
enum Policy {
    Atv,
    MixedAll,
    TextOnly,
    VisualOnly,
}

impl From<Policy> for PoolKind {
    fn from(p: Policy) -> Self {
        match p {
            Policy::Atv => PoolKind::Atv,
            Policy::MixedAll => PoolKind::MixedAll,
            Policy::TextOnly => PoolKind::TextOnly,
            Policy::VisualOnly => PoolKind::VisualOnly,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum Group {
    PerOutputRow,
    PerLayer,
}

impl From<Group> for ComparisonGroup {
    fn from(g: Group) -> Self {
        match g {
            Group::PerOutputRow => ComparisonGroup::PerOutputRow,
            Group::PerLayer => ComparisonGroup::PerLayer,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Prop {
    Sequential,
    Dense,
}

impl From<Prop> for Propagation {
    fn from(p: Prop) -> Self {
        match p {
            Prop::Sequential => Propagation::Sequential,
            Prop::Dense => Propagation::Dense,
        }
    }
}

#[derive(Args)]
struct Inputs {
    /// Model checkpoint
    #[arg(long)]
    model: PathBuf,
    /// Calibration JSONL
    #[arg(long)]
    calib: PathBuf,
}

#[derive(Args)]
struct PoolArgs {
    /// Global scaling factor of the visual-token budget
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, value_enum, default_value = "drift")]
    signal: Signal,
    #[arg(long, value_enum, default_value = "atv")]
    policy: Policy,
    #[arg(long, value_enum, default_value = "per_output_row")]
    group: Group,
    #[arg(long, value_enum, default_value = "sequential")]
    propagation: Prop,
    /// Fraction of text tokens kept in the atv pool, highest drift first
    #[arg(long, default_value_t = 1.0)]
    text_keep_ratio: f64,
    /// Use one fixed budget per block, matched to the adaptive run's total
    #[arg(long)]
    fixed_budget: bool,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct PruneArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[command(flatten)]
    pool: PoolArgs,
    /// Unstructured sparsity in [0, 1]
    #[arg(long, conflicts_with = "pattern", required_unless_present = "pattern")]
    sparsity: Option<f64>,
    /// Semi-structured N:M pattern, e.g. 2:4
    #[arg(long)]
    pattern: Option<String>,
    /// Pruned checkpoint
    #[arg(long)]
    out: PathBuf,
    /// Report JSON
    #[arg(long)]
    report: PathBuf,
    /// Record wall-clock time in the report (makes it non-reproducible)
    #[arg(long)]
    timing: bool,
}

#[derive(Args)]
struct ProbeArgs {
    #[command(flatten)]
    inputs: Inputs,
    /// Sparsity levels, comma separated
    #[arg(long, value_delimiter = ',', default_value = "0.5,0.6")]
    sparsity: Vec<f64>,
    /// Sensitivity grid CSV
    #[arg(long)]
    grid: PathBuf,
    /// Per-layer IoU CSV [default: next to the grid, `<grid>.iou.csv`]
    #[arg(long)]
    iou: Option<PathBuf>,
    /// The two pools whose masks are compared
    #[arg(long, value_enum, value_delimiter = ',', default_value = "text_only,visual_only")]
    iou_pools: Vec<Policy>,
    #[arg(long, value_enum, default_value = "per_output_row")]
    group: Group,
    #[arg(long, value_enum, default_value = "sequential")]
    propagation: Prop,
    /// Optional JSON report with the grid and IoU summaries
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct DriftArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[command(flatten)]
    pool: PoolArgs,
    /// Prune while collecting, so later blocks see pruned hidden states
    /// exactly as `prune` does
    #[arg(long, default_value_t = 0.0, conflicts_with = "pattern")]
    sparsity: f64,
    #[arg(long)]
    pattern: Option<String>,
    /// Output CSV
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 128)]
    samples: usize,
    #[arg(long, default_value_t = 32)]
    d_model: usize,
    #[arg(long, default_value_t = 64)]
    n_visual: usize,
    #[arg(long, default_value_t = 32)]
    n_text: usize,
    /// Distance between the text and visual means
    #[arg(long, default_value_t = 10.0)]
    separation: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma_text: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma_visual: f64,
    /// Fraction of channels carrying each modality's mean
    #[arg(long, default_value_t = 0.25)]
    hot_fraction: f64,
    #[arg(long, default_value_t = 8)]
    n_blocks: usize,
    #[arg(long, default_value_t = 4)]
    n_heads: usize,
    /// FFN width [default: 4 * d_model]
    #[arg(long)]
    d_ffn: Option<usize>,
    /// Calibration JSONL
    #[arg(long)]
    out: PathBuf,
    /// Toy model checkpoint [default: `--out` with extension `.atvc`]
    #[arg(long)]
    model_out: Option<PathBuf>,
}

/// An error with its exit code and a human-readable message.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn validation(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    fn at(path: &Path) -> impl FnOnce(AtvError) -> Failure + '_ {
        move |e| {
            let mut f = Failure::from(e);
            f.message = format!("{}: {}", path.display(), f.message);
            f
        }
    }
}

impl From<AtvError> for Failure {
    fn from(e: AtvError) -> Self {
        let code = match e {
            AtvError::EmptyCalibration(_) | AtvError::EmptyPathwayCalibration(_) => 3,
            AtvError::Io(_) => 4,
            _ => 2,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure {
        code: 4,
        message: format!("{}: {e}", path.display()),
    }
}

type CliResult<T> = Result<T, Failure>;

fn load(inputs: &Inputs) -> CliResult<(Model, Vec<TokenSequence>)> {
    let model = read_checkpoint(&inputs.model).map_err(Failure::at(&inputs.model))?;
    let data = read_calibration(&inputs.calib, Some(model.config.d_model)).map_err(Failure::at(&inputs.calib))?;
    Ok((model, data))
}

fn run_config(pool: &PoolArgs, sparsity: Option<f64>, pattern: Option<String>) -> CliResult<RunConfig> {
    let c = RunConfig {
        alpha: pool.alpha,
        sparsity,
        pattern,
        signal: pool.signal.into(),
        policy: pool.policy.into(),
        comparison_group: pool.group.into(),
        propagation: pool.propagation.into(),
        text_keep_ratio: pool.text_keep_ratio,
        fixed_budget: pool.fixed_budget,
        seed: pool.seed,
    };
    c.validate()?;
    Ok(c)
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(io_at(path))
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(io_at(path))?))
}

fn prune(args: PruneArgs) -> CliResult<()> {
    let config = run_config(&args.pool, args.sparsity, args.pattern)?;
    let (model, data) = load(&args.inputs)?;
    let start = Instant::now();
    let out = run_atv_pipeline(&model, &data, &config.to_pipeline()?)?;
    let elapsed = args.timing.then(|| start.elapsed().as_secs_f64());
    write_checkpoint(&args.out, &out.model).map_err(Failure::at(&args.out))?;
    let report = PruneRunReport::new(config, &out.report, elapsed);
    write_text(&args.report, &to_report_json(&report)?)
}

fn probe_mot(args: ProbeArgs) -> CliResult<()> {
    if args.sparsity.iter().any(|r| !(0.0..=1.0).contains(r)) {
        return Err(Failure::validation(format!("sparsity levels must lie in [0, 1], got {:?}", args.sparsity)));
    }
    if args.iou_pools.len() != 2 {
        return Err(Failure::validation("--iou-pools takes exactly two pools"));
    }
    if args.iou_pools.iter().any(|&p| p == Policy::Atv) {
        return Err(Failure::validation("IoU pools must be text_only, visual_only or mixed_all"));
    }
    let (model, data) = load(&args.inputs)?;
    let split = calibration_split(data.len());
    let (calibration, heldout) = data.split_at(split);
    if heldout.is_empty() {
        return Err(Failure::validation(format!(
            "{} sample(s) leave nothing for the held-out split",
            data.len()
        )));
    }
    let config = ProbeConfig {
        sparsities: args.sparsity,
        group: args.group.into(),
        propagation: args.propagation.into(),
        iou_pools: (args.iou_pools[0].into(), args.iou_pools[1].into()),
    };
    let grid = run_probe_grid(&model, calibration, heldout, &config)?;
    write_sensitivity_csv(create(&args.grid)?, &grid.cells).map_err(Failure::at(&args.grid))?;
    let iou_path = args.iou.unwrap_or_else(|| {
        let mut p = args.grid.clone().into_os_string();
        p.push(".iou.csv");
        p.into()
    });
    write_iou_csv(create(&iou_path)?, &grid.iou).map_err(Failure::at(&iou_path))?;

    if let Some(path) = args.report {
        let report = ProbeRunReport {
            cells: grid.cells,
            iou: grid.summaries,
        };
        write_text(&path, &to_report_json(&report)?)?;
    }
    Ok(())
}

fn drift_stats(args: DriftArgs) -> CliResult<()> {
    let sparsity = args.pattern.is_none().then_some(args.sparsity);
    let config = run_config(&args.pool, sparsity, args.pattern)?;
    let (model, data) = load(&args.inputs)?;
    let rows = drift_report(&model, &data, &config.to_pipeline()?)?;
    write_drift_csv(create(&args.out)?, &rows).map_err(Failure::at(&args.out))
}

fn gen_synth(args: GenArgs) -> CliResult<()> {
    let spec = SynthSpec {
        seed: args.seed,
        n_samples: args.samples,
        n_visual: args.n_visual,
        n_text: args.n_text,
        d_model: args.d_model,
        separation: args.separation,
        sigma_text: args.sigma_text,
        sigma_visual: args.sigma_visual,
        hot_fraction: args.hot_fraction,
    };
    let config = ModelConfig {
        d_model: args.d_model,
        n_blocks: args.n_blocks,
        n_heads: args.n_heads,
        d_ffn: args.d_ffn.unwrap_or(4 * args.d_model),
    };
    config.validate()?;
    let data = generate(&spec)?;
    let model = toy_model(&ToyModelSpec::new(config, args.seed));
    write_calibration(&args.out, &data.all()).map_err(Failure::at(&args.out))?;
    let model_out = args.model_out.unwrap_or_else(|| args.out.with_extension("atvc"));
    write_checkpoint(&model_out, &model).map_err(Failure::at(&model_out))
}

fn init_threads() -> CliResult<()> {
    let Ok(v) = std::env::var("ATV_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::validation(format!("ATV_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::validation(e.to_string()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = init_threads().and_then(|()| match cli.command {
        Command::Prune(a) => prune(a),
        Command::ProbeMot(a) => probe_mot(a),
        Command::DriftStats(a) => drift_stats(a),
        Command::GenSynth(a) => gen_synth(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
