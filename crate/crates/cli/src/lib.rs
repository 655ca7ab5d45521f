//! `sgcn` command-line driver: dataset generation, training runs and
//! bias/variance sweeps.
//!
//! Exit codes: 0 on success, 1 for usage errors, 2 for runtime failures.

mod options;

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use sgcn::analysis::{bias_variance_decompose, BatchLaw, DecompositionMethod};
use sgcn::graph::{generate_sbm, load_dataset, save_dataset, GraphDataset, SbmConfig, Split};
use sgcn::model::{init_params, Activation, LossKind, ModelParams};
use sgcn::optim::OptimizerKind;
use sgcn::sampler::{SamplerConfig, Strategy};
use sgcn::train::{evaluate, train, RunRecord, TrainConfig, VrMode};
use sgcn::vr::{SnapshotConfig, SnapshotMode};

pub use options::{MeasureArg, MethodArg, SnapshotArg, SweepArg};

/// Column order of the training metrics file.
pub const TRAIN_HEADER: [&str; 11] = [
    "iter",
    "epoch",
    "train_loss",
    "val_loss",
    "grad_mse",
    "bias_sq",
    "variance",
    "grad_norm",
    "f1_val",
    "snapshot_flag",
    "wall_ms",
];

/// Column order of the analysis report.
pub const ANALYZE_HEADER: [&str; 7] = [
    "sampler", "s", "mse", "bias_sq", "variance", "stderr", "method",
];

#[derive(Debug, Parser)]
#[command(
    name = "sgcn",
    version,
    about = "Sampling-based GCN training laboratory"
)]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset.
    #[command(subcommand)]
    Generate(Generate),
    /// Train a GCN and write per-iteration metrics as CSV.
    Train(TrainArgs),
    /// Decompose sampled-gradient error into bias and variance.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Subcommand)]
enum Generate {
    /// Stochastic block model with block-dependent Gaussian features.
    Sbm(SbmArgs),
}

#[derive(Debug, Args)]
struct SbmArgs {
    #[arg(long)]
    nodes: usize,
    #[arg(long)]
    blocks: usize,
    #[arg(long, value_parser = options::probability)]
    p_in: f64,
    #[arg(long, value_parser = options::probability)]
    p_out: f64,
    #[arg(long)]
    feat_dim: usize,
    #[arg(long, default_value_t = 0.5)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SamplerArg {
    Exact,
    Nodewise,
    Fastgcn,
    Ladies,
    Subgraph,
}

impl From<SamplerArg> for Strategy {
    fn from(s: SamplerArg) -> Self {
        match s {
            SamplerArg::Exact => Strategy::Exact,
            SamplerArg::Nodewise => Strategy::Nodewise,
            SamplerArg::Fastgcn => Strategy::Fastgcn,
            SamplerArg::Ladies => Strategy::Ladies,
            SamplerArg::Subgraph => Strategy::Subgraph,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum VrArg {
    None,
    Zeroth,
    Doubly,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum OptimizerArg {
    Adam,
    Sgd,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ActivationArg {
    Relu,
    Elu,
    Identity,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LossArg {
    SoftmaxCe,
    SigmoidBce,
}

/// Model shape flags shared by `train` and `analyze`.
#[derive(Debug, Args)]
struct ModelArgs {
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 256)]
    hidden: usize,
    #[arg(long, value_enum, default_value_t = ActivationArg::Elu)]
    activation: ActivationArg,
    /// Defaults to sigmoid BCE for multi-label data, softmax CE otherwise.
    #[arg(long, value_enum)]
    loss: Option<LossArg>,
}

impl ModelArgs {
    fn init(&self, graph: &GraphDataset, seed: u64) -> Result<ModelParams, CliError> {
        if self.layers == 0 {
            return Err(CliError::Usage("--layers must be at least 1".into()));
        }
        if self.hidden == 0 {
            return Err(CliError::Usage("--hidden must be at least 1".into()));
        }
        let mut dims = vec![graph.num_features()];
        dims.extend(std::iter::repeat_n(self.hidden, self.layers - 1));
        dims.push(graph.num_classes());
        let activation = match self.activation {
            ActivationArg::Relu => Activation::Relu,
            ActivationArg::Elu => Activation::Elu,
            ActivationArg::Identity => Activation::Identity,
        };
        let loss = match self.loss {
            Some(LossArg::SoftmaxCe) => LossKind::SoftmaxCe,
            Some(LossArg::SigmoidBce) => LossKind::SigmoidBce,
            None if graph.is_multilabel() => LossKind::SigmoidBce,
            None => LossKind::SoftmaxCe,
        };
        Ok(init_params(&dims, activation, loss, seed)?)
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = SamplerArg::Exact)]
    sampler: SamplerArg,
    /// Neighbors per node for the nodewise sampler (default 5).
    #[arg(long)]
    neighbors: Option<usize>,
    /// Nodes per layer for fastgcn (default 4096) and ladies (default 512).
    #[arg(long)]
    samples_per_layer: Option<usize>,
    #[arg(long, value_enum, default_value_t = VrArg::None)]
    vr: VrArg,
    /// `full` or `large:<B'>` (default full).
    #[arg(long)]
    snapshot: Option<SnapshotArg>,
    /// Iterations between scheduled snapshots (default 10).
    #[arg(long)]
    snapshot_gap: Option<usize>,
    /// Gap growth per snapshot taken (default 0).
    #[arg(long)]
    snapshot_gap_growth: Option<f64>,
    /// Early-snapshot threshold on embedding norms (default 1.1).
    #[arg(long, value_parser = options::positive_real)]
    alpha: Option<f64>,
    /// Early-snapshot threshold on gradient norms (default 1.1).
    #[arg(long, value_parser = options::positive_real)]
    beta: Option<f64>,
    #[command(flatten)]
    model: ModelArgs,
    /// Mini-batch size; for the subgraph sampler, the subgraph size.
    #[arg(long, default_value_t = 512)]
    batch_size: usize,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Adam)]
    optimizer: OptimizerArg,
    #[arg(long, default_value_t = 0.01, value_parser = options::positive_real)]
    lr: f64,
    #[arg(long, default_value_t = 1)]
    epochs: usize,
    /// Overrides the default of ceil(N_train / batch size).
    #[arg(long)]
    iters_per_epoch: Option<usize>,
    #[arg(long, default_value_t = 1)]
    eval_every: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// `off`, `every:<k>`, `draws:<n>` or `every:<k>,draws:<n>`.
    #[arg(long, default_value = "off")]
    measure_mse: MeasureArg,
    #[arg(long)]
    out: PathBuf,
}

impl TrainArgs {
    fn sampler_config(&self) -> Result<SamplerConfig, CliError> {
        let strategy = Strategy::from(self.sampler);
        let misplaced = |flag: &str| {
            CliError::Usage(format!(
                "{flag} does not apply to --sampler {}",
                strategy.name()
            ))
        };
        if self.neighbors.is_some() && strategy != Strategy::Nodewise {
            return Err(misplaced("--neighbors"));
        }
        if self.samples_per_layer.is_some()
            && !matches!(strategy, Strategy::Fastgcn | Strategy::Ladies)
        {
            return Err(misplaced("--samples-per-layer"));
        }
        let cfg = match strategy {
            Strategy::Exact => SamplerConfig::exact(),
            Strategy::Nodewise => SamplerConfig::nodewise(self.neighbors.unwrap_or(5)),
            Strategy::Fastgcn => SamplerConfig::fastgcn(self.samples_per_layer.unwrap_or(4096)),
            Strategy::Ladies => SamplerConfig::ladies(self.samples_per_layer.unwrap_or(512)),
            Strategy::Subgraph => SamplerConfig::subgraph(self.batch_size),
        };
        Ok(cfg.with_seed(self.seed))
    }

    fn snapshot_config(&self) -> Result<(VrMode, SnapshotConfig), CliError> {
        let vr = match self.vr {
            VrArg::None => VrMode::None,
            VrArg::Zeroth => VrMode::Zeroth,
            VrArg::Doubly => VrMode::Doubly,
        };
        let explicit = [
            ("--snapshot", self.snapshot.is_some()),
            ("--snapshot-gap", self.snapshot_gap.is_some()),
            ("--snapshot-gap-growth", self.snapshot_gap_growth.is_some()),
            ("--alpha", self.alpha.is_some()),
            ("--beta", self.beta.is_some()),
        ];
        if vr == VrMode::None {
            if let Some((flag, _)) = explicit.iter().find(|(_, set)| *set) {
                return Err(CliError::Usage(format!(
                    "{flag} requires --vr zeroth or --vr doubly"
                )));
            }
        }
        if vr == VrMode::Zeroth && self.beta.is_some() {
            return Err(CliError::Usage("--beta only applies to --vr doubly".into()));
        }
        let defaults = SnapshotConfig::default();
        Ok((
            vr,
            SnapshotConfig {
                mode: self.snapshot.map_or(SnapshotMode::FullBatch, |s| s.0),
                gap: self.snapshot_gap.unwrap_or(defaults.gap),
                gap_growth: self.snapshot_gap_growth.unwrap_or(defaults.gap_growth),
                alpha: self.alpha.unwrap_or(defaults.alpha),
                beta: self.beta.unwrap_or(defaults.beta),
            },
        ))
    }

    fn config(&self) -> Result<TrainConfig, CliError> {
        let (vr_mode, snapshot) = self.snapshot_config()?;
        let cfg = TrainConfig {
            sampler: self.sampler_config()?,
            vr_mode,
            snapshot,
            batch_size: self.batch_size,
            epochs: self.epochs,
            iters_per_epoch: self.iters_per_epoch,
            seed: self.seed,
            eval_every: self.eval_every,
            optimizer: match self.optimizer {
                OptimizerArg::Adam => OptimizerKind::Adam,
                OptimizerArg::Sgd => OptimizerKind::Sgd,
            },
            lr: self.lr,
            measure: self.measure_mse.0.clone(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    #[arg(long)]
    data: PathBuf,
    /// Sampler sweep entry such as `exact` or `ladies:1,2,4`; repeatable.
    #[arg(long, required = true)]
    sweep: Vec<SweepArg>,
    /// `enumerate` or `monte-carlo:<n>`.
    #[arg(long, default_value = "enumerate")]
    method: MethodArg,
    /// Uniform batch size; omitted or at least N_train means the full training set.
    #[arg(long)]
    batch_size: Option<usize>,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// One row of the analysis report.
#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct AnalyzeRow {
    pub sampler: String,
    pub s: Option<usize>,
    pub mse: f64,
    pub bias_sq: f64,
    pub variance: f64,
    pub stderr: f64,
    pub method: String,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<sgcn::Error> for CliError {
    fn from(e: sgcn::Error) -> Self {
        match e {
            sgcn::Error::Config(_) => CliError::Usage(e.to_string()),
            sgcn::Error::OracleTooLarge { .. } => CliError::Runtime(format!(
                "{e}; rerun with --method monte-carlo:<n>, a smaller sweep size or a smaller batch"
            )),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

fn io_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

/// Parses `args` (program name first) and runs the command, writing the JSON
/// summary to `stdout` and diagnostics to `stderr`. Returns the exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    let _ = write!(stdout, "{}", e.render());
                    0
                }
                _ => {
                    let _ = write!(stderr, "{}", e.render());
                    1
                }
            };
        }
    };
    init_logging(cli.verbose);
    let result = match &cli.command {
        Command::Generate(Generate::Sbm(a)) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Analyze(a) => cmd_analyze(a),
    };
    match result {
        Ok(summary) => {
            let _ = writeln!(stdout, "{summary}");
            0
        }
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.code()
        }
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).try_init();
}

fn cmd_generate(a: &SbmArgs) -> Result<serde_json::Value, CliError> {
    let cfg = SbmConfig {
        n_nodes: a.nodes,
        n_blocks: a.blocks,
        p_in: a.p_in,
        p_out: a.p_out,
        feat_dim: a.feat_dim,
        noise: a.noise,
        seed: a.seed,
    };
    let graph = generate_sbm(&cfg)?;
    save_dataset(&graph, &a.out)?;
    let masks = graph.masks();
    Ok(json!({
        "command": "generate",
        "out": a.out.display().to_string(),
        "nodes": graph.num_nodes(),
        "edges": graph.edges().len(),
        "features": graph.num_features(),
        "classes": graph.num_classes(),
        "train": masks.train.len(),
        "val": masks.val.len(),
        "test": masks.test.len(),
    }))
}

fn load(dir: &Path) -> Result<GraphDataset, CliError> {
    load_dataset(dir).map_err(|e| CliError::Runtime(e.to_string()))
}

fn cmd_train(a: &TrainArgs) -> Result<serde_json::Value, CliError> {
    let cfg = a.config()?;
    let graph = load(&a.data)?;
    let params = a.model.init(&graph, a.seed)?;

    let file = File::create(&a.out).map_err(|e| io_error(&a.out, e))?;
    let mut writer = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(file);
    writer
        .write_record(TRAIN_HEADER)
        .map_err(|e| io_error(&a.out, e))?;

    let mut iters = 0usize;
    let mut snapshots = 0usize;
    let mut last: Option<RunRecord> = None;
    let mut write_err = None;
    let trained = train(&graph, params, &cfg, &mut |rec: RunRecord| {
        iters += 1;
        snapshots += usize::from(rec.snapshot_flag);
        if let Err(e) = writer.serialize(&rec) {
            write_err = Some(e.to_string());
            return Err(sgcn::Error::State("metrics sink failed".into()));
        }
        last = Some(rec);
        Ok(())
    });
    if let Some(e) = write_err {
        return Err(io_error(&a.out, e));
    }
    let trained = trained?;
    writer.flush().map_err(|e| io_error(&a.out, e))?;

    let split_scores = |split: Split| -> Result<(Option<f64>, Option<f64>), CliError> {
        if graph.masks().get(split).is_empty() {
            return Ok((None, None));
        }
        let (loss, score) = evaluate(&graph, &trained, split)?;
        Ok((Some(loss), Some(score)))
    };
    let (val_loss, f1_val) = split_scores(Split::Val)?;
    let (test_loss, f1_test) = split_scores(Split::Test)?;
    Ok(json!({
        "command": "train",
        "out": a.out.display().to_string(),
        "sampler": cfg.sampler.strategy.name(),
        "vr": cfg.vr_mode,
        "iterations": iters,
        "snapshots": snapshots,
        "train_loss": last.as_ref().map(|r| r.train_loss),
        "val_loss": val_loss,
        "f1_val": f1_val,
        "test_loss": test_loss,
        "f1_test": f1_test,
    }))
}

fn cmd_analyze(a: &AnalyzeArgs) -> Result<serde_json::Value, CliError> {
    let graph = load(&a.data)?;
    let params = a.model.init(&graph, a.seed)?;
    let n_train = graph.train_nodes().len();
    let law = match a.batch_size {
        Some(0) => return Err(CliError::Usage("--batch-size must be at least 1".into())),
        Some(b) if b < n_train => BatchLaw::Uniform(b),
        _ => BatchLaw::Fixed(graph.train_nodes().to_vec()),
    };

    let mut rows = Vec::new();
    for entry in &a.sweep {
        let configs: Vec<(Option<usize>, SamplerConfig)> = match entry.strategy {
            Strategy::Exact => vec![(None, SamplerConfig::exact())],
            strategy => entry
                .sizes
                .iter()
                .map(|&s| {
                    let cfg = match strategy {
                        Strategy::Nodewise => SamplerConfig::nodewise(s),
                        Strategy::Fastgcn => SamplerConfig::fastgcn(s),
                        Strategy::Ladies => SamplerConfig::ladies(s),
                        _ => SamplerConfig::subgraph(s),
                    };
                    (Some(s), cfg)
                })
                .collect(),
        };
        for (s, cfg) in configs {
            let cfg = cfg.with_seed(a.seed);
            cfg.validate()?;
            log::info!("analyzing {} s={s:?}", entry.strategy.name());
            let d = bias_variance_decompose(&graph, &params, &cfg, &law, a.method.0)?;
            rows.push(AnalyzeRow {
                sampler: entry.strategy.name().to_string(),
                s,
                mse: d.mse,
                bias_sq: d.bias_sq,
                variance: d.variance,
                stderr: d.stderr,
                method: d.method.name().to_string(),
            });
        }
    }

    let file = File::create(&a.out).map_err(|e| io_error(&a.out, e))?;
    let mut writer = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(file);
    writer
        .write_record(ANALYZE_HEADER)
        .map_err(|e| io_error(&a.out, e))?;
    for row in &rows {
        writer.serialize(row).map_err(|e| io_error(&a.out, e))?;
    }
    writer.flush().map_err(|e| io_error(&a.out, e))?;

    let method = match a.method.0 {
        sgcn::analysis::AnalysisMethod::Enumerate => DecompositionMethod::Enumerate,
        sgcn::analysis::AnalysisMethod::MonteCarlo(_) => DecompositionMethod::MonteCarlo,
    };
    Ok(json!({
        "command": "analyze",
        "out": a.out.display().to_string(),
        "rows": rows.len(),
        "method": method.name(),
        "max_mse": rows.iter().map(|r| r.mse).fold(0.0, f64::max),
    }))
}
