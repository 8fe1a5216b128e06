//! `wfrfm` command line: generate, couple, train, infer, evaluate, action.
//!
//! Settings come from an optional TOML file (`--config`), overridden by
//! flags. The effective settings are written as `run_config.toml` into every
//! output directory; commands that read a model directory start from the
//! `run_config.toml` found there when no `--config` is given.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data error,
//! 4 numerical failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::datagen::{
    gaussian_mixture_snapshots, load_snapshots, save_snapshots, simulate_gene, DataError, GeneSimParams, MixtureSpec,
    SnapshotSet,
};
use crate::infer::{
    evaluate_fields, integrate_through, predicted_weights, trajectory_action, write_trajectory, ActionWeights,
    InferError,
};
use crate::metrics::{evaluate, EvalConfig, MetricsError};
use crate::nn::NnError;
use crate::oet::{dump_plan, minibatch_oet, Epsilon, OetError};
use crate::train::{interval_seed, train, write_log, ModelPair, TrainConfig, TrainError};

pub const CONFIG_FILE: &str = "run_config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferSettings {
    /// Euler step; `None` means 1/400 of the time span.
    pub dt: Option<f64>,
    pub action_weights: ActionWeights,
    /// Points per axis of the exported growth grid.
    pub grid: usize,
}

impl Default for InferSettings {
    fn default() -> Self {
        Self { dt: None, action_weights: ActionWeights::default(), grid: 41 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub gene: GeneSimParams,
    pub mixture: MixtureSpec,
    pub infer: InferSettings,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        self.train.validate()?;
        self.gene.validate()?;
        self.mixture.validate()?;
        if self.infer.dt.is_some_and(|d| !(d > 0.0)) {
            return Err(CliError::Usage("infer.dt must be positive".into()));
        }
        if self.infer.grid < 2 {
            return Err(CliError::Usage("infer.grid must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Params(_) => CliError::Usage(e.to_string()),
            DataError::PopulationCap { .. } => CliError::Numerical(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<OetError> for CliError {
    fn from(e: OetError) -> Self {
        match e {
            OetError::Invalid(_) => CliError::Usage(e.to_string()),
            OetError::Io(_) => CliError::Data(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<NnError> for CliError {
    fn from(e: NnError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => CliError::Usage(e.to_string()),
            TrainError::Oet(inner) => inner.into(),
            TrainError::NonFinite { .. } | TrainError::Geometry(_) => CliError::Numerical(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<InferError> for CliError {
    fn from(e: InferError) -> Self {
        match e {
            InferError::NonFinite { .. } => CliError::Numerical(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::Infer(inner) => inner.into(),
            MetricsError::ZeroVariance(_) => CliError::Numerical(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "wfrfm", version, about = "Unbalanced flow matching for population snapshots")]
pub struct Cli {
    /// TOML settings file; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "WFRFM_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a synthetic snapshot dataset.
    Generate(GenerateArgs),
    /// Solve the OET couplings between consecutive snapshots and dump them.
    Couple(CoupleArgs),
    /// Train the velocity and growth networks.
    Train(TrainArgs),
    /// Integrate the first snapshot forward and export trajectories.
    Infer(ModelArgs),
    /// Score the propagated population against every later snapshot.
    Evaluate(ModelArgs),
    /// Report the path action of the propagated population.
    Action(ModelArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Dataset {
    Gene,
    Mixture,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    pub dataset: Dataset,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Mixture dimension.
    #[arg(long)]
    pub dim: Option<usize>,
}

#[derive(Debug, Args, Default)]
pub struct SolverFlags {
    #[arg(long)]
    pub delta: Option<f64>,
    /// Absolute entropic regularization.
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub ot_batch: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct CoupleArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub solver: SolverFlags,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub solver: SolverFlags,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub kappa: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Directory holding the checkpoints.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
}

fn load_config(explicit: Option<&Path>, fallback_dir: Option<&Path>) -> Result<RunConfig, CliError> {
    let path = match explicit {
        Some(p) => Some(p.to_path_buf()),
        None => fallback_dir.map(|d| d.join(CONFIG_FILE)).filter(|p| p.exists()),
    };
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(&p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))
        }
    }
}

fn echo_config(cfg: &RunConfig, dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(io_error(dir))?;
    let path = dir.join(CONFIG_FILE);
    let text = toml::to_string(cfg).map_err(|e| CliError::Usage(e.to_string()))?;
    fs::write(&path, text).map_err(io_error(&path))?;
    eprintln!("effective configuration written to {}", path.display());
    Ok(())
}

fn apply_solver(cfg: &mut RunConfig, f: &SolverFlags) {
    if let Some(d) = f.delta {
        cfg.train.delta = d;
    }
    if let Some(e) = f.epsilon {
        cfg.train.oet.epsilon = Epsilon::Absolute(e);
    }
    if let Some(b) = f.ot_batch {
        cfg.train.ot_batch = b;
    }
    if let Some(s) = f.seed {
        cfg.train.seed = s;
    }
}

/// Parses `args` (program name first), runs the command, and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    if let Some(n) = cli.threads {
        // A second call in the same process fails harmlessly; the first
        // setting stays in force.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Generate(a) => cmd_generate(cli, a),
        Command::Couple(a) => cmd_couple(cli, a),
        Command::Train(a) => cmd_train(cli, a),
        Command::Infer(a) => cmd_infer(cli, a),
        Command::Evaluate(a) => cmd_evaluate(cli, a),
        Command::Action(a) => cmd_action(cli, a),
    }
}

fn summarize(set: &SnapshotSet) -> String {
    format!("dim {}, times {:?}, counts {:?}", set.dim(), set.times(), set.counts())
}

pub fn cmd_generate(cli: &Cli, a: &GenerateArgs) -> Result<(), CliError> {
    let mut cfg = load_config(cli.config.as_deref(), None)?;
    if let Some(d) = a.dim {
        cfg.mixture = MixtureSpec { dim: d, ..cfg.mixture };
    }
    cfg.validate()?;
    let set = match a.dataset {
        Dataset::Gene => simulate_gene(&cfg.gene, a.seed)?.snapshots,
        Dataset::Mixture => gaussian_mixture_snapshots(&cfg.mixture, a.seed)?,
    };
    save_snapshots(&set, &a.out)?;
    echo_config(&cfg, &a.out)?;
    println!("{}", summarize(&set));
    Ok(())
}

#[derive(Debug, Serialize)]
struct BlockSummary {
    interval: usize,
    block: usize,
    file: String,
    rows: Vec<usize>,
    cols: Vec<usize>,
    objective: f64,
    iterations: usize,
}

pub fn cmd_couple(cli: &Cli, a: &CoupleArgs) -> Result<(), CliError> {
    let mut cfg = load_config(cli.config.as_deref(), None)?;
    apply_solver(&mut cfg, &a.solver);
    cfg.validate()?;
    let data = load_snapshots(&a.data)?;
    let t = &cfg.train;
    let mut summary = Vec::new();
    for (k, w) in data.snapshots.windows(2).enumerate() {
        let blocks = minibatch_oet(
            &w[0].points.view(),
            &w[1].points.view(),
            t.ot_batch,
            t.delta,
            &t.oet,
            interval_seed(t.seed, k),
        )?;
        for (b, block) in blocks.iter().enumerate() {
            let stem = format!("plan_{k}_{b}");
            let meta = dump_plan(&a.out, &stem, &block.plan, &block.mu0, &block.mu1, t.delta)?;
            summary.push(BlockSummary {
                interval: k,
                block: b,
                file: format!("{stem}.txt"),
                rows: block.rows.clone(),
                cols: block.cols.clone(),
                objective: meta.objective,
                iterations: meta.iterations,
            });
        }
    }
    let path = a.out.join("couplings.json");
    fs::write(&path, serde_json::to_string_pretty(&summary).expect("summary serializes")).map_err(io_error(&path))?;
    echo_config(&cfg, &a.out)?;
    println!("{} intervals, {} blocks written to {}", data.snapshots.len() - 1, summary.len(), a.out.display());
    Ok(())
}

pub fn cmd_train(cli: &Cli, a: &TrainArgs) -> Result<(), CliError> {
    let mut cfg = load_config(cli.config.as_deref(), None)?;
    apply_solver(&mut cfg, &a.solver);
    let t = &mut cfg.train;
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.lr {
        t.adam.lr = v;
    }
    if let Some(v) = a.hidden {
        t.net.hidden = v;
    }
    if let Some(v) = a.layers {
        t.net.layers = v;
    }
    if a.sigma.is_some() {
        t.sigma = a.sigma;
    }
    if a.kappa.is_some() {
        t.kappa = a.kappa;
    }
    cfg.validate()?;
    let data = load_snapshots(&a.data)?;
    echo_config(&cfg, &a.out)?;
    let out = train(&data, &cfg.train)?;
    out.models.save(&a.out)?;
    write_log(&out.log, &a.out.join("train_log.jsonl"))?;
    let last = out.log.last().map(|r| r.loss).unwrap_or(f64::NAN);
    println!("trained {} epochs, final loss {last:.6e}, checkpoints in {}", cfg.train.epochs, a.out.display());
    Ok(())
}

struct Loaded {
    cfg: RunConfig,
    models: ModelPair,
    data: SnapshotSet,
}

fn load_model_run(cli: &Cli, a: &ModelArgs) -> Result<Loaded, CliError> {
    let mut cfg = load_config(cli.config.as_deref(), Some(&a.model))?;
    if a.dt.is_some() {
        cfg.infer.dt = a.dt;
    }
    if let Some(d) = a.delta {
        cfg.train.delta = d;
    }
    cfg.validate()?;
    let models = ModelPair::load(&a.model)?;
    let data = load_snapshots(&a.data)?;
    if data.dim() != models.dim() {
        return Err(CliError::Data(format!("model expects dimension {}, data has {}", models.dim(), data.dim())));
    }
    Ok(Loaded { cfg, models, data })
}

fn eval_config(cfg: &RunConfig) -> EvalConfig {
    EvalConfig {
        dt: cfg.infer.dt,
        seed: cfg.train.seed,
        delta: cfg.train.delta,
        action_weights: cfg.infer.action_weights,
    }
}

/// Growth field on a grid over the first two coordinates at each snapshot
/// time; remaining coordinates sit at the snapshot mean.
fn growth_grid(models: &ModelPair, data: &SnapshotSet, n: usize) -> Result<String, CliError> {
    let d = data.dim();
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for s in &data.snapshots {
        for row in s.points.rows() {
            for c in 0..d.min(2) {
                lo[c] = lo[c].min(row[c]);
                hi[c] = hi[c].max(row[c]);
            }
        }
    }
    let axes = d.min(2);
    let mut out = String::from("time");
    for c in 0..axes {
        out.push_str(&format!(",x{c}"));
    }
    out.push_str(",growth\n");
    let side = |c: usize, k: usize| {
        let pad = 0.05 * (hi[c] - lo[c]);
        lo[c] - pad + (hi[c] - lo[c] + 2.0 * pad) * k as f64 / (n - 1) as f64
    };
    for s in &data.snapshots {
        let mean = s.points.mean_axis(ndarray::Axis(0)).expect("snapshot is nonempty");
        let count = if axes == 2 { n * n } else { n };
        let mut pts = Array2::zeros((count, d));
        for r in 0..count {
            pts.row_mut(r).assign(&mean);
            pts[[r, 0]] = side(0, r % n);
            if axes == 2 {
                pts[[r, 1]] = side(1, r / n);
            }
        }
        let (_, g) = evaluate_fields(models, &pts.view(), s.time)?;
        for r in 0..count {
            out.push_str(&format!("{:e}", s.time));
            for c in 0..axes {
                out.push_str(&format!(",{:e}", pts[[r, c]]));
            }
            out.push_str(&format!(",{:e}\n", g[r]));
        }
    }
    Ok(out)
}

pub fn cmd_infer(cli: &Cli, a: &ModelArgs) -> Result<(), CliError> {
    let l = load_model_run(cli, a)?;
    let out_dir = a.out.clone().ok_or_else(|| CliError::Usage("infer needs --out".into()))?;
    let times = l.data.times();
    let (t0, t_end) = (times[0], *times.last().unwrap());
    let dt = l.cfg.infer.dt.unwrap_or((t_end - t0) / 400.0);
    let traj = integrate_through(&l.models, &l.data.snapshots[0].points.view(), t0, t_end, dt, &times)?;
    let snaps = predicted_weights(&traj, &times)?;
    write_trajectory(&snaps, &out_dir)?;
    let grid = growth_grid(&l.models, &l.data, l.cfg.infer.grid)?;
    let path = out_dir.join("growth_grid.csv");
    fs::write(&path, grid).map_err(io_error(&path))?;
    echo_config(&l.cfg, &out_dir)?;
    for s in &snaps {
        println!("t = {}: mass ratio {:.6}", s.time, s.mass_ratio);
    }
    Ok(())
}

pub fn cmd_evaluate(cli: &Cli, a: &ModelArgs) -> Result<(), CliError> {
    let l = load_model_run(cli, a)?;
    let (report, _) = evaluate(&l.models, &l.data, &eval_config(&l.cfg))?;
    for m in &report.times {
        println!("t = {}: w1 {:.6}, rme {:.6}, n_pred {:.2}, n_true {}", m.time, m.w1, m.rme, m.n_pred, m.n_true);
    }
    if let Some(c) = report.growth_correlation {
        println!("growth correlation {c:.6}");
    }
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir).map_err(io_error(dir))?;
        report.write(&dir.join("report.json"))?;
        echo_config(&l.cfg, dir)?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct ActionReport {
    action: f64,
    delta: f64,
    dt: f64,
    weights: ActionWeights,
}

pub fn cmd_action(cli: &Cli, a: &ModelArgs) -> Result<(), CliError> {
    let l = load_model_run(cli, a)?;
    let times = l.data.times();
    let (t0, t_end) = (times[0], *times.last().unwrap());
    let dt = l.cfg.infer.dt.unwrap_or((t_end - t0) / 400.0);
    let traj = integrate_through(&l.models, &l.data.snapshots[0].points.view(), t0, t_end, dt, &times)?;
    let action = trajectory_action(&traj, &l.models, l.cfg.train.delta, l.cfg.infer.action_weights)?;
    println!("action {action:.6}");
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir).map_err(io_error(dir))?;
        let rep = ActionReport { action, delta: l.cfg.train.delta, dt, weights: l.cfg.infer.action_weights };
        let path = dir.join("action.json");
        fs::write(&path, serde_json::to_string_pretty(&rep).expect("report serializes")).map_err(io_error(&path))?;
        echo_config(&l.cfg, dir)?;
    }
    Ok(())
}
