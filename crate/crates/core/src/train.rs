//! Simulation-free training of the velocity and growth networks.
//!
//! Every pair of consecutive snapshots is coupled by (mini-batch) OET; the
//! semi-coupling gives each pair `(i, j)` a sampling weight `γ0_ij` and a mass
//! ratio `γ1_ij / γ0_ij`. A training sample draws a pair, a time `t ∈ [0,1]`,
//! and a point in the Gaussian tube around the traveling-Dirac path of that
//! pair; the networks regress the path's velocity and growth rate with the
//! path mass as sample weight.

use std::fs;
use std::path::Path;
use std::time::Instant;

use ndarray::{s, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::SnapshotSet;
use crate::geometry::{self, distance, targets_from_params, GeometryError, WfrConfig};
use crate::nn::{layer_dims, AdamConfig, AdamState, Mlp, NnError};
use crate::oet::{minibatch_oet, semi_coupling, OetConfig, OetError, SolveStatus};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("interval {interval}: every source/target distance is at least π·δ = {limit}; increase delta")]
    NoFiniteCost { interval: usize, limit: f64 },
    #[error("non-finite loss at epoch {epoch}: {diagnostics}")]
    NonFinite { epoch: usize, diagnostics: String },
    #[error(transparent)]
    Oet(#[from] OetError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairSampling {
    /// Draw pairs with probability `γ0`, weight by the path mass.
    ProportionalToGamma0,
    /// Draw pairs uniformly, weight by path mass times `γ0 · N_pairs`.
    UniformWithImportanceWeight,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeSampling {
    PerSample,
    PerBatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub hidden: usize,
    /// Number of linear layers.
    pub layers: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self { hidden: 256, layers: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub delta: f64,
    /// Tube width; `None` means `sigma_fraction` times the median
    /// source/target distance of each interval.
    pub sigma: Option<f64>,
    pub sigma_fraction: f64,
    /// Growth-loss weight; `None` means `δ²`.
    pub kappa: Option<f64>,
    /// Optimizer steps; each draws one batch.
    pub epochs: usize,
    /// Samples per interval per step.
    pub batch_size: usize,
    /// Largest OET block.
    pub ot_batch: usize,
    pub oet: OetConfig,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Cosine decay of the learning rate down to this value; `None` keeps it
    /// constant.
    pub lr_final: Option<f64>,
    pub pair_sampling: PairSampling,
    pub time_sampling: TimeSampling,
    pub net: NetConfig,
    pub mass_floor: f64,
    pub tau_eps: f64,
    /// Skip pairs produced by the pure-birth/death fallback.
    pub drop_degenerate_pairs: bool,
    /// Pairs with `γ0` below this fraction of the interval's largest entry
    /// are not sampled.
    pub prune_tol: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            delta: 1.0,
            sigma: None,
            sigma_fraction: 0.02,
            kappa: None,
            epochs: 2000,
            batch_size: 256,
            ot_batch: 2000,
            oet: OetConfig::default(),
            seed: 0,
            adam: AdamConfig::default(),
            lr_final: None,
            pair_sampling: PairSampling::ProportionalToGamma0,
            time_sampling: TimeSampling::PerSample,
            net: NetConfig::default(),
            mass_floor: 1e-4,
            tau_eps: 1e-9,
            drop_degenerate_pairs: false,
            prune_tol: 1e-9,
        }
    }
}

impl TrainConfig {
    pub fn kappa(&self) -> f64 {
        self.kappa.unwrap_or(self.delta * self.delta)
    }

    pub fn wfr(&self) -> WfrConfig {
        WfrConfig {
            delta: self.delta,
            sigma: self.sigma.unwrap_or(0.0),
            tau_eps: self.tau_eps,
            mass_floor: self.mass_floor,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return bad("delta must be positive");
        }
        if !(self.kappa() > 0.0) {
            return bad("kappa must be positive");
        }
        if self.sigma.is_some_and(|s| !(s >= 0.0)) || !(self.sigma_fraction >= 0.0) {
            return bad("sigma must be nonnegative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.ot_batch < 2 {
            return bad("ot_batch must be at least 2");
        }
        if !(self.mass_floor > 0.0 && self.mass_floor < 1.0) {
            return bad("mass_floor must lie in (0, 1)");
        }
        if !(self.adam.lr >= 0.0) || self.lr_final.is_some_and(|l| !(l >= 0.0)) {
            return bad("learning rates must be nonnegative");
        }
        if self.net.layers == 0 || self.net.hidden == 0 {
            return bad("network needs at least one layer and one hidden unit");
        }
        if !(self.prune_tol >= 0.0 && self.prune_tol < 1.0) {
            return bad("prune_tol must lie in [0, 1)");
        }
        self.oet.validate()?;
        Ok(())
    }

    fn learning_rate(&self, epoch: usize) -> f64 {
        match self.lr_final {
            None => self.adam.lr,
            Some(end) => {
                let frac = epoch as f64 / self.epochs.max(1) as f64;
                end + 0.5 * (self.adam.lr - end) * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

/// One sampleable pair of an interval coupling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoupledPair {
    pub source: usize,
    pub target: usize,
    /// `γ1/γ0`, at least `mass_floor`.
    pub ratio: f64,
    /// Normalized `γ0`.
    pub prob: f64,
    pub degenerate: bool,
}

#[derive(Debug, Clone)]
pub struct IntervalCoupling {
    pub index: usize,
    pub t0: f64,
    pub t1: f64,
    pub source: Array2<f64>,
    pub target: Array2<f64>,
    pub pairs: Vec<CoupledPair>,
    /// Running sums of `prob`, for inverse-CDF sampling.
    pub cumulative: Vec<f64>,
    pub sigma: f64,
    pub death_rows: usize,
    pub birth_cols: usize,
    /// Blocks that hit the OET iteration cap.
    pub unconverged_blocks: usize,
}

impl IntervalCoupling {
    /// Builds the sampling table from explicit pairs; probabilities are
    /// renormalized.
    pub fn from_pairs(
        index: usize,
        (t0, t1): (f64, f64),
        source: Array2<f64>,
        target: Array2<f64>,
        mut pairs: Vec<CoupledPair>,
        sigma: f64,
    ) -> Result<Self, TrainError> {
        if !(t1 > t0) {
            return Err(TrainError::Data(format!("interval {index}: times must increase")));
        }
        let total: f64 = pairs.iter().map(|p| p.prob).sum();
        if pairs.is_empty() || !(total > 0.0) {
            return Err(TrainError::Data(format!("interval {index}: no coupled pairs")));
        }
        let mut cumulative = Vec::with_capacity(pairs.len());
        let mut acc = 0.0;
        for p in &mut pairs {
            p.prob /= total;
            acc += p.prob;
            cumulative.push(acc);
        }
        Ok(Self {
            index,
            t0,
            t1,
            source,
            target,
            pairs,
            cumulative,
            sigma,
            death_rows: 0,
            birth_cols: 0,
            unconverged_blocks: 0,
        })
    }

    /// `Σ prob · ratio`, the interval's total mass growth factor.
    pub fn expected_ratio(&self) -> f64 {
        self.pairs.iter().map(|p| p.prob * p.ratio).sum()
    }

    fn sample_proportional(&self, u: f64) -> usize {
        let target = u * self.cumulative.last().copied().unwrap_or(1.0);
        self.cumulative.partition_point(|c| *c <= target).min(self.pairs.len() - 1)
    }
}

fn median_distance(x0: &ArrayView2<f64>, x1: &ArrayView2<f64>) -> f64 {
    // Strided subsample keeps the cost bounded on large snapshots.
    let cap = 1500;
    let stride0 = x0.nrows().div_ceil(cap).max(1);
    let stride1 = x1.nrows().div_ceil(cap).max(1);
    let mut d: Vec<f64> = Vec::new();
    for a in x0.rows().into_iter().step_by(stride0) {
        for b in x1.rows().into_iter().step_by(stride1) {
            d.push(distance(a.as_slice().unwrap(), b.as_slice().unwrap()));
        }
    }
    d.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if d.is_empty() {
        0.0
    } else {
        d[d.len() / 2]
    }
}

/// Shuffle seed of interval `k`'s mini-batches.
pub fn interval_seed(seed: u64, k: usize) -> u64 {
    seed.wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(k as u64 + 1))
}

/// Couples every pair of consecutive snapshots.
pub fn prepare_couplings(snapshots: &SnapshotSet, cfg: &TrainConfig) -> Result<Vec<IntervalCoupling>, TrainError> {
    cfg.validate()?;
    snapshots.validate().map_err(|e| TrainError::Data(e.to_string()))?;
    if snapshots.snapshots.len() < 2 {
        return Err(TrainError::Data("need at least two time points".into()));
    }
    if let Some(s) = snapshots.snapshots.iter().find(|s| s.count() < 1) {
        return Err(TrainError::Data(format!("snapshot at t = {} is empty", s.time)));
    }
    let intervals: Vec<usize> = (0..snapshots.snapshots.len() - 1).collect();
    intervals
        .par_iter()
        .map(|&k| {
            let a = &snapshots.snapshots[k];
            let b = &snapshots.snapshots[k + 1];
            couple_interval(k, (a.time, b.time), &a.points, &b.points, cfg)
        })
        .collect()
}

fn couple_interval(
    k: usize,
    times: (f64, f64),
    x0: &Array2<f64>,
    x1: &Array2<f64>,
    cfg: &TrainConfig,
) -> Result<IntervalCoupling, TrainError> {
    let blocks = minibatch_oet(&x0.view(), &x1.view(), cfg.ot_batch, cfg.delta, &cfg.oet, interval_seed(cfg.seed, k))?;
    if blocks.iter().all(|b| b.plan.cost.iter().all(|c| c.is_infinite())) {
        return Err(TrainError::NoFiniteCost { interval: k, limit: std::f64::consts::PI * cfg.delta });
    }
    let mut pairs = Vec::new();
    let (mut deaths, mut births, mut unconverged) = (0, 0, 0);
    for block in &blocks {
        if block.plan.status == SolveStatus::MaxIters {
            unconverged += 1;
        }
        let sc = semi_coupling(&block.plan, &block.mu0, &block.mu1, cfg.mass_floor);
        deaths += sc.death_rows.len();
        births += sc.birth_cols.len();
        let peak = sc.gamma0.iter().copied().fold(0.0, f64::max);
        let cut = peak * cfg.prune_tol;
        for ((bi, bj), &g0) in sc.gamma0.indexed_iter() {
            if !(g0 > cut) {
                continue;
            }
            let degenerate = sc.death_rows.contains(&bi) || sc.birth_folds.contains(&(bi, bj));
            if degenerate && cfg.drop_degenerate_pairs {
                continue;
            }
            pairs.push(CoupledPair {
                source: block.rows[bi],
                target: block.cols[bj],
                ratio: (sc.gamma1[[bi, bj]] / g0).max(cfg.mass_floor),
                prob: g0,
                degenerate,
            });
        }
    }
    let sigma = cfg.sigma.unwrap_or_else(|| cfg.sigma_fraction * median_distance(&x0.view(), &x1.view()));
    let mut coupling = IntervalCoupling::from_pairs(k, times, x0.clone(), x1.clone(), pairs, sigma)?;
    coupling.death_rows = deaths;
    coupling.birth_cols = births;
    coupling.unconverged_blocks = unconverged;
    Ok(coupling)
}

/// Regression samples from all intervals, concatenated.
#[derive(Debug, Clone)]
pub struct TrainingBatch {
    /// `N × (d+1)`: positions with global time appended.
    pub inputs: Array2<f64>,
    pub u_target: Array2<f64>,
    pub g_target: Vec<f64>,
    pub w: Vec<f64>,
}

impl TrainingBatch {
    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    pub fn positions(&self) -> ArrayView2<'_, f64> {
        let d = self.inputs.ncols() - 1;
        self.inputs.slice(s![.., ..d])
    }

    pub fn times(&self) -> Vec<f64> {
        self.inputs.column(self.inputs.ncols() - 1).to_vec()
    }
}

/// Draws `cfg.batch_size` samples per interval.
pub fn make_batch(
    couplings: &[IntervalCoupling],
    rng: &mut ChaCha8Rng,
    cfg: &TrainConfig,
) -> Result<TrainingBatch, TrainError> {
    let d = couplings.first().map(|c| c.source.ncols()).ok_or_else(|| TrainError::Data("no couplings".into()))?;
    let b = cfg.batch_size;
    let n = b * couplings.len();
    let wfr = cfg.wfr();
    let mut inputs = Array2::zeros((n, d + 1));
    let mut u_target = Array2::zeros((n, d));
    let mut g_target = vec![0.0; n];
    let mut w = vec![0.0; n];
    let mut row = 0;
    for c in couplings {
        let dt = c.t1 - c.t0;
        let batch_t: f64 = rng.gen();
        for _ in 0..b {
            let pair_idx = match cfg.pair_sampling {
                PairSampling::ProportionalToGamma0 => c.sample_proportional(rng.gen()),
                PairSampling::UniformWithImportanceWeight => rng.gen_range(0..c.pairs.len()),
            };
            let pair = c.pairs[pair_idx];
            let t = match cfg.time_sampling {
                TimeSampling::PerSample => rng.gen(),
                TimeSampling::PerBatch => batch_t,
            };
            let x0 = c.source.row(pair.source);
            let x1 = c.target.row(pair.target);
            let p = geometry::traveling_dirac(x0.as_slice().unwrap(), x1.as_slice().unwrap(), 1.0, pair.ratio, &wfr)?;
            let tg = targets_from_params(&p, t);
            for k in 0..d {
                let z: f64 = rng.sample(StandardNormal);
                inputs[[row, k]] = tg.mean[k] + c.sigma * z;
                u_target[[row, k]] = tg.u[k] / dt;
            }
            inputs[[row, d]] = c.t0 + dt * t;
            g_target[row] = tg.g / dt;
            w[row] = match cfg.pair_sampling {
                PairSampling::ProportionalToGamma0 => tg.m,
                PairSampling::UniformWithImportanceWeight => tg.m * pair.prob * c.pairs.len() as f64,
            };
            row += 1;
        }
    }
    Ok(TrainingBatch { inputs, u_target, g_target, w })
}

/// Loss value, its two parts, and gradients with respect to the network
/// outputs.
#[derive(Debug, Clone)]
pub struct LossParts {
    pub loss: f64,
    pub velocity: f64,
    pub growth: f64,
    pub grad_v: Array2<f64>,
    pub grad_g: Array2<f64>,
}

/// `mean_n w·(|v − u|² + κ(g − g*)²)` for given network outputs.
pub fn cufm_loss_from_outputs(
    v: &ArrayView2<f64>,
    g: &ArrayView2<f64>,
    batch: &TrainingBatch,
    kappa: f64,
) -> LossParts {
    let n = batch.len();
    let inv = 1.0 / n as f64;
    let mut grad_v = Array2::zeros(v.raw_dim());
    let mut grad_g = Array2::zeros(g.raw_dim());
    let (mut vel, mut gro) = (0.0, 0.0);
    for r in 0..n {
        let w = batch.w[r];
        let mut sq = 0.0;
        for k in 0..v.ncols() {
            let e = v[[r, k]] - batch.u_target[[r, k]];
            sq += e * e;
            grad_v[[r, k]] = 2.0 * w * e * inv;
        }
        let e = g[[r, 0]] - batch.g_target[r];
        grad_g[[r, 0]] = 2.0 * kappa * w * e * inv;
        vel += w * sq;
        gro += kappa * w * e * e;
    }
    LossParts { loss: (vel + gro) * inv, velocity: vel * inv, growth: gro * inv, grad_v, grad_g }
}

pub fn cufm_loss(models: &ModelPair, batch: &TrainingBatch, kappa: f64) -> Result<LossParts, TrainError> {
    let v = models.velocity.forward_batch(&batch.inputs.view())?;
    let g = models.growth.forward_batch(&batch.inputs.view())?;
    Ok(cufm_loss_from_outputs(&v.view(), &g.view(), batch, kappa))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelPair {
    pub velocity: Mlp,
    pub growth: Mlp,
}

pub const VELOCITY_FILE: &str = "velocity.ckpt";
pub const GROWTH_FILE: &str = "growth.ckpt";

impl ModelPair {
    pub fn new(dim: usize, net: &NetConfig, seed: u64) -> Result<Self, TrainError> {
        Ok(Self {
            velocity: Mlp::new(&layer_dims(dim + 1, net.hidden, net.layers, dim), seed)?,
            growth: Mlp::new(&layer_dims(dim + 1, net.hidden, net.layers, 1), seed ^ 0x5bd1_e995)?,
        })
    }

    /// Spatial dimension `d`.
    pub fn dim(&self) -> usize {
        self.velocity.output_dim()
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let d = self.dim();
        if self.velocity.input_dim() != d + 1 || self.growth.input_dim() != d + 1 || self.growth.output_dim() != 1 {
            return Err(TrainError::Config(format!(
                "inconsistent networks: velocity {:?}, growth {:?}",
                self.velocity.dims(),
                self.growth.dims()
            )));
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<(), TrainError> {
        fs::create_dir_all(dir)?;
        self.velocity.save(&dir.join(VELOCITY_FILE))?;
        self.growth.save(&dir.join(GROWTH_FILE))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, TrainError> {
        let pair = Self { velocity: Mlp::load(&dir.join(VELOCITY_FILE))?, growth: Mlp::load(&dir.join(GROWTH_FILE))? };
        pair.validate()?;
        Ok(pair)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub loss: f64,
    pub velocity_loss: f64,
    pub growth_loss: f64,
    pub wall_time: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub models: ModelPair,
    pub log: Vec<LogRecord>,
    pub couplings: Vec<IntervalCoupling>,
}

/// Couples the snapshots and trains both networks.
pub fn train(snapshots: &SnapshotSet, cfg: &TrainConfig) -> Result<TrainOutput, TrainError> {
    let couplings = prepare_couplings(snapshots, cfg)?;
    let models = ModelPair::new(snapshots.dim(), &cfg.net, cfg.seed)?;
    let (models, log) = train_on_couplings(&couplings, models, cfg)?;
    Ok(TrainOutput { models, log, couplings })
}

/// Runs `cfg.epochs` optimizer steps starting from `models`.
pub fn train_on_couplings(
    couplings: &[IntervalCoupling],
    mut models: ModelPair,
    cfg: &TrainConfig,
) -> Result<(ModelPair, Vec<LogRecord>), TrainError> {
    cfg.validate()?;
    models.validate()?;
    if couplings.iter().any(|c| c.source.ncols() != models.dim()) {
        return Err(TrainError::Config("network and data dimensions differ".into()));
    }
    let kappa = cfg.kappa();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut adam_v = AdamState::new(&models.velocity, cfg.adam);
    let mut adam_g = AdamState::new(&models.growth, cfg.adam);
    let started = Instant::now();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let batch = make_batch(couplings, &mut rng, cfg)?;
        let cache_v = models.velocity.forward_cached(&batch.inputs.view())?;
        let cache_g = models.growth.forward_cached(&batch.inputs.view())?;
        let parts = cufm_loss_from_outputs(&cache_v.output().view(), &cache_g.output().view(), &batch, kappa);
        if !parts.loss.is_finite() {
            return Err(TrainError::NonFinite { epoch, diagnostics: batch_diagnostics(&batch, &parts) });
        }
        let grads_v = models.velocity.backward(&cache_v, &parts.grad_v.view());
        let grads_g = models.growth.backward(&cache_g, &parts.grad_g.view());
        let lr = cfg.learning_rate(epoch);
        adam_v.config.lr = lr;
        adam_g.config.lr = lr;
        adam_v.step(&mut models.velocity, &grads_v);
        adam_g.step(&mut models.growth, &grads_g);
        log.push(LogRecord {
            epoch,
            loss: parts.loss,
            velocity_loss: parts.velocity,
            growth_loss: parts.growth,
            wall_time: started.elapsed().as_secs_f64(),
        });
    }
    if !models.velocity.is_finite() || !models.growth.is_finite() {
        return Err(TrainError::NonFinite { epoch: cfg.epochs, diagnostics: "parameters became non-finite".into() });
    }
    Ok((models, log))
}

fn batch_diagnostics(batch: &TrainingBatch, parts: &LossParts) -> String {
    let max_abs = |it: &mut dyn Iterator<Item = f64>| it.fold(0.0f64, |m, v| m.max(v.abs()));
    format!(
        "velocity part {}, growth part {}, max |u*| {}, max |g*| {}, max w {}, max |x| {}",
        parts.velocity,
        parts.growth,
        max_abs(&mut batch.u_target.iter().copied()),
        max_abs(&mut batch.g_target.iter().copied()),
        max_abs(&mut batch.w.iter().copied()),
        max_abs(&mut batch.inputs.iter().copied()),
    )
}

/// Writes the log as one JSON object per line.
pub fn write_log(log: &[LogRecord], path: &Path) -> Result<(), TrainError> {
    let mut text = String::new();
    for rec in log {
        text.push_str(&serde_json::to_string(rec).expect("log record serializes"));
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::Snapshot;
    use ndarray::array;

    fn two_points(ratio_target: usize) -> SnapshotSet {
        let target = Array2::from_shape_fn((ratio_target, 2), |(i, _)| 0.5 + 1e-3 * i as f64);
        SnapshotSet {
            snapshots: vec![
                Snapshot { time: 0.0, points: array![[0.0, 0.0]], growth: None },
                Snapshot { time: 1.0, points: target, growth: None },
            ],
            seed: None,
            generator: serde_json::Value::Null,
        }
    }

    #[test]
    fn coupling_counts_and_ratio() {
        let mut set = two_points(2);
        set.snapshots.push(Snapshot { time: 2.0, points: array![[0.6, 0.1], [0.7, 0.0]], growth: None });
        let cfg = TrainConfig::default();
        let cs = prepare_couplings(&set, &cfg).unwrap();
        assert_eq!(cs.len(), 2);
        let total: f64 = cs[0].pairs.iter().map(|p| p.prob).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!((cs[0].expected_ratio() - 2.0).abs() < 1e-9);
        assert!(cs[0].pairs.iter().all(|p| p.ratio >= cfg.mass_floor));
    }

    #[test]
    fn unreachable_interval_is_reported() {
        let mut set = two_points(1);
        set.snapshots[1].points = array![[100.0, 0.0]];
        let err = prepare_couplings(&set, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, TrainError::NoFiniteCost { .. }));
    }

    #[test]
    fn zero_width_tube_lies_on_geodesic() {
        let cfg = TrainConfig { sigma: Some(0.0), batch_size: 16, ..TrainConfig::default() };
        let cs = prepare_couplings(&two_points(1), &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = make_batch(&cs, &mut rng, &cfg).unwrap();
        let p = geometry::traveling_dirac(&[0.0, 0.0], &[0.5, 0.5], 1.0, cs[0].pairs[0].ratio, &cfg.wfr()).unwrap();
        for r in 0..batch.len() {
            let t = batch.inputs[[r, 2]];
            let pos = p.position(t);
            assert!((batch.inputs[[r, 0]] - pos[0]).abs() < 1e-12);
            assert!((batch.inputs[[r, 1]] - pos[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn pure_growth_targets() {
        // Same point, mass ratio 4, interval of length 2.
        let source = array![[0.3, 0.3]];
        let pairs = vec![CoupledPair { source: 0, target: 0, ratio: 4.0, prob: 1.0, degenerate: false }];
        let c = IntervalCoupling::from_pairs(0, (1.0, 3.0), source.clone(), source, pairs, 0.0).unwrap();
        let cfg = TrainConfig { batch_size: 64, ..TrainConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = make_batch(&[c], &mut rng, &cfg).unwrap();
        for r in 0..batch.len() {
            let t = (batch.inputs[[r, 2]] - 1.0) / 2.0;
            let m = (1.0 + t) * (1.0 + t);
            assert!((batch.g_target[r] - (2.0 * t + 2.0) / m / 2.0).abs() < 1e-12);
            assert!((batch.w[r] - m).abs() < 1e-12);
            assert_eq!(batch.u_target[[r, 0]], 0.0);
        }
    }

    #[test]
    fn loss_examples() {
        let batch = TrainingBatch {
            inputs: array![[0.0, 0.5], [1.0, 0.25]],
            u_target: array![[1.0], [-2.0]],
            g_target: vec![0.5, 0.0],
            w: vec![2.0, 1.0],
        };
        let v = array![[1.0], [-2.0]];
        let g = array![[0.5], [0.0]];
        let exact = cufm_loss_from_outputs(&v.view(), &g.view(), &batch, 3.0);
        assert_eq!(exact.loss, 0.0);
        assert!(exact.grad_v.iter().all(|x| *x == 0.0));

        let zero_v = Array2::zeros((2, 1));
        let zero_g = Array2::zeros((2, 1));
        let parts = cufm_loss_from_outputs(&zero_v.view(), &zero_g.view(), &batch, 3.0);
        // (2·(1 + 3·0.25) + 1·4) / 2
        assert!((parts.loss - 3.75).abs() < 1e-15);
        assert!((parts.velocity - 3.0).abs() < 1e-15);
        assert!((parts.growth - 0.75).abs() < 1e-15);
        assert!((parts.grad_v[[0, 0]] - (-2.0)).abs() < 1e-15);
        assert!((parts.grad_g[[0, 0]] - (-3.0)).abs() < 1e-15);
    }

    #[test]
    fn zero_learning_rate_leaves_networks() {
        let cfg = TrainConfig {
            epochs: 1,
            adam: AdamConfig { lr: 0.0, ..AdamConfig::default() },
            net: NetConfig { hidden: 8, layers: 2 },
            batch_size: 8,
            ..TrainConfig::default()
        };
        let set = two_points(1);
        let cs = prepare_couplings(&set, &cfg).unwrap();
        let start = ModelPair::new(2, &cfg.net, 0).unwrap();
        let (end, log) = train_on_couplings(&cs, start.clone(), &cfg).unwrap();
        assert_eq!(end, start);
        assert_eq!(log.len(), 1);
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig { kappa: Some(0.0), ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { batch_size: 0, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        assert_eq!(TrainConfig::default().kappa(), 1.0);
        let text = toml::to_string(&TrainConfig::default()).unwrap();
        let back: TrainConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, TrainConfig::default());
        assert!(toml::from_str::<TrainConfig>("unknown_key = 1").is_err());
    }
}
