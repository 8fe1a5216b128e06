//! Evaluation metrics: exact weighted W1, relative mass error, and growth
//! correlation.

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::SnapshotSet;
use crate::geometry::distance;
use crate::infer::{
    evaluate_fields, integrate_through, predicted_weights, trajectory_action, ActionWeights, InferError, Trajectory,
};
use crate::train::ModelPair;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("correlation undefined: {0} has zero variance")]
    ZeroVariance(&'static str),
    #[error(transparent)]
    Infer(#[from] InferError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub const SUBSAMPLE_CAP: usize = 1024;

#[derive(Debug, Clone, PartialEq)]
pub struct WeightedCloud {
    pub points: Array2<f64>,
    /// Nonnegative, summing to one.
    pub weights: Vec<f64>,
}

impl WeightedCloud {
    /// Normalizes `weights`; they must be nonnegative with a positive sum.
    pub fn new(points: Array2<f64>, weights: Vec<f64>) -> Result<Self, MetricsError> {
        if points.nrows() == 0 || points.nrows() != weights.len() {
            return Err(MetricsError::Invalid(format!("{} points with {} weights", points.nrows(), weights.len())));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(MetricsError::Invalid("points must be finite".into()));
        }
        if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(MetricsError::Invalid("weights must be finite and nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(MetricsError::Invalid("weights sum to zero".into()));
        }
        Ok(Self { points, weights: weights.into_iter().map(|w| w / total).collect() })
    }

    pub fn uniform(points: Array2<f64>) -> Result<Self, MetricsError> {
        let n = points.nrows();
        Self::new(points, vec![1.0; n])
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// At most `cap` distinct atoms drawn with probability proportional to
    /// weight; repeated draws add up. Clouds within the cap come back as is.
    pub fn subsample(&self, cap: usize, seed: u64) -> Self {
        if self.len() <= cap {
            return self.clone();
        }
        let mut cumulative = Vec::with_capacity(self.len());
        let mut acc = 0.0;
        for w in &self.weights {
            acc += w;
            cumulative.push(acc);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for _ in 0..cap {
            let u = rng.gen::<f64>() * acc;
            let i = cumulative.partition_point(|c| *c <= u).min(self.len() - 1);
            *counts.entry(i).or_default() += 1;
        }
        let rows: Vec<usize> = counts.keys().copied().collect();
        Self {
            points: self.points.select(ndarray::Axis(0), &rows),
            weights: counts.values().map(|c| *c as f64 / cap as f64).collect(),
        }
    }
}

/// Exact transport solution with its dual certificate.
#[derive(Debug, Clone)]
pub struct W1Solution {
    pub value: f64,
    /// Basic cells `(i, j, flow)`.
    pub flows: Vec<(usize, usize, f64)>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub pivots: usize,
    /// True when the simplex hit its pivot cap and the entropic
    /// approximation was returned instead.
    pub fallback: bool,
}

fn cost_matrix(p: &ArrayView2<f64>, q: &ArrayView2<f64>) -> Array2<f64> {
    Array2::from_shape_fn((p.nrows(), q.nrows()), |(i, j)| {
        distance(p.row(i).as_slice().unwrap(), q.row(j).as_slice().unwrap())
    })
}

/// W1 between two clouds after weight-proportional subsampling to
/// [`SUBSAMPLE_CAP`] atoms.
pub fn wasserstein1(p: &WeightedCloud, q: &WeightedCloud, seed: u64) -> Result<W1Solution, MetricsError> {
    if p.points.ncols() != q.points.ncols() {
        return Err(MetricsError::Invalid("clouds differ in dimension".into()));
    }
    let ps = p.subsample(SUBSAMPLE_CAP, seed);
    let qs = q.subsample(SUBSAMPLE_CAP, seed ^ 0xa5a5_a5a5);
    let cost = cost_matrix(&ps.points.view(), &qs.points.view());
    Ok(transport(&ps.weights, &qs.weights, &cost, None))
}

/// Transportation simplex with block pricing. `pivot_cap` defaults to a
/// generous multiple of the problem size; exceeding it switches to the
/// entropic approximation.
pub fn transport(a: &[f64], b: &[f64], cost: &Array2<f64>, pivot_cap: Option<usize>) -> W1Solution {
    let (n, m) = cost.dim();
    let cap = pivot_cap.unwrap_or(200 * (n + m) * (n + m).max(50));
    let mut solver = Simplex::new(a, b, cost);
    match solver.run(cap) {
        Some(pivots) => solver.solution(pivots),
        None => {
            let value = entropic_w1(a, b, cost);
            W1Solution { value, flows: Vec::new(), u: Vec::new(), v: Vec::new(), pivots: cap, fallback: true }
        }
    }
}

struct Simplex<'a> {
    cost: &'a Array2<f64>,
    n: usize,
    m: usize,
    /// Basic cells; row node `i`, column node `n + j`.
    arcs: Vec<(usize, usize, f64)>,
    adj: Vec<Vec<usize>>,
    u: Vec<f64>,
    v: Vec<f64>,
    tol: f64,
}

impl<'a> Simplex<'a> {
    /// Northwest-corner start on supplies and demands scaled to equal totals.
    fn new(a: &[f64], b: &[f64], cost: &'a Array2<f64>) -> Self {
        let (n, m) = cost.dim();
        let sa: f64 = a.iter().sum();
        let sb: f64 = b.iter().sum();
        let mut supply: Vec<f64> = a.iter().map(|x| x / sa).collect();
        let mut demand: Vec<f64> = b.iter().map(|x| x / sb).collect();
        let mut arcs = Vec::with_capacity(n + m - 1);
        let (mut i, mut j) = (0, 0);
        loop {
            let f = supply[i].min(demand[j]);
            arcs.push((i, j, f));
            supply[i] -= f;
            demand[j] -= f;
            if i == n - 1 && j == m - 1 {
                break;
            }
            // Exhaust rows first on ties; the zero arc left behind keeps the
            // basis a spanning tree.
            if (supply[i] <= demand[j] && i < n - 1) || j == m - 1 {
                i += 1;
            } else {
                j += 1;
            }
        }
        let mut adj = vec![Vec::new(); n + m];
        for (k, &(i, j, _)) in arcs.iter().enumerate() {
            adj[i].push(k);
            adj[n + j].push(k);
        }
        let scale = cost.iter().fold(0.0f64, |s, c| s.max(c.abs())).max(1e-300);
        Self { cost, n, m, arcs, adj, u: vec![0.0; n], v: vec![0.0; m], tol: 1e-12 * scale }
    }

    fn other(&self, arc: usize, node: usize) -> usize {
        let (i, j, _) = self.arcs[arc];
        if node == i {
            self.n + j
        } else {
            i
        }
    }

    fn potentials(&mut self) {
        let mut seen = vec![false; self.n + self.m];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        self.u[0] = 0.0;
        while let Some(node) = queue.pop_front() {
            for &k in &self.adj[node] {
                let next = self.other(k, node);
                if seen[next] {
                    continue;
                }
                seen[next] = true;
                let (i, j, _) = self.arcs[k];
                if next >= self.n {
                    self.v[j] = self.cost[[i, j]] - self.u[i];
                } else {
                    self.u[i] = self.cost[[i, j]] - self.v[j];
                }
                queue.push_back(next);
            }
        }
    }

    /// Tree arcs on the path from `from` to `to`, in order.
    fn path(&self, from: usize, to: usize) -> Vec<usize> {
        let mut parent = vec![usize::MAX; self.n + self.m];
        let mut queue = VecDeque::from([from]);
        parent[from] = from;
        while let Some(node) = queue.pop_front() {
            if node == to {
                break;
            }
            for &k in &self.adj[node] {
                let next = self.other(k, node);
                if parent[next] == usize::MAX {
                    parent[next] = k;
                    queue.push_back(next);
                }
            }
        }
        let mut arcs = Vec::new();
        let mut node = to;
        while node != from {
            let k = parent[node];
            arcs.push(k);
            node = self.other(k, node);
        }
        arcs.reverse();
        arcs
    }

    /// Returns the pivot count, or `None` when the cap is reached.
    fn run(&mut self, cap: usize) -> Option<usize> {
        let total = self.n * self.m;
        let block = ((total as f64).sqrt() as usize).max(16).min(total);
        let mut next = 0usize;
        let mut pivots = 0;
        self.potentials();
        loop {
            // Block pricing: scan blocks until one holds a negative reduced
            // cost, or a full sweep finds none.
            let mut best = (-self.tol, usize::MAX);
            let mut scanned = 0;
            while scanned < total {
                let len = block.min(total - scanned);
                for _ in 0..len {
                    let (i, j) = (next / self.m, next % self.m);
                    let rc = self.cost[[i, j]] - self.u[i] - self.v[j];
                    if rc < best.0 {
                        best = (rc, next);
                    }
                    next += 1;
                    if next == total {
                        next = 0;
                    }
                }
                scanned += len;
                if best.1 != usize::MAX {
                    break;
                }
            }
            if best.1 == usize::MAX {
                return Some(pivots);
            }
            if pivots >= cap {
                return None;
            }
            let (ei, ej) = (best.1 / self.m, best.1 % self.m);
            let cycle = self.path(self.n + ej, ei);
            // Arcs at even positions lose flow.
            let mut leave = cycle[0];
            let mut theta = f64::INFINITY;
            for (pos, &k) in cycle.iter().enumerate() {
                if pos % 2 == 0 && self.arcs[k].2 < theta {
                    theta = self.arcs[k].2;
                    leave = k;
                }
            }
            for (pos, &k) in cycle.iter().enumerate() {
                let f = &mut self.arcs[k].2;
                *f = if pos % 2 == 0 { (*f - theta).max(0.0) } else { *f + theta };
            }
            let (li, lj, _) = self.arcs[leave];
            self.adj[li].retain(|&k| k != leave);
            self.adj[self.n + lj].retain(|&k| k != leave);
            self.arcs[leave] = (ei, ej, theta);
            self.adj[ei].push(leave);
            self.adj[self.n + ej].push(leave);
            self.potentials();
            pivots += 1;
        }
    }

    fn solution(self, pivots: usize) -> W1Solution {
        let value = self.arcs.iter().map(|&(i, j, f)| f * self.cost[[i, j]]).sum();
        W1Solution { value, flows: self.arcs, u: self.u, v: self.v, pivots, fallback: false }
    }
}

fn log_sum_exp(it: impl Iterator<Item = f64>) -> f64 {
    let vals: Vec<f64> = it.collect();
    let peak = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if peak == f64::NEG_INFINITY {
        return peak;
    }
    peak + vals.iter().map(|v| (v - peak).exp()).sum::<f64>().ln()
}

/// Balanced entropic transport cost `⟨C, π⟩`, with ε annealed geometrically
/// down to `1e-3` times the mean cost and the plan rounded onto the exact
/// marginals before evaluation.
pub fn entropic_w1(a: &[f64], b: &[f64], cost: &Array2<f64>) -> f64 {
    let (n, m) = cost.dim();
    let sa: f64 = a.iter().sum();
    let sb: f64 = b.iter().sum();
    let la: Vec<f64> = a.iter().map(|x| (x / sa).ln()).collect();
    let lb: Vec<f64> = b.iter().map(|x| (x / sb).ln()).collect();
    let mean = cost.mean().unwrap_or(0.0);
    if !(mean > 0.0) {
        return 0.0;
    }
    let target = 1e-3 * mean;
    let mut eps = mean;
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    loop {
        for _ in 0..2000 {
            let mut change: f64 = 0.0;
            for i in 0..n {
                let new = -eps * log_sum_exp((0..m).map(|j| lb[j] + (g[j] - cost[[i, j]]) / eps));
                change = change.max((new - f[i]).abs());
                f[i] = new;
            }
            for j in 0..m {
                let new = -eps * log_sum_exp((0..n).map(|i| la[i] + (f[i] - cost[[i, j]]) / eps));
                change = change.max((new - g[j]).abs());
                g[j] = new;
            }
            if change < 1e-12 * mean {
                break;
            }
        }
        if eps <= target {
            break;
        }
        eps = (eps * 0.5).max(target);
    }
    let mut plan = Array2::from_shape_fn((n, m), |(i, j)| (la[i] + lb[j] + (f[i] + g[j] - cost[[i, j]]) / eps).exp());
    round_to_marginals(&mut plan, a, b);
    plan.iter().zip(cost.iter()).map(|(p, c)| p * c).sum()
}

/// Rounds a nonnegative plan onto exact marginals: scale down excess rows and
/// columns, then spread the deficit as a product.
fn round_to_marginals(plan: &mut Array2<f64>, a: &[f64], b: &[f64]) {
    let sa: f64 = a.iter().sum();
    let sb: f64 = b.iter().sum();
    for (i, mut row) in plan.rows_mut().into_iter().enumerate() {
        let s = row.sum();
        let want = a[i] / sa;
        if s > want {
            row *= want / s;
        }
    }
    for (j, mut col) in plan.columns_mut().into_iter().enumerate() {
        let s = col.sum();
        let want = b[j] / sb;
        if s > want {
            col *= want / s;
        }
    }
    let ra: Vec<f64> = plan.rows().into_iter().enumerate().map(|(i, r)| a[i] / sa - r.sum()).collect();
    let rb: Vec<f64> = plan.columns().into_iter().enumerate().map(|(j, c)| b[j] / sb - c.sum()).collect();
    let deficit: f64 = ra.iter().sum();
    if deficit > 0.0 {
        for (i, x) in ra.iter().enumerate() {
            for (j, y) in rb.iter().enumerate() {
                plan[[i, j]] += x * y / deficit;
            }
        }
    }
}

/// `|predicted − n_k/n_0| / (n_k/n_0)`.
pub fn rme(predicted_ratio: f64, n_k: usize, n_0: usize) -> Result<f64, MetricsError> {
    if n_k == 0 || n_0 == 0 {
        return Err(MetricsError::Invalid("counts must be positive".into()));
    }
    let truth = n_k as f64 / n_0 as f64;
    Ok((predicted_ratio - truth).abs() / truth)
}

/// Pearson correlation with two-pass moments.
pub fn growth_correlation(pred: &[f64], truth: &[f64]) -> Result<f64, MetricsError> {
    if pred.len() != truth.len() || pred.len() < 2 {
        return Err(MetricsError::Invalid(format!(
            "need two equal-length series of at least 2 values, got {} and {}",
            pred.len(),
            truth.len()
        )));
    }
    let n = pred.len() as f64;
    let mp = pred.iter().sum::<f64>() / n;
    let mt = truth.iter().sum::<f64>() / n;
    let (mut sp, mut st, mut cross) = (0.0, 0.0, 0.0);
    for (p, t) in pred.iter().zip(truth) {
        let (dp, dt) = (p - mp, t - mt);
        sp += dp * dp;
        st += dt * dt;
        cross += dp * dt;
    }
    if !(sp > 0.0) {
        return Err(MetricsError::ZeroVariance("prediction"));
    }
    if !(st > 0.0) {
        return Err(MetricsError::ZeroVariance("ground truth"));
    }
    Ok(cross / (sp.sqrt() * st.sqrt()))
}

/// Largest pairwise distance among the rows of all given arrays.
pub fn diameter(sets: &[ArrayView2<f64>]) -> f64 {
    let rows: Vec<&[f64]> = sets.iter().flat_map(|s| s.rows().into_iter().map(|r| r.to_slice().unwrap())).collect();
    let mut best: f64 = 0.0;
    for (k, a) in rows.iter().enumerate() {
        for b in &rows[k + 1..] {
            best = best.max(distance(a, b));
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeMetrics {
    pub time: f64,
    pub w1: f64,
    pub rme: f64,
    /// Predicted population size: mass ratio times the initial count.
    pub n_pred: f64,
    pub n_true: usize,
    pub w1_fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct EvalReport {
    /// One entry per snapshot after the first, in time order.
    pub times: Vec<TimeMetrics>,
    pub diameter: f64,
    pub growth_correlation: Option<f64>,
    pub action: Option<f64>,
}

impl EvalReport {
    pub fn max_w1(&self) -> f64 {
        self.times.iter().map(|m| m.w1).fold(0.0, f64::max)
    }

    pub fn max_rme(&self) -> f64 {
        self.times.iter().map(|m| m.rme).fold(0.0, f64::max)
    }

    pub fn write(&self, path: &Path) -> Result<(), MetricsError> {
        fs::write(path, serde_json::to_string_pretty(self).expect("report serializes"))?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Euler step; `None` means 1/400 of the time span.
    pub dt: Option<f64>,
    pub seed: u64,
    pub delta: f64,
    pub action_weights: ActionWeights,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { dt: None, seed: 0, delta: 1.0, action_weights: ActionWeights::default() }
    }
}

/// Propagates the first snapshot with `models` and scores every later one.
pub fn evaluate(
    models: &ModelPair,
    data: &SnapshotSet,
    cfg: &EvalConfig,
) -> Result<(EvalReport, Trajectory), MetricsError> {
    let snaps = &data.snapshots;
    if snaps.len() < 2 {
        return Err(MetricsError::Invalid("need at least two snapshots".into()));
    }
    let times = data.times();
    let (t0, t_end) = (times[0], *times.last().unwrap());
    let dt = cfg.dt.unwrap_or((t_end - t0) / 400.0);
    let traj = integrate_through(models, &snaps[0].points.view(), t0, t_end, dt, &times)?;
    let predicted = predicted_weights(&traj, &times)?;
    let n0 = snaps[0].count();
    let mut report = EvalReport {
        diameter: diameter(&snaps.iter().map(|s| s.points.view()).collect::<Vec<_>>()),
        ..EvalReport::default()
    };
    for (k, (snap, pred)) in snaps.iter().zip(&predicted).enumerate().skip(1) {
        let p = WeightedCloud::new(pred.states.clone(), pred.weights.to_vec())?;
        let q = WeightedCloud::uniform(snap.points.clone())?;
        let w = wasserstein1(&p, &q, cfg.seed.wrapping_add(k as u64))?;
        report.times.push(TimeMetrics {
            time: snap.time,
            w1: w.value,
            rme: rme(pred.mass_ratio, snap.count(), n0)?,
            n_pred: pred.mass_ratio * n0 as f64,
            n_true: snap.count(),
            w1_fallback: w.fallback,
        });
    }
    if snaps.iter().all(|s| s.growth.is_some()) {
        let (mut pred, mut truth) = (Vec::new(), Vec::new());
        for s in snaps {
            let (_, g) = evaluate_fields(models, &s.points.view(), s.time)?;
            pred.extend(g.iter());
            truth.extend(s.growth.as_ref().unwrap());
        }
        report.growth_correlation = Some(growth_correlation(&pred, &truth)?);
    }
    report.action = Some(trajectory_action(&traj, models, cfg.delta, cfg.action_weights)?);
    Ok((report, traj))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn basic_w1() {
        let p = WeightedCloud::uniform(array![[0.0]]).unwrap();
        let q = WeightedCloud::uniform(array![[1.0]]).unwrap();
        assert_eq!(wasserstein1(&p, &q, 0).unwrap().value, 1.0);
        let c = WeightedCloud::new(array![[0.0, 1.0], [2.0, 2.0], [3.0, -1.0]], vec![0.2, 0.5, 0.3]).unwrap();
        assert!(wasserstein1(&c, &c, 0).unwrap().value.abs() < 1e-15);
    }

    #[test]
    fn rme_examples() {
        assert_eq!(rme(2.5, 5, 2).unwrap(), 0.0);
        assert_eq!(rme(2.0, 1, 1).unwrap(), 1.0);
        assert!(rme(1.02, 1020, 1000).unwrap().abs() < 1e-15);
        assert!(rme(1.0, 0, 1).is_err());
    }

    #[test]
    fn pearson_examples() {
        let t = [1.0, 2.0, 4.0, 8.0];
        assert!((growth_correlation(&t, &t).unwrap() - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = t.iter().map(|v| -v).collect();
        assert!((growth_correlation(&neg, &t).unwrap() + 1.0).abs() < 1e-15);
        assert!(matches!(growth_correlation(&[1.0, 1.0], &[0.0, 1.0]), Err(MetricsError::ZeroVariance(_))));
    }

    #[test]
    fn subsample_keeps_mass() {
        let pts = Array2::from_shape_fn((3000, 2), |(i, k)| (i * (k + 1)) as f64);
        let c = WeightedCloud::uniform(pts).unwrap();
        let s = c.subsample(SUBSAMPLE_CAP, 7);
        assert!(s.len() <= SUBSAMPLE_CAP);
        assert!((s.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(s, c.subsample(SUBSAMPLE_CAP, 7));
    }

    #[test]
    fn diameter_of_square() {
        let a = array![[0.0, 0.0], [1.0, 0.0]];
        let b = array![[0.0, 1.0]];
        assert!((diameter(&[a.view(), b.view()]) - 2f64.sqrt()).abs() < 1e-15);
    }
}
