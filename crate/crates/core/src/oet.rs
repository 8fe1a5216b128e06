//! Static optimal entropy-transport (OET) between weighted point clouds.
//!
//! The solver minimizes
//!
//! ```text
//! ⟨C, γ⟩ + KL(γ𝟙 ‖ μ0) + KL(γᵀ𝟙 ‖ μ1) + ε·KL(γ ‖ μ0⊗μ1)
//! ```
//!
//! with `C = −2 ln cos̄(|x − y| / 2δ)` and the generalized Kullback–Leibler
//! divergence `KL(p‖q) = Σ p ln(p/q) − p + q`. Its dual is maximized by block
//! coordinate ascent: the two scaling updates use the exponent `1/(1+ε)`, and
//! each sweep ends with the exact maximizer along the `(f + λ, g − λ)`
//! direction, which otherwise contracts only at rate `1/(1+ε)`.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{log_cos_cost, GeometryError};

/// Largest side of a dense plan solved in one piece.
pub const MAX_PLAN_SIDE: usize = 4096;

#[derive(Debug, Error)]
pub enum OetError {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("non-finite scaling at iteration {iteration} in scaling mode; retry with log_domain = \"always\"")]
    Overflow { iteration: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// How the entropic regularization strength is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Epsilon {
    /// Fixed value in cost units.
    Absolute(f64),
    /// Fraction of the mean finite cost entry.
    RelativeToMeanCost(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogDomain {
    /// Log-domain updates when ε < 1e-2, plain scaling otherwise (with a
    /// log-domain retry if scaling overflows).
    Auto,
    Always,
    Never,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OetConfig {
    pub epsilon: Epsilon,
    pub max_iters: usize,
    /// Stop once the log-scalings move less than this in max-norm.
    pub marginal_tol: f64,
    pub log_domain: LogDomain,
}

impl Default for OetConfig {
    fn default() -> Self {
        Self {
            epsilon: Epsilon::RelativeToMeanCost(0.05),
            max_iters: 5000,
            marginal_tol: 1e-9,
            log_domain: LogDomain::Auto,
        }
    }
}

impl OetConfig {
    pub fn with_epsilon(epsilon: f64) -> Self {
        Self { epsilon: Epsilon::Absolute(epsilon), ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), OetError> {
        let eps_ok = match self.epsilon {
            Epsilon::Absolute(e) | Epsilon::RelativeToMeanCost(e) => e > 0.0 && e.is_finite(),
        };
        if !eps_ok {
            return Err(OetError::Invalid("epsilon must be positive".into()));
        }
        if self.max_iters == 0 {
            return Err(OetError::Invalid("max_iters must be at least 1".into()));
        }
        if !(self.marginal_tol > 0.0) {
            return Err(OetError::Invalid("marginal_tol must be positive".into()));
        }
        Ok(())
    }

    /// Resolves the regularization strength for a concrete cost matrix.
    pub fn resolve_epsilon(&self, cost: &ArrayView2<f64>) -> f64 {
        match self.epsilon {
            Epsilon::Absolute(e) => e,
            Epsilon::RelativeToMeanCost(frac) => {
                let (sum, n) = cost.iter().filter(|c| c.is_finite()).fold((0.0, 0usize), |(s, n), c| (s + c, n + 1));
                let mean = if n == 0 { 0.0 } else { sum / n as f64 };
                // All-zero costs still need a positive ε.
                if mean > 0.0 {
                    frac * mean
                } else {
                    frac
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    /// Iteration cap reached; the plan is still returned.
    MaxIters,
}

#[derive(Debug, Clone)]
pub struct CouplingPlan {
    pub gamma: Array2<f64>,
    pub cost: Array2<f64>,
    pub epsilon: f64,
    /// Dual potentials in cost units; `+∞` marks rows/columns without any
    /// finite cost.
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub iterations: usize,
    /// Last max-norm change of the log-scalings.
    pub residual: f64,
    pub status: SolveStatus,
    pub log_domain: bool,
}

impl CouplingPlan {
    pub fn row_sums(&self) -> Vec<f64> {
        self.gamma.rows().into_iter().map(|r| r.sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        self.gamma.columns().into_iter().map(|c| c.sum()).collect()
    }
}

/// Pairwise entropy-transport costs between the rows of `x0` and `x1`.
pub fn build_cost(x0: &ArrayView2<f64>, x1: &ArrayView2<f64>, delta: f64) -> Result<Array2<f64>, OetError> {
    if x0.ncols() != x1.ncols() {
        return Err(OetError::Invalid(format!("point dimensions differ: {} vs {}", x0.ncols(), x1.ncols())));
    }
    let mut cost = Array2::zeros((x0.nrows(), x1.nrows()));
    for (i, a) in x0.rows().into_iter().enumerate() {
        for (j, b) in x1.rows().into_iter().enumerate() {
            let d2: f64 = a.iter().zip(b.iter()).map(|(p, q)| (p - q) * (p - q)).sum();
            cost[[i, j]] = log_cos_cost(d2.sqrt(), delta)?;
        }
    }
    Ok(cost)
}

fn check_weights(name: &str, w: &[f64]) -> Result<(), OetError> {
    if w.is_empty() {
        return Err(OetError::Invalid(format!("{name} is empty")));
    }
    if w.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
        return Err(OetError::Invalid(format!("{name} must hold positive finite weights")));
    }
    Ok(())
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Maximizer of the dual along `(f + λ, g − λ)`.
fn translation(mu0: &[f64], mu1: &[f64], f: &[f64], g: &[f64]) -> f64 {
    let lhs: f64 = mu0.iter().zip(f).map(|(m, v)| m * (-v).exp()).sum();
    let rhs: f64 = mu1.iter().zip(g).map(|(m, v)| m * (-v).exp()).sum();
    if lhs > 0.0 && rhs > 0.0 && lhs.is_finite() && rhs.is_finite() {
        0.5 * (lhs / rhs).ln()
    } else {
        0.0
    }
}

fn max_change(old: &[f64], new: &[f64], eps: f64) -> f64 {
    old.iter()
        .zip(new)
        .map(|(a, b)| if a.is_infinite() && b.is_infinite() { 0.0 } else { (a - b).abs() / eps })
        .fold(0.0, f64::max)
}

/// Regularized dual objective at potentials `(f, g)`. Nondecreasing along
/// the solver's iterations.
pub fn dual_objective(mu0: &[f64], mu1: &[f64], cost: &ArrayView2<f64>, epsilon: f64, f: &[f64], g: &[f64]) -> f64 {
    let mut val = 0.0;
    for (m, v) in mu0.iter().zip(f) {
        val -= m * ((-v).exp() - 1.0);
    }
    for (m, v) in mu1.iter().zip(g) {
        val -= m * ((-v).exp() - 1.0);
    }
    let mut mass = 0.0;
    for (i, row) in cost.rows().into_iter().enumerate() {
        for (j, c) in row.iter().enumerate() {
            let e = (f[i] + g[j] - c) / epsilon;
            if e.is_finite() {
                mass += mu0[i] * mu1[j] * e.exp();
            }
        }
    }
    let total0: f64 = mu0.iter().sum();
    let total1: f64 = mu1.iter().sum();
    val - epsilon * (mass - total0 * total1)
}

/// Entropic scaling solver for the KL-penalized transport problem.
pub fn solve_oet(mu0: &[f64], mu1: &[f64], cost: &Array2<f64>, cfg: &OetConfig) -> Result<CouplingPlan, OetError> {
    solve_oet_traced(mu0, mu1, cost, cfg, |_, _, _| {})
}

/// Like [`solve_oet`], calling `trace(iteration, f, g)` after every sweep.
pub fn solve_oet_traced(
    mu0: &[f64],
    mu1: &[f64],
    cost: &Array2<f64>,
    cfg: &OetConfig,
    trace: impl FnMut(usize, &[f64], &[f64]),
) -> Result<CouplingPlan, OetError> {
    cfg.validate()?;
    check_weights("mu0", mu0)?;
    check_weights("mu1", mu1)?;
    if cost.dim() != (mu0.len(), mu1.len()) {
        return Err(OetError::Invalid(format!(
            "cost is {:?} but marginals have sizes ({}, {})",
            cost.dim(),
            mu0.len(),
            mu1.len()
        )));
    }
    if mu0.len() > MAX_PLAN_SIDE || mu1.len() > MAX_PLAN_SIDE {
        return Err(OetError::Invalid(format!("plan side exceeds {MAX_PLAN_SIDE}; use mini-batches")));
    }
    if cost.iter().any(|c| c.is_nan() || *c < 0.0) {
        return Err(OetError::Invalid("cost entries must be nonnegative".into()));
    }
    let eps = cfg.resolve_epsilon(&cost.view());
    match cfg.log_domain {
        LogDomain::Always => Ok(solve_log(mu0, mu1, cost, cfg, eps, trace)),
        LogDomain::Never => solve_scaling(mu0, mu1, cost, cfg, eps, trace),
        LogDomain::Auto if eps < 1e-2 => Ok(solve_log(mu0, mu1, cost, cfg, eps, trace)),
        LogDomain::Auto => {
            // The trace callback is consumed by the first attempt, so a retry
            // runs untraced.
            match solve_scaling(mu0, mu1, cost, cfg, eps, trace) {
                Err(OetError::Overflow { .. }) => Ok(solve_log(mu0, mu1, cost, cfg, eps, |_, _, _| {})),
                other => other,
            }
        }
    }
}

fn assemble(
    mu0: &[f64],
    mu1: &[f64],
    cost: &Array2<f64>,
    eps: f64,
    f: Vec<f64>,
    g: Vec<f64>,
    iterations: usize,
    residual: f64,
    converged: bool,
    log_domain: bool,
) -> CouplingPlan {
    let (n0, n1) = cost.dim();
    let mut gamma = Array2::zeros((n0, n1));
    for i in 0..n0 {
        for j in 0..n1 {
            let c = cost[[i, j]];
            if c.is_finite() && f[i].is_finite() && g[j].is_finite() {
                gamma[[i, j]] = mu0[i] * mu1[j] * ((f[i] + g[j] - c) / eps).exp();
            }
        }
    }
    CouplingPlan {
        gamma,
        cost: cost.clone(),
        epsilon: eps,
        f,
        g,
        iterations,
        residual,
        status: if converged { SolveStatus::Converged } else { SolveStatus::MaxIters },
        log_domain,
    }
}

fn solve_log(
    mu0: &[f64],
    mu1: &[f64],
    cost: &Array2<f64>,
    cfg: &OetConfig,
    eps: f64,
    mut trace: impl FnMut(usize, &[f64], &[f64]),
) -> CouplingPlan {
    let (n0, n1) = cost.dim();
    let shrink = eps / (1.0 + eps);
    let log_mu0: Vec<f64> = mu0.iter().map(|m| m.ln()).collect();
    let log_mu1: Vec<f64> = mu1.iter().map(|m| m.ln()).collect();
    let mut f = vec![0.0; n0];
    let mut g = vec![0.0; n1];
    let mut col_max = vec![f64::NEG_INFINITY; n1];
    let mut col_sum = vec![0.0; n1];
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;

    for it in 0..cfg.max_iters {
        let f_old = f.clone();
        let g_old = g.clone();

        for (i, fi) in f.iter_mut().enumerate() {
            let row = cost.row(i);
            let lse = log_sum_exp(row.iter().zip(&log_mu1).zip(&g).map(|((c, lm), gj): ((&f64, &f64), &f64)| {
                if c.is_finite() && gj.is_finite() {
                    lm + (gj - c) / eps
                } else {
                    f64::NEG_INFINITY
                }
            }));
            *fi = -shrink * lse;
        }

        // Column log-sum-exp with two row-major passes.
        col_max.iter_mut().for_each(|v| *v = f64::NEG_INFINITY);
        for i in 0..n0 {
            if !f[i].is_finite() {
                continue;
            }
            let base = log_mu0[i] + f[i] / eps;
            for (j, c) in cost.row(i).iter().enumerate() {
                let v = base - c / eps;
                if v > col_max[j] {
                    col_max[j] = v;
                }
            }
        }
        col_sum.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..n0 {
            if !f[i].is_finite() {
                continue;
            }
            let base = log_mu0[i] + f[i] / eps;
            for (j, c) in cost.row(i).iter().enumerate() {
                if col_max[j].is_finite() {
                    col_sum[j] += (base - c / eps - col_max[j]).exp();
                }
            }
        }
        for j in 0..n1 {
            g[j] = if col_max[j].is_finite() { -shrink * (col_max[j] + col_sum[j].ln()) } else { f64::INFINITY };
        }

        let lambda = translation(mu0, mu1, &f, &g);
        f.iter_mut().for_each(|v| *v += lambda);
        g.iter_mut().for_each(|v| *v -= lambda);

        iterations = it + 1;
        trace(iterations, &f, &g);
        residual = max_change(&f_old, &f, eps).max(max_change(&g_old, &g, eps));
        if residual < cfg.marginal_tol {
            converged = true;
            break;
        }
    }
    assemble(mu0, mu1, cost, eps, f, g, iterations, residual, converged, true)
}

fn solve_scaling(
    mu0: &[f64],
    mu1: &[f64],
    cost: &Array2<f64>,
    cfg: &OetConfig,
    eps: f64,
    mut trace: impl FnMut(usize, &[f64], &[f64]),
) -> Result<CouplingPlan, OetError> {
    let (n0, n1) = cost.dim();
    let kernel = cost.mapv(|c| (-c / eps).exp());
    let row_live: Vec<bool> = kernel.rows().into_iter().map(|r| r.iter().any(|k| *k > 0.0)).collect();
    let col_live: Vec<bool> = kernel.columns().into_iter().map(|c| c.iter().any(|k| *k > 0.0)).collect();
    let power = -1.0 / (1.0 + eps);
    // Scalings a = e^{f/ε}, b = e^{g/ε}; dead rows/columns carry a = 0.
    let mut a: Vec<f64> = row_live.iter().map(|l| if *l { 1.0 } else { 0.0 }).collect();
    let mut b: Vec<f64> = col_live.iter().map(|l| if *l { 1.0 } else { 0.0 }).collect();
    let to_potential = |s: f64| if s > 0.0 { eps * s.ln() } else { f64::INFINITY };
    let mut f: Vec<f64> = a.iter().map(|s| to_potential(*s)).collect();
    let mut g: Vec<f64> = b.iter().map(|s| to_potential(*s)).collect();
    let mut mb = vec![0.0; n1];
    let mut ma = vec![0.0; n0];
    let mut kta = vec![0.0; n1];
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;

    for it in 0..cfg.max_iters {
        for j in 0..n1 {
            mb[j] = mu1[j] * b[j];
        }
        for i in 0..n0 {
            if !row_live[i] {
                continue;
            }
            let kb: f64 = kernel.row(i).iter().zip(&mb).map(|(k, v)| k * v).sum();
            a[i] = kb.powf(power);
        }
        for i in 0..n0 {
            ma[i] = mu0[i] * a[i];
        }
        kta.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..n0 {
            let w = ma[i];
            if w == 0.0 {
                continue;
            }
            for (acc, k) in kta.iter_mut().zip(kernel.row(i).iter()) {
                *acc += k * w;
            }
        }
        for j in 0..n1 {
            if col_live[j] {
                b[j] = kta[j].powf(power);
            }
        }
        let bad = |v: &f64, live: bool| live && !(v.is_finite() && *v > 0.0);
        if a.iter().zip(&row_live).any(|(v, l)| bad(v, *l)) || b.iter().zip(&col_live).any(|(v, l)| bad(v, *l)) {
            return Err(OetError::Overflow { iteration: it + 1 });
        }

        let f_new: Vec<f64> = a.iter().map(|s| to_potential(*s)).collect();
        let g_new: Vec<f64> = b.iter().map(|s| to_potential(*s)).collect();
        let lambda = translation(mu0, mu1, &f_new, &g_new);
        let up = (lambda / eps).exp();
        a.iter_mut().for_each(|v| *v *= up);
        b.iter_mut().for_each(|v| *v /= up);
        let f_new: Vec<f64> = f_new.iter().map(|v| v + lambda).collect();
        let g_new: Vec<f64> = g_new.iter().map(|v| v - lambda).collect();

        iterations = it + 1;
        trace(iterations, &f_new, &g_new);
        residual = max_change(&f, &f_new, eps).max(max_change(&g, &g_new, eps));
        f = f_new;
        g = g_new;
        if residual < cfg.marginal_tol {
            converged = true;
            break;
        }
    }
    Ok(assemble(mu0, mu1, cost, eps, f, g, iterations, residual, converged, false))
}

/// Generalized KL divergence with `KL(0 ‖ m) = m`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| if *a == 0.0 { *b } else { a * (a / b).ln() - a + b }).sum()
}

/// Unregularized objective `⟨C,γ⟩ + KL(γ𝟙‖μ0) + KL(γᵀ𝟙‖μ1)`, with `0·∞ = 0`.
pub fn oet_objective(plan: &CouplingPlan, mu0: &[f64], mu1: &[f64]) -> f64 {
    objective_of(&plan.gamma.view(), &plan.cost.view(), mu0, mu1)
}

/// Same objective for an arbitrary nonnegative plan.
pub fn objective_of(gamma: &ArrayView2<f64>, cost: &ArrayView2<f64>, mu0: &[f64], mu1: &[f64]) -> f64 {
    let mut transport = 0.0;
    for (g, c) in gamma.iter().zip(cost.iter()) {
        if *g > 0.0 {
            transport += g * c;
        }
    }
    let rows: Vec<f64> = gamma.rows().into_iter().map(|r| r.sum()).collect();
    let cols: Vec<f64> = gamma.columns().into_iter().map(|c| c.sum()).collect();
    transport + kl_divergence(&rows, mu0) + kl_divergence(&cols, mu1)
}

/// Squared WFR distance `2δ²·OET` between two weighted clouds.
pub fn static_wfr_squared(
    mu0: &[f64],
    mu1: &[f64],
    x0: &ArrayView2<f64>,
    x1: &ArrayView2<f64>,
    delta: f64,
    cfg: &OetConfig,
) -> Result<f64, OetError> {
    let cost = build_cost(x0, x1, delta)?;
    let plan = solve_oet(mu0, mu1, &cost, cfg)?;
    Ok(2.0 * delta * delta * oet_objective(&plan, mu0, mu1))
}

/// Pair of plans whose row (resp. column) marginals reproduce μ0 (resp. μ1).
#[derive(Debug, Clone)]
pub struct SemiCoupling {
    /// Mass sent by source `i` along pair `(i, j)`.
    pub gamma0: Array2<f64>,
    /// Mass received by target `j` along pair `(i, j)`.
    pub gamma1: Array2<f64>,
    /// Sources that the plan essentially destroys; each is routed to its
    /// cheapest target with mass ratio `mass_floor`.
    pub death_rows: Vec<usize>,
    /// Targets that the plan essentially creates; their mass is added to the
    /// heaviest pair of the nearest coupled source.
    pub birth_cols: Vec<usize>,
    /// Pairs that received folded birth mass.
    pub birth_folds: Vec<(usize, usize)>,
}

impl SemiCoupling {
    pub fn is_degenerate(&self) -> bool {
        !self.death_rows.is_empty() || !self.birth_cols.is_empty()
    }
}

fn argmin_finite(values: impl Iterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (k, v) in values.enumerate() {
        if v.is_finite() && best.is_none_or(|(_, b)| v < b) {
            best = Some((k, v));
        }
    }
    best.map(|(k, _)| k)
}

/// Splits an OET plan into the semi-coupling
/// `γ0 = γ·μ0/rowsum`, `γ1 = γ·μ1/colsum`.
pub fn semi_coupling(plan: &CouplingPlan, mu0: &[f64], mu1: &[f64], mass_floor: f64) -> SemiCoupling {
    let gamma = &plan.gamma;
    let (n0, n1) = gamma.dim();
    let rows = plan.row_sums();
    let cols = plan.col_sums();
    let death_rows: Vec<usize> = (0..n0).filter(|&i| rows[i] < mass_floor * mu0[i]).collect();
    let birth_cols: Vec<usize> = (0..n1).filter(|&j| cols[j] < mass_floor * mu1[j]).collect();
    let is_death: Vec<bool> = (0..n0).map(|i| rows[i] < mass_floor * mu0[i]).collect();
    let is_birth: Vec<bool> = (0..n1).map(|j| cols[j] < mass_floor * mu1[j]).collect();

    let mut gamma0 = Array2::zeros((n0, n1));
    let mut gamma1 = Array2::zeros((n0, n1));
    for i in 0..n0 {
        if is_death[i] {
            continue;
        }
        // Row mass restricted to non-birth columns, so that dropping birth
        // columns keeps the row sum exact.
        let kept: f64 = (0..n1).filter(|&j| !is_birth[j]).map(|j| gamma[[i, j]]).sum();
        let (denom, skip_births) = if kept > 0.0 { (kept, true) } else { (rows[i], false) };
        for j in 0..n1 {
            if skip_births && is_birth[j] {
                continue;
            }
            let v = gamma[[i, j]];
            if v > 0.0 {
                gamma0[[i, j]] = v * mu0[i] / denom;
                if !is_birth[j] {
                    gamma1[[i, j]] = v * mu1[j] / cols[j];
                }
            }
        }
    }
    for &i in &death_rows {
        let j = argmin_finite(plan.cost.row(i).iter().copied()).unwrap_or(0);
        gamma0[[i, j]] = mu0[i];
        gamma1[[i, j]] = mu0[i] * mass_floor;
    }
    let mut birth_folds = Vec::new();
    for &j in &birth_cols {
        let source = argmin_finite((0..n0).map(|i| if is_death[i] { f64::INFINITY } else { plan.cost[[i, j]] }));
        let Some(i) = source else { continue };
        let main = argmin_finite(gamma0.row(i).iter().map(|v| -v)).unwrap_or(j);
        if gamma0[[i, main]] <= 0.0 {
            continue;
        }
        gamma1[[i, main]] += mu1[j];
        birth_folds.push((i, main));
    }
    // Pairs that only carry sent mass are pure deaths at the floor ratio.
    for i in 0..n0 {
        for j in 0..n1 {
            if gamma0[[i, j]] > 0.0 && gamma1[[i, j]] <= 0.0 {
                gamma1[[i, j]] = gamma0[[i, j]] * mass_floor;
            }
        }
    }
    SemiCoupling { gamma0, gamma1, death_rows, birth_cols, birth_folds }
}

/// One block of a mini-batch coupling.
#[derive(Debug, Clone)]
pub struct MiniBatchPlan {
    /// Indices into the source set.
    pub rows: Vec<usize>,
    /// Indices into the target set.
    pub cols: Vec<usize>,
    pub mu0: Vec<f64>,
    pub mu1: Vec<f64>,
    pub plan: CouplingPlan,
}

/// Splits both point sets into the same number of random blocks of at most
/// `batch_size` points and solves each block independently. Every point
/// carries mass `1/n0`, so the source mass sums to one across blocks and the
/// target mass to `n1/n0`.
pub fn minibatch_oet(
    x0: &ArrayView2<f64>,
    x1: &ArrayView2<f64>,
    batch_size: usize,
    delta: f64,
    cfg: &OetConfig,
    seed: u64,
) -> Result<Vec<MiniBatchPlan>, OetError> {
    if batch_size < 2 {
        return Err(OetError::Invalid("batch size must be at least 2".into()));
    }
    let (n0, n1) = (x0.nrows(), x1.nrows());
    if n0 == 0 || n1 == 0 {
        return Err(OetError::Invalid("empty point set".into()));
    }
    let blocks = n0.div_ceil(batch_size).max(n1.div_ceil(batch_size)).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm0: Vec<usize> = (0..n0).collect();
    let mut perm1: Vec<usize> = (0..n1).collect();
    if blocks > 1 {
        perm0.shuffle(&mut rng);
        perm1.shuffle(&mut rng);
    }
    let parts0 = split_even(&perm0, blocks);
    let parts1 = split_even(&perm1, blocks);
    let partition: Vec<(Vec<usize>, Vec<usize>)> = parts0.into_iter().zip(parts1).collect();
    minibatch_oet_partitioned(x0, x1, &partition, 1.0 / n0 as f64, delta, cfg)
}

fn split_even(items: &[usize], blocks: usize) -> Vec<Vec<usize>> {
    let n = items.len();
    (0..blocks).map(|b| items[b * n / blocks..(b + 1) * n / blocks].to_vec()).collect()
}

/// Solves each `(rows, cols)` block with every point weighted by `point_mass`.
pub fn minibatch_oet_partitioned(
    x0: &ArrayView2<f64>,
    x1: &ArrayView2<f64>,
    partition: &[(Vec<usize>, Vec<usize>)],
    point_mass: f64,
    delta: f64,
    cfg: &OetConfig,
) -> Result<Vec<MiniBatchPlan>, OetError> {
    partition
        .par_iter()
        .map(|(rows, cols)| {
            if rows.is_empty() || cols.is_empty() {
                return Err(OetError::Invalid("empty mini-batch".into()));
            }
            let xa = x0.select(ndarray::Axis(0), rows);
            let xb = x1.select(ndarray::Axis(0), cols);
            let cost = build_cost(&xa.view(), &xb.view(), delta)?;
            let mu0 = vec![point_mass; rows.len()];
            let mu1 = vec![point_mass; cols.len()];
            let plan = solve_oet(&mu0, &mu1, &cost, cfg)?;
            Ok(MiniBatchPlan { rows: rows.clone(), cols: cols.clone(), mu0, mu1, plan })
        })
        .collect()
}

/// Sidecar written next to a dumped plan matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanMetadata {
    pub rows: usize,
    pub cols: usize,
    pub delta: f64,
    pub epsilon: f64,
    pub objective: f64,
    pub residual: f64,
    pub iterations: usize,
    pub status: SolveStatus,
    pub row_marginal_residual: f64,
    pub col_marginal_residual: f64,
}

/// Writes `<stem>.txt` (one matrix row per line, space separated) and
/// `<stem>.meta.json`.
pub fn dump_plan(
    dir: &Path,
    stem: &str,
    plan: &CouplingPlan,
    mu0: &[f64],
    mu1: &[f64],
    delta: f64,
) -> Result<PlanMetadata, OetError> {
    fs::create_dir_all(dir)?;
    let mut out = std::io::BufWriter::new(fs::File::create(dir.join(format!("{stem}.txt")))?);
    for row in plan.gamma.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        writeln!(out, "{}", line.join(" "))?;
    }
    out.flush()?;
    let resid =
        |sums: Vec<f64>, target: &[f64]| sums.iter().zip(target).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let meta = PlanMetadata {
        rows: plan.gamma.nrows(),
        cols: plan.gamma.ncols(),
        delta,
        epsilon: plan.epsilon,
        objective: oet_objective(plan, mu0, mu1),
        residual: plan.residual,
        iterations: plan.iterations,
        status: plan.status,
        row_marginal_residual: resid(plan.row_sums(), mu0),
        col_marginal_residual: resid(plan.col_sums(), mu1),
    };
    fs::write(
        dir.join(format!("{stem}.meta.json")),
        serde_json::to_string_pretty(&meta).expect("metadata serializes"),
    )?;
    Ok(meta)
}

/// Reads back a matrix written by [`dump_plan`].
pub fn read_plan_matrix(path: &Path) -> Result<Array2<f64>, OetError> {
    let text = fs::read_to_string(path)?;
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let vals: Result<Vec<f64>, _> = line.split_whitespace().map(str::parse).collect();
        let vals = vals.map_err(|e| OetError::Invalid(format!("line {}: {e}", lineno + 1)))?;
        if *cols.get_or_insert(vals.len()) != vals.len() {
            return Err(OetError::Invalid(format!("line {}: ragged row", lineno + 1)));
        }
        data.extend(vals);
        rows += 1;
    }
    Array2::from_shape_vec((rows, cols.unwrap_or(0)), data).map_err(|e| OetError::Invalid(e.to_string()))
}

/// Block-diagonal assembly of mini-batch plans into a full `n0 × n1` matrix.
pub fn assemble_blocks(blocks: &[MiniBatchPlan], n0: usize, n1: usize) -> Array2<f64> {
    let mut full = Array2::zeros((n0, n1));
    for block in blocks {
        for (bi, &i) in block.rows.iter().enumerate() {
            for (bj, &j) in block.cols.iter().enumerate() {
                full[[i, j]] = block.plan.gamma[[bi, bj]];
            }
        }
    }
    full
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::{array, s};

    #[test]
    fn cost_examples() {
        let x = array![[0.0, 0.0], [1.0, 1.0]];
        let c = build_cost(&x.view(), &x.view(), 1.0).unwrap();
        assert_eq!(c[[0, 0]], 0.0);
        assert_eq!(c[[1, 1]], 0.0);

        let far = array![[10.0, 10.0], [20.0, 0.0]];
        let c = build_cost(&x.view(), &far.view(), 1.0).unwrap();
        assert!(c.iter().all(|v| v.is_infinite()));

        let y = array![[std::f64::consts::FRAC_PI_2, 0.0]];
        let c = build_cost(&x.slice(s![..1, ..]), &y.view(), 1.0).unwrap();
        assert_relative_eq!(c[[0, 0]], 2f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn single_atom_same_point() {
        let cost = array![[0.0]];
        let plan = solve_oet(&[1.0], &[1.0], &cost, &OetConfig::with_epsilon(1e-3)).unwrap();
        assert_relative_eq!(plan.gamma[[0, 0]], 1.0, epsilon = 1e-9);
        assert!(oet_objective(&plan, &[1.0], &[1.0]) < 1e-12);
        assert_eq!(plan.status, SolveStatus::Converged);
    }

    #[test]
    fn single_atom_beyond_cutoff() {
        let cost = array![[f64::INFINITY]];
        let plan = solve_oet(&[1.0], &[1.0], &cost, &OetConfig::with_epsilon(1e-3)).unwrap();
        assert_eq!(plan.gamma[[0, 0]], 0.0);
        assert_relative_eq!(oet_objective(&plan, &[1.0], &[1.0]), 2.0, epsilon = 1e-15);
    }

    #[test]
    fn objective_examples() {
        let cost = array![[0.0, 1.0], [1.0, 0.0]];
        let plan = CouplingPlan {
            gamma: array![[0.5, 0.0], [0.0, 0.5]],
            cost: cost.clone(),
            epsilon: 1.0,
            f: vec![0.0; 2],
            g: vec![0.0; 2],
            iterations: 0,
            residual: 0.0,
            status: SolveStatus::Converged,
            log_domain: true,
        };
        assert_eq!(oet_objective(&plan, &[0.5, 0.5], &[0.5, 0.5]), 0.0);
        let zero = CouplingPlan { gamma: Array2::zeros((2, 2)), ..plan };
        assert_relative_eq!(oet_objective(&zero, &[0.5, 0.25], &[0.5, 2.0]), 3.25, epsilon = 1e-15);
    }

    #[test]
    fn scaling_and_log_modes_agree() {
        let x0 = array![[0.0], [0.4], [1.1]];
        let x1 = array![[0.1], [0.9], [1.5], [2.0]];
        let cost = build_cost(&x0.view(), &x1.view(), 1.0).unwrap();
        let mu0 = [0.3, 0.3, 0.4];
        let mu1 = [0.2, 0.5, 0.2, 0.3];
        let mut cfg = OetConfig::with_epsilon(0.05);
        cfg.log_domain = LogDomain::Always;
        let a = solve_oet(&mu0, &mu1, &cost, &cfg).unwrap();
        cfg.log_domain = LogDomain::Never;
        let b = solve_oet(&mu0, &mu1, &cost, &cfg).unwrap();
        assert!(!b.log_domain);
        for (p, q) in a.gamma.iter().zip(b.gamma.iter()) {
            assert_relative_eq!(p, q, max_relative = 1e-7);
        }
    }

    #[test]
    fn scaling_mode_reports_overflow() {
        // e^{-740} is subnormal, so the row scaling overflows.
        let cost = array![[7.4]];
        let cfg = OetConfig { log_domain: LogDomain::Never, ..OetConfig::with_epsilon(0.01) };
        let bad = solve_oet(&[1.0], &[1.0], &cost, &cfg);
        assert!(matches!(bad, Err(OetError::Overflow { .. })));
        let cfg = OetConfig { log_domain: LogDomain::Auto, ..cfg };
        let plan = solve_oet(&[1.0], &[1.0], &cost, &cfg).unwrap();
        assert!(plan.log_domain);
        assert!(plan.gamma.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn semi_coupling_unit_plan() {
        let plan = solve_oet(&[1.0], &[1.0], &array![[0.0]], &OetConfig::with_epsilon(1e-3)).unwrap();
        let sc = semi_coupling(&plan, &[1.0], &[1.0], 1e-4);
        assert_relative_eq!(sc.gamma0[[0, 0]], 1.0, epsilon = 1e-15);
        assert_relative_eq!(sc.gamma1[[0, 0]], 1.0, epsilon = 1e-15);
        assert!(!sc.is_degenerate());
    }

    #[test]
    fn semi_coupling_exact_marginals() {
        let x0 = array![[0.0, 0.0], [0.5, 0.2], [1.0, -0.3]];
        let x1 = array![[0.1, 0.0], [0.7, 0.1]];
        let cost = build_cost(&x0.view(), &x1.view(), 1.0).unwrap();
        let mu0 = [1.0 / 3.0; 3];
        let mu1 = [0.6, 0.2];
        let plan = solve_oet(&mu0, &mu1, &cost, &OetConfig::with_epsilon(0.01)).unwrap();
        let sc = semi_coupling(&plan, &mu0, &mu1, 1e-4);
        for i in 0..3 {
            assert!((sc.gamma0.row(i).sum() - mu0[i]).abs() <= 1e-12);
        }
        for j in 0..2 {
            assert!((sc.gamma1.column(j).sum() - mu1[j]).abs() <= 1e-12);
        }
        for (a, b) in sc.gamma0.iter().zip(sc.gamma1.iter()) {
            assert_eq!(*a > 0.0, *b > 0.0);
        }
    }

    #[test]
    fn semi_coupling_degenerate_rows_and_columns() {
        // Source 1 is out of reach; target 1 is reachable only at a high cost.
        let x0 = array![[0.0], [50.0]];
        let x1 = array![[0.2], [-3.13]];
        let cost = build_cost(&x0.view(), &x1.view(), 1.0).unwrap();
        let mu = [0.5, 0.5];
        let plan = solve_oet(&mu, &mu, &cost, &OetConfig::with_epsilon(0.01)).unwrap();
        let sc = semi_coupling(&plan, &mu, &mu, 1e-4);
        assert_eq!(sc.death_rows, vec![1]);
        assert_eq!(sc.birth_cols, vec![1]);
        assert_eq!(sc.birth_folds, vec![(0, 0)]);
        assert_relative_eq!(sc.gamma0.row(0).sum(), 0.5, epsilon = 1e-12);
        assert_eq!(sc.gamma0.row(1).sum(), 0.5);
        // The folded pair receives the created mass on top of its own.
        assert!(sc.gamma1[[0, 0]] > 0.9);
    }

    #[test]
    fn minibatch_full_when_batch_exceeds_data() {
        let x0 = array![[0.0], [0.5], [1.0]];
        let x1 = array![[0.1], [0.6]];
        let cfg = OetConfig::with_epsilon(0.02);
        let blocks = minibatch_oet(&x0.view(), &x1.view(), 10, 1.0, &cfg, 3).unwrap();
        assert_eq!(blocks.len(), 1);
        let cost = build_cost(&x0.view(), &x1.view(), 1.0).unwrap();
        let full = solve_oet(&[1.0 / 3.0; 3], &[1.0 / 3.0; 2], &cost, &cfg).unwrap();
        assert_eq!(blocks[0].plan.gamma, full.gamma);
        assert_eq!(blocks[0].rows, vec![0, 1, 2]);
        assert!(minibatch_oet(&x0.view(), &x1.view(), 1, 1.0, &cfg, 3).is_err());
    }

    #[test]
    fn plan_dump_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let x0 = array![[0.0], [0.5]];
        let x1 = array![[0.1], [0.6], [0.9]];
        let cost = build_cost(&x0.view(), &x1.view(), 1.0).unwrap();
        let mu0 = [0.5, 0.5];
        let mu1 = [0.4, 0.4, 0.4];
        let plan = solve_oet(&mu0, &mu1, &cost, &OetConfig::default()).unwrap();
        let meta = dump_plan(dir.path(), "plan", &plan, &mu0, &mu1, 1.0).unwrap();
        assert_eq!((meta.rows, meta.cols), (2, 3));
        let back = read_plan_matrix(&dir.path().join("plan.txt")).unwrap();
        assert_eq!(back, plan.gamma);
        assert!(dir.path().join("plan.meta.json").exists());
    }
}
