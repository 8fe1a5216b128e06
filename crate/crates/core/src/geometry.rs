//! Closed-form Wasserstein–Fisher–Rao geometry between weighted point masses.
//!
//! A Dirac `m0·δ(x0)` travels to `m1·δ(x1)` along the "traveling Dirac"
//! geodesic: the mass follows the quadratic `m(t) = A t² − 2B t + m0`, and the
//! momentum `u(t)·m(t) = ω0` is constant. Everything here is a pure function of
//! its inputs.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("domain error: {0}")]
    Domain(String),
    /// The pair sits at or beyond the cut-off distance `π·δ`, where the
    /// entropy-transport cost is infinite and no transport geodesic exists.
    #[error("no geodesic: distance {dist} is not below the cut-off {limit} (π·δ)")]
    NoGeodesic { dist: f64, limit: f64 },
}

/// Length scales and numerical guards shared by the geometry routines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WfrConfig {
    /// Growth penalty length scale δ.
    pub delta: f64,
    /// Bandwidth σ of the traveling Gaussian.
    pub sigma: f64,
    /// Below this value of τ the pair is treated as a pure Fisher–Rao path.
    pub tau_eps: f64,
    /// Smallest admissible final-to-initial mass ratio.
    pub mass_floor: f64,
}

impl Default for WfrConfig {
    fn default() -> Self {
        Self { delta: 1.0, sigma: 0.0, tau_eps: 1e-9, mass_floor: 1e-4 }
    }
}

impl WfrConfig {
    pub fn with_delta(delta: f64) -> Self {
        Self { delta, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(GeometryError::Domain(format!("delta must be positive and finite, got {}", self.delta)));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(GeometryError::Domain(format!("sigma must be nonnegative, got {}", self.sigma)));
        }
        if !(self.tau_eps > 0.0 && self.tau_eps < 1e-3) {
            return Err(GeometryError::Domain(format!("tau_eps must lie in (0, 1e-3), got {}", self.tau_eps)));
        }
        if !(self.mass_floor > 0.0 && self.mass_floor < 1e-1) {
            return Err(GeometryError::Domain(format!("mass_floor must lie in (0, 0.1), got {}", self.mass_floor)));
        }
        Ok(())
    }

    /// Distance at which the transport cost becomes infinite.
    pub fn cutoff(&self) -> f64 {
        PI * self.delta
    }
}

fn check_delta(delta: f64) -> Result<(), GeometryError> {
    if delta > 0.0 && delta.is_finite() {
        Ok(())
    } else {
        Err(GeometryError::Domain(format!("delta must be positive and finite, got {delta}")))
    }
}

/// `cos(min(x, π/2))`.
fn cos_bar(x: f64) -> f64 {
    if x >= PI / 2.0 {
        0.0
    } else {
        x.cos()
    }
}

/// Entropy-transport ground cost `−2 ln cos̄(r / 2δ)`; `+∞` from `r ≥ π·δ` on.
pub fn log_cos_cost(r: f64, delta: f64) -> Result<f64, GeometryError> {
    check_delta(delta)?;
    if !(r >= 0.0) {
        return Err(GeometryError::Domain(format!("distance must be nonnegative, got {r}")));
    }
    if r >= PI * delta {
        return Ok(f64::INFINITY);
    }
    Ok(-2.0 * (r / (2.0 * delta)).cos().ln())
}

/// Squared WFR distance between `m0·δ(x0)` and `m1·δ(x1)` with `|x1 − x0| = dist`.
pub fn wfr_dd_squared(m0: f64, m1: f64, dist: f64, delta: f64) -> Result<f64, GeometryError> {
    check_delta(delta)?;
    if !(m0 >= 0.0 && m1 >= 0.0) {
        return Err(GeometryError::Domain(format!("masses must be nonnegative, got ({m0}, {m1})")));
    }
    if !(dist >= 0.0) {
        return Err(GeometryError::Domain(format!("distance must be nonnegative, got {dist}")));
    }
    let c = cos_bar(dist / (2.0 * delta));
    let v = 2.0 * delta * delta * (m0 + m1 - 2.0 * (m0 * m1).sqrt() * c);
    Ok(v.max(0.0))
}

/// Constants of one traveling-Dirac geodesic.
#[derive(Debug, Clone, PartialEq)]
pub struct TravelingDiracParams {
    pub a: f64,
    pub b: f64,
    pub omega0: Vec<f64>,
    pub tau: f64,
    pub m0: f64,
    /// Final mass after the `mass_floor` clamp.
    pub m1: f64,
    pub x0: Vec<f64>,
    pub x1: Vec<f64>,
    /// `m0·A − B²`, evaluated as `m0·m1·τ²/(1+τ²)`.
    pub disc: f64,
    /// True when τ fell under `tau_eps`; the path is then pure growth.
    pub degenerate: bool,
}

impl TravelingDiracParams {
    pub fn dim(&self) -> usize {
        self.x0.len()
    }

    pub fn mass(&self, t: f64) -> f64 {
        (self.a * t - 2.0 * self.b) * t + self.m0
    }

    /// `dm/dt`.
    pub fn mass_rate(&self, t: f64) -> f64 {
        2.0 * self.a * t - 2.0 * self.b
    }

    /// `Λ_t = ∫₀ᵗ ds / m(s)`.
    pub fn lambda(&self, t: f64) -> f64 {
        lambda_at(self, t)
    }

    pub fn position(&self, t: f64) -> Vec<f64> {
        let lam = self.lambda(t);
        self.x0.iter().zip(&self.omega0).map(|(x, w)| x + w * lam).collect()
    }

    pub fn velocity(&self, t: f64) -> Vec<f64> {
        let m = self.mass(t);
        self.omega0.iter().map(|w| w / m).collect()
    }

    /// `d/dt ln m(t)`.
    pub fn growth(&self, t: f64) -> f64 {
        self.mass_rate(t) / self.mass(t)
    }

    pub fn momentum_norm(&self) -> f64 {
        norm(&self.omega0)
    }

    /// Lagrangian `½(|u|² + δ² g²)·m` at time `t`.
    pub fn lagrangian(&self, t: f64, delta: f64) -> f64 {
        let m = self.mass(t);
        let dm = self.mass_rate(t);
        let w2: f64 = self.omega0.iter().map(|w| w * w).sum();
        0.5 * (w2 + delta * delta * dm * dm) / m
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Builds the geodesic from `m0·δ(x0)` to `m1·δ(x1)`.
pub fn traveling_dirac(
    x0: &[f64],
    x1: &[f64],
    m0: f64,
    m1: f64,
    cfg: &WfrConfig,
) -> Result<TravelingDiracParams, GeometryError> {
    cfg.validate()?;
    if x0.len() != x1.len() {
        return Err(GeometryError::Domain(format!("endpoint dimensions differ: {} vs {}", x0.len(), x1.len())));
    }
    if !(m0 > 0.0 && m0.is_finite()) {
        return Err(GeometryError::Domain(format!("initial mass must be positive, got {m0}")));
    }
    if !(m1 >= 0.0 && m1.is_finite()) {
        return Err(GeometryError::Domain(format!("final mass must be nonnegative, got {m1}")));
    }
    let m1 = m1.max(m0 * cfg.mass_floor);
    let delta = cfg.delta;
    let dist = distance(x0, x1);
    if !(dist < PI * delta) {
        return Err(GeometryError::NoGeodesic { dist, limit: PI * delta });
    }

    let mut tau = (dist / (2.0 * delta)).tan();
    let degenerate = tau <= cfg.tau_eps;
    if degenerate {
        tau = 0.0;
    }
    let root = (1.0 + tau * tau).sqrt();
    let sqrt_m0 = m0.sqrt();
    let sqrt_prod = (m0 * m1).sqrt();
    // s = √(m0 m1/(1+τ²)); write A and B through √(m0 m1) − s so that the
    // small-τ limit does not cancel.
    let s = sqrt_prod / root;
    let gap = sqrt_prod * tau * tau / (root * (1.0 + root));
    let dm = (m0 - m1) / (sqrt_m0 + m1.sqrt());
    let a = dm * dm + 2.0 * gap;
    let b = sqrt_m0 * dm + gap;
    let disc = m0 * m1 * tau * tau / (1.0 + tau * tau);

    let omega0 = if degenerate || dist == 0.0 {
        vec![0.0; x0.len()]
    } else {
        let scale = 2.0 * delta * tau * s / dist;
        x0.iter().zip(x1).map(|(p, q)| (q - p) * scale).collect()
    };

    Ok(TravelingDiracParams { a, b, omega0, tau, m0, m1, x0: x0.to_vec(), x1: x1.to_vec(), disc, degenerate })
}

/// `Λ_t = ∫₀ᵗ ds/m(s)` in the two-arctangent closed form. Zero on the
/// degenerate branch, where `ω0 = 0` makes the value irrelevant.
pub fn lambda_at(p: &TravelingDiracParams, t: f64) -> f64 {
    if p.degenerate || p.disc <= 0.0 {
        return 0.0;
    }
    let root = p.disc.sqrt();
    (((p.a * t - p.b) / root).atan() - (-p.b / root).atan()) / root
}

/// Traveling-Gaussian regression targets at time `t` for one coupled pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalTargets {
    /// Center `η_t` of the Gaussian tube.
    pub mean: Vec<f64>,
    pub u: Vec<f64>,
    pub g: f64,
    /// Mass relative to the pair's initial mass.
    pub m: f64,
}

/// Conditional velocity, growth and mass for the pair `(x0, x1)` carrying
/// masses `(m0, m1)`. The path is normalized to unit initial mass, so only the
/// ratio `m1/m0` matters.
pub fn conditional_targets(
    x0: &[f64],
    x1: &[f64],
    m0: f64,
    m1: f64,
    t: f64,
    cfg: &WfrConfig,
) -> Result<ConditionalTargets, GeometryError> {
    if !(m0 > 0.0) {
        return Err(GeometryError::Domain(format!("initial mass must be positive, got {m0}")));
    }
    let p = traveling_dirac(x0, x1, 1.0, m1 / m0, cfg)?;
    Ok(targets_from_params(&p, t))
}

pub(crate) fn targets_from_params(p: &TravelingDiracParams, t: f64) -> ConditionalTargets {
    let m = p.mass(t);
    ConditionalTargets { mean: p.position(t), u: p.omega0.iter().map(|w| w / m).collect(), g: p.mass_rate(t) / m, m }
}

/// Trapezoid estimate of `∫₀¹ ½(|u|² + δ² g²)·m dt` along the path. Test
/// oracle for [`wfr_dd_squared`].
pub fn path_action_quadrature(p: &TravelingDiracParams, cfg: &WfrConfig, steps: usize) -> f64 {
    trapezoid(|t| p.lagrangian(t, cfg.delta), 0.0, 1.0, steps)
}

/// Action of the sub-path on `[s, t]` after reparametrizing it to unit time,
/// i.e. `(t − s)·∫ₛᵗ L dt`. For a geodesic this is the squared distance
/// between the two intermediate Diracs.
pub fn segment_action_quadrature(p: &TravelingDiracParams, cfg: &WfrConfig, s: f64, t: f64, steps: usize) -> f64 {
    (t - s) * trapezoid(|r| p.lagrangian(r, cfg.delta), s, t, steps)
}

fn trapezoid(f: impl Fn(f64) -> f64, lo: f64, hi: f64, steps: usize) -> f64 {
    let steps = steps.max(1);
    let h = (hi - lo) / steps as f64;
    let mut acc = 0.5 * (f(lo) + f(hi));
    for k in 1..steps {
        acc += f(lo + h * k as f64);
    }
    acc * h
}
