//! Euler integration of trained fields: positions follow `v`, masses grow by
//! `exp(g·Δt)`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::NnError;
use crate::train::ModelPair;

#[derive(Debug, Error)]
pub enum InferError {
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error("non-finite model output at t = {t}, x = {x:?}")]
    NonFinite { t: f64, x: Vec<f64> },
    #[error("time {time} outside the trajectory range [{start}, {end}]")]
    OutOfRange { time: f64, start: f64, end: f64 },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Rows per network call; fixed so results do not depend on thread count.
const CHUNK: usize = 256;

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    /// One `n × d` array per time.
    pub states: Vec<Array2<f64>>,
    /// Per-particle masses, all ones at the first time.
    pub masses: Vec<Array1<f64>>,
}

impl Trajectory {
    pub fn particles(&self) -> usize {
        self.states[0].nrows()
    }

    pub fn start(&self) -> f64 {
        self.times[0]
    }

    pub fn end(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn final_state(&self) -> &Array2<f64> {
        self.states.last().unwrap()
    }
}

/// Velocity and growth of `models` at the rows of `x`, all at time `t`.
pub fn evaluate_fields(
    models: &ModelPair,
    x: &ArrayView2<f64>,
    t: f64,
) -> Result<(Array2<f64>, Array1<f64>), InferError> {
    let n = x.nrows();
    if x.ncols() != models.dim() {
        return Err(InferError::Invalid(format!(
            "points have {} coordinates, model expects {}",
            x.ncols(),
            models.dim()
        )));
    }
    let starts: Vec<usize> = (0..n).step_by(CHUNK).collect();
    let parts: Vec<(Array2<f64>, Array2<f64>)> = starts
        .par_iter()
        .map(|&a| {
            let b = (a + CHUNK).min(n);
            let block = x.slice(s![a..b, ..]);
            let tcol = Array2::from_elem((b - a, 1), t);
            let input = concatenate![Axis(1), block, tcol];
            Ok((models.velocity.forward_batch(&input.view())?, models.growth.forward_batch(&input.view())?))
        })
        .collect::<Result<_, NnError>>()?;
    let mut v = Array2::zeros((n, models.dim()));
    let mut g = Array1::zeros(n);
    for (&a, (pv, pg)) in starts.iter().zip(parts) {
        let b = a + pv.nrows();
        v.slice_mut(s![a..b, ..]).assign(&pv);
        g.slice_mut(s![a..b]).assign(&pg.column(0));
    }
    for r in 0..n {
        if !g[r].is_finite() || v.row(r).iter().any(|z| !z.is_finite()) {
            return Err(InferError::NonFinite { t, x: x.row(r).to_vec() });
        }
    }
    Ok((v, g))
}

/// Time grid from `t0` to `t_end` with step `dt` that lands exactly on every
/// entry of `stops` inside the range; the last step of each stretch is
/// shortened.
pub fn time_grid(t0: f64, t_end: f64, dt: f64, stops: &[f64]) -> Result<Vec<f64>, InferError> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(InferError::Invalid("dt must be positive".into()));
    }
    if !(t_end > t0) || !t0.is_finite() || !t_end.is_finite() {
        return Err(InferError::Invalid("t_end must exceed t0".into()));
    }
    let mut marks: Vec<f64> = stops.iter().copied().filter(|s| *s > t0 && *s < t_end).collect();
    marks.push(t_end);
    marks.sort_by(|a, b| a.partial_cmp(b).unwrap());
    marks.dedup();
    let mut grid = vec![t0];
    let mut a = t0;
    for b in marks {
        // Tolerance so that float noise does not add a sliver step.
        let steps = (((b - a) / dt) - 1e-9).ceil().max(1.0) as usize;
        for i in 1..steps {
            grid.push(a + i as f64 * dt);
        }
        grid.push(b);
        a = b;
    }
    Ok(grid)
}

pub fn integrate(
    models: &ModelPair,
    x0: &ArrayView2<f64>,
    t0: f64,
    t_end: f64,
    dt: f64,
) -> Result<Trajectory, InferError> {
    integrate_through(models, x0, t0, t_end, dt, &[])
}

/// Like [`integrate`], with grid points placed on every time in `stops`.
pub fn integrate_through(
    models: &ModelPair,
    x0: &ArrayView2<f64>,
    t0: f64,
    t_end: f64,
    dt: f64,
    stops: &[f64],
) -> Result<Trajectory, InferError> {
    if x0.nrows() == 0 {
        return Err(InferError::Invalid("no initial points".into()));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(InferError::Invalid("initial points must be finite".into()));
    }
    let times = time_grid(t0, t_end, dt, stops)?;
    let mut states = Vec::with_capacity(times.len());
    let mut masses = Vec::with_capacity(times.len());
    let mut x = x0.to_owned();
    let mut log_m = Array1::<f64>::zeros(x0.nrows());
    states.push(x.clone());
    masses.push(log_m.mapv(f64::exp));
    for w in times.windows(2) {
        let h = w[1] - w[0];
        let (v, g) = evaluate_fields(models, &x.view(), w[0])?;
        x.scaled_add(h, &v);
        log_m.scaled_add(h, &g);
        states.push(x.clone());
        masses.push(log_m.mapv(f64::exp));
    }
    Ok(Trajectory { times, states, masses })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ActionWeights {
    /// Per-particle masses divided by the initial particle count, so the
    /// initial population has mass one and later mass is carried as is.
    #[default]
    RelativeToStart,
    /// Masses rescaled to total one at every step.
    Renormalized,
}

/// Left Riemann sum of `∫ Σ_i w_i ½(|v|² + δ²g²) dt`, times the total time
/// span.
pub fn trajectory_action(
    traj: &Trajectory,
    models: &ModelPair,
    delta: f64,
    weights: ActionWeights,
) -> Result<f64, InferError> {
    let n = traj.particles() as f64;
    let span = traj.end() - traj.start();
    let mut integral = 0.0;
    for k in 0..traj.times.len() - 1 {
        let h = traj.times[k + 1] - traj.times[k];
        let (v, g) = evaluate_fields(models, &traj.states[k].view(), traj.times[k])?;
        let m = &traj.masses[k];
        let norm = match weights {
            ActionWeights::RelativeToStart => n,
            ActionWeights::Renormalized => m.sum(),
        };
        let mut step = 0.0;
        for r in 0..v.nrows() {
            let speed: f64 = v.row(r).iter().map(|z| z * z).sum();
            step += m[r] * 0.5 * (speed + delta * delta * g[r] * g[r]);
        }
        integral += h * step / norm;
    }
    Ok(span * integral)
}

/// Particle masses at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSnapshot {
    pub time: f64,
    pub states: Array2<f64>,
    pub masses: Array1<f64>,
    /// Masses scaled to sum to one.
    pub weights: Array1<f64>,
    /// Predicted total mass relative to the start: the mean particle mass.
    pub mass_ratio: f64,
}

/// Masses and positions at each requested time. Off-grid times interpolate
/// positions linearly and masses log-linearly.
pub fn predicted_weights(traj: &Trajectory, times: &[f64]) -> Result<Vec<WeightSnapshot>, InferError> {
    times
        .iter()
        .map(|&time| {
            if !(time >= traj.start() && time <= traj.end()) {
                return Err(InferError::OutOfRange { time, start: traj.start(), end: traj.end() });
            }
            let hi = traj.times.partition_point(|t| *t < time);
            let (states, masses) = if traj.times[hi] == time {
                (traj.states[hi].clone(), traj.masses[hi].clone())
            } else {
                let lo = hi - 1;
                let a = (time - traj.times[lo]) / (traj.times[hi] - traj.times[lo]);
                let states = &traj.states[lo] * (1.0 - a) + &traj.states[hi] * a;
                let masses = ndarray::Zip::from(&traj.masses[lo])
                    .and(&traj.masses[hi])
                    .map_collect(|p, q| ((1.0 - a) * p.ln() + a * q.ln()).exp());
                (states, masses)
            };
            let total = masses.sum();
            Ok(WeightSnapshot {
                time,
                weights: &masses / total,
                mass_ratio: total / masses.len() as f64,
                states,
                masses,
            })
        })
        .collect()
}

pub fn trajectory_file_name(k: usize) -> String {
    format!("trajectory_{k}.csv")
}

/// Writes one CSV per snapshot: `particle,time,x0..x{d-1},mass`.
pub fn write_trajectory(snaps: &[WeightSnapshot], dir: &Path) -> Result<Vec<PathBuf>, InferError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| InferError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let mut written = Vec::new();
    for (k, snap) in snaps.iter().enumerate() {
        let path = dir.join(trajectory_file_name(k));
        let mut out = String::from("particle,time");
        for c in 0..snap.states.ncols() {
            out.push_str(&format!(",x{c}"));
        }
        out.push_str(",mass\n");
        for (i, row) in snap.states.rows().into_iter().enumerate() {
            out.push_str(&format!("{i},{:e}", snap.time));
            for v in row {
                out.push_str(&format!(",{v:e}"));
            }
            out.push_str(&format!(",{:e}\n", snap.masses[i]));
        }
        let mut f = fs::File::create(&path).map_err(io(&path))?;
        f.write_all(out.as_bytes()).map_err(io(&path))?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mlp;
    use ndarray::array;

    fn constant_models(d: usize, v: &[f64], g: f64) -> ModelPair {
        // A single linear layer with zero weights outputs its bias.
        let mut velocity = Mlp::zeros(&[d + 1, d]).unwrap();
        velocity.layers[0].bias = Array1::from(v.to_vec());
        let mut growth = Mlp::zeros(&[d + 1, 1]).unwrap();
        growth.layers[0].bias = array![g];
        ModelPair { velocity, growth }
    }

    #[test]
    fn zero_fields_do_nothing() {
        let m = constant_models(2, &[0.0, 0.0], 0.0);
        let x0 = array![[1.0, 2.0], [-1.0, 0.5]];
        let traj = integrate(&m, &x0.view(), 0.0, 1.0, 0.1).unwrap();
        assert_eq!(traj.final_state(), &x0);
        assert!(traj.masses.iter().all(|m| m.iter().all(|v| *v == 1.0)));
        assert_eq!(trajectory_action(&traj, &m, 1.0, ActionWeights::default()).unwrap(), 0.0);
    }

    #[test]
    fn constant_growth_is_exact() {
        let m = constant_models(1, &[0.0], 0.7);
        let traj = integrate(&m, &array![[0.0]].view(), 0.5, 2.0, 0.07).unwrap();
        assert_eq!(traj.end(), 2.0);
        let got = traj.masses.last().unwrap()[0];
        assert!((got - (0.7f64 * 1.5).exp()).abs() < 1e-13);
        let w = predicted_weights(&traj, &[0.5, 2.0]).unwrap();
        assert_eq!(w[0].mass_ratio, 1.0);
        assert!((w[1].mass_ratio - got).abs() < 1e-15);
    }

    #[test]
    fn ln2_doubles() {
        let m = constant_models(1, &[0.0], std::f64::consts::LN_2);
        let traj = integrate(&m, &array![[0.0], [1.0]].view(), 0.0, 1.0, 0.01).unwrap();
        let w = predicted_weights(&traj, &[1.0]).unwrap();
        assert!((w[0].mass_ratio - 2.0).abs() < 1e-12);
        assert!(predicted_weights(&traj, &[1.5]).is_err());
    }

    #[test]
    fn constant_velocity_action() {
        let c = [0.3, -0.4];
        let m = constant_models(2, &c, 0.0);
        let traj = integrate(&m, &array![[0.0, 0.0], [1.0, 1.0]].view(), 1.0, 3.0, 0.1).unwrap();
        let a = trajectory_action(&traj, &m, 2.0, ActionWeights::Renormalized).unwrap();
        assert!((a - 0.5 * 0.25 * 2.0 * 2.0).abs() < 1e-12);
        let pos = traj.final_state();
        assert!((pos[[0, 0]] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn grid_lands_on_stops() {
        let g = time_grid(0.0, 32.0, 0.08, &[8.0, 16.0, 24.0]).unwrap();
        assert_eq!(g.len(), 401);
        for s in [8.0, 16.0, 24.0, 32.0] {
            assert!(g.contains(&s));
        }
        let g = time_grid(0.0, 1.0, 0.3, &[]).unwrap();
        assert_eq!(g, vec![0.0, 0.3, 0.6, 0.8999999999999999, 1.0]);
        assert!(time_grid(1.0, 1.0, 0.1, &[]).is_err());
        assert!(time_grid(0.0, 1.0, 0.0, &[]).is_err());
    }

    #[test]
    fn non_finite_output_is_reported() {
        let m = constant_models(1, &[f64::NAN], 0.0);
        let err = integrate(&m, &array![[0.25]].view(), 0.0, 1.0, 0.5).unwrap_err();
        match err {
            InferError::NonFinite { t, x } => {
                assert_eq!(t, 0.0);
                assert_eq!(x, vec![0.25]);
            }
            e => panic!("unexpected {e}"),
        }
    }
}
