//! Trains on a single source point and a single target point carrying twice
//! the mass, then compares the learned fields and action with the traveling
//! Dirac in closed form.

use ndarray::{array, Array2};
use wfrfm::datagen::{Snapshot, SnapshotSet};
use wfrfm::geometry::{self, distance};
use wfrfm::infer::{integrate, trajectory_action, ActionWeights};
use wfrfm::nn::AdamConfig;
use wfrfm::train::{train, NetConfig, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let x0 = [0.0, 0.0];
    let x1 = [0.8, 0.6];
    let delta = 1.0;
    let set = SnapshotSet {
        snapshots: vec![
            Snapshot { time: 0.0, points: array![[x0[0], x0[1]]], growth: None },
            // Two coincident target points: total target mass twice the source.
            Snapshot { time: 1.0, points: array![[x1[0], x1[1]], [x1[0], x1[1]]], growth: None },
        ],
        seed: None,
        generator: serde_json::Value::Null,
    };
    let cfg = TrainConfig {
        delta,
        epochs: 3000,
        batch_size: 256,
        net: NetConfig { hidden: 64, layers: 4 },
        adam: AdamConfig { lr: 2e-3, ..AdamConfig::default() },
        lr_final: Some(1e-5),
        ..TrainConfig::default()
    };
    let out = train(&set, &cfg)?;
    let c = &out.couplings[0];
    println!("pairs {}, expected ratio {:.6}", c.pairs.len(), c.expected_ratio());

    let path = geometry::traveling_dirac(&x0, &x1, 1.0, 2.0, &cfg.wfr())?;
    let (mut ev, mut eg) = (0.0f64, 0.0f64);
    for k in 0..=100 {
        let t = k as f64 / 100.0;
        let x = path.position(t);
        let v = out.models.velocity.forward(&x, t)?;
        let g = out.models.growth.forward(&x, t)?[0];
        let u = path.velocity(t);
        let err: f64 = v.iter().zip(&u).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = u.iter().map(|a| a * a).sum::<f64>().sqrt();
        ev = ev.max(err / norm);
        eg = eg.max((g - path.growth(t)).abs() / path.growth(t).abs());
    }
    let traj = integrate(&out.models, &Array2::from_shape_vec((1, 2), x0.to_vec())?.view(), 0.0, 1.0, 1.0 / 400.0)?;
    let action = trajectory_action(&traj, &out.models, delta, ActionWeights::RelativeToStart)?;
    let exact = geometry::wfr_dd_squared(1.0, 2.0, distance(&x0, &x1), delta)?;
    println!("max on-path relative error: velocity {ev:.4}, growth {eg:.4}");
    println!("final mass {:.5} (target 2)", traj.masses.last().unwrap()[0]);
    println!("action {action:.6}, closed form {exact:.6}, relative gap {:.4}", (action - exact).abs() / exact);
    println!("last loss {:.3e}", out.log.last().unwrap().loss);
    Ok(())
}
