use ndarray::array;
use wfrfm::infer::{integrate, predicted_weights};
use wfrfm::nn::Mlp;
use wfrfm::train::ModelPair;

/// `v(x, t) = x`, `g = 0.3 t` in one dimension.
fn linear_models() -> ModelPair {
    let mut velocity = Mlp::zeros(&[2, 1]).unwrap();
    velocity.layers[0].weight[[0, 0]] = 1.0;
    let mut growth = Mlp::zeros(&[2, 1]).unwrap();
    growth.layers[0].weight[[0, 1]] = 0.3;
    ModelPair { velocity, growth }
}

#[test]
fn euler_converges_at_first_order() {
    let m = linear_models();
    let x0 = array![[0.5], [-1.2]];
    let (t0, t1): (f64, f64) = (0.25, 1.25);
    let exact_x = |x: f64| x * (t1 - t0).exp();
    let exact_log_m = 0.15 * (t1 * t1 - t0 * t0);
    let mut errors = Vec::new();
    for dt in [0.02, 0.01, 0.005, 0.0025] {
        let traj = integrate(&m, &x0.view(), t0, t1, dt).unwrap();
        let xs = traj.final_state();
        let ex = (0..2).map(|r| (xs[[r, 0]] - exact_x(x0[[r, 0]])).abs()).fold(0.0, f64::max);
        let em = (traj.masses.last().unwrap()[0].ln() - exact_log_m).abs();
        errors.push(ex.max(em));
    }
    for w in errors.windows(2) {
        let order = (w[0] / w[1]).log2();
        assert!((0.9..1.1).contains(&order), "observed order {order} from {errors:?}");
    }
}

#[test]
fn weights_at_start_are_uniform() {
    let m = linear_models();
    let traj = integrate(&m, &array![[0.1], [0.2], [0.3]].view(), 0.0, 2.0, 0.1).unwrap();
    let w = predicted_weights(&traj, &[0.0, 0.55, 2.0]).unwrap();
    assert_eq!(w[0].mass_ratio, 1.0);
    assert!(w[0].weights.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
    assert!(w.iter().all(|s| s.masses.iter().all(|m| *m > 0.0)));
    assert!(w[1].mass_ratio > 1.0 && w[1].mass_ratio < w[2].mass_ratio);
    assert!(predicted_weights(&traj, &[-0.1]).is_err());
}
