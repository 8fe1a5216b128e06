mod common;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wfrfm::nn::Mlp;

/// Scalar re-evaluation of the network with explicit loops.
fn by_hand(net: &Mlp, input: &[f64]) -> Vec<f64> {
    let mut a = input.to_vec();
    let last = net.layers.len() - 1;
    for (l, layer) in net.layers.iter().enumerate() {
        let mut next = Vec::new();
        for o in 0..layer.bias.len() {
            let mut z = layer.bias[o];
            for (i, ai) in a.iter().enumerate() {
                z += layer.weight[[o, i]] * ai;
            }
            if l < last && z < 0.0 {
                z *= 0.01;
            }
            next.push(z);
        }
        a = next;
    }
    a
}

#[test]
fn forward_matches_scalar_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for trial in 0..20 {
        let net = Mlp::new(&[4, 7, 5, 3], trial).unwrap();
        let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let t = rng.gen_range(0.0..1.0);
        let got = net.forward(&x, t).unwrap();
        let mut input = x.clone();
        input.push(t);
        for (a, b) in got.iter().zip(by_hand(&net, &input)) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }
}

#[test]
fn batch_rows_match_single_evaluations() {
    let net = Mlp::new(&[3, 16, 16, 2], 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let batch = Array2::from_shape_fn((11, 3), |_| rng.gen_range(-1.0..1.0));
    let out = net.forward_batch(&batch.view()).unwrap();
    for (r, row) in batch.rows().into_iter().enumerate() {
        let single = net.forward(&[row[0], row[1]], row[2]).unwrap();
        for (a, b) in single.iter().zip(out.row(r).iter()) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }
}

#[test]
fn backprop_matches_finite_differences() {
    for seed in 0..100 {
        let worst = common::gradient_check_trial(seed);
        assert!(worst <= 1e-4, "trial {seed}: relative error {worst}");
    }
}
