//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use ndarray::{Array2, ArrayView2};

/// Coordinate-descent minimizer of
/// `⟨C,γ⟩ + KL(γ𝟙‖μ0) + KL(γᵀ𝟙‖μ1) + ε·KL(γ‖μ0⊗μ1)` over `γ ≥ 0`.
/// With `eps == 0` every coordinate step is solved in closed form.
pub fn brute_force_oet(mu0: &[f64], mu1: &[f64], cost: &ArrayView2<f64>, eps: f64) -> Array2<f64> {
    let (n0, n1) = cost.dim();
    let mut gamma = Array2::<f64>::zeros((n0, n1));
    for i in 0..n0 {
        for j in 0..n1 {
            if cost[[i, j]].is_finite() {
                gamma[[i, j]] = (mu0[i] * mu1[j]).sqrt() * (-0.5 * cost[[i, j]]).exp() / n0.max(n1) as f64;
            }
        }
    }
    for _sweep in 0..200_000 {
        let mut change: f64 = 0.0;
        for i in 0..n0 {
            for j in 0..n1 {
                let c = cost[[i, j]];
                if !c.is_finite() {
                    continue;
                }
                let r = gamma.row(i).sum() - gamma[[i, j]];
                let q = gamma.column(j).sum() - gamma[[i, j]];
                let new = if eps == 0.0 {
                    // (r + γ)(q + γ) = μ0 μ1 e^{-C}
                    let p = mu0[i] * mu1[j] * (-c).exp();
                    (0.5 * (-(r + q) + ((r - q).powi(2) + 4.0 * p).sqrt())).max(0.0)
                } else {
                    solve_regularized_entry(r, q, mu0[i], mu1[j], c, eps)
                };
                change = change.max((new - gamma[[i, j]]).abs());
                gamma[[i, j]] = new;
            }
        }
        if change < 1e-15 {
            break;
        }
    }
    gamma
}

/// Root of `C + ln((r+γ)/μ0) + ln((q+γ)/μ1) + ε ln(γ/(μ0 μ1)) = 0` by bisection
/// in `ln γ`.
fn solve_regularized_entry(r: f64, q: f64, m0: f64, m1: f64, c: f64, eps: f64) -> f64 {
    let h = |lg: f64| {
        let g = lg.exp();
        c + ((r + g) / m0).ln() + ((q + g) / m1).ln() + eps * (lg - (m0 * m1).ln())
    };
    let (mut lo, mut hi) = (-800.0, 50.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if h(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    (0.5 * (lo + hi)).exp()
}

/// Balanced entropic transport with reference `μ0⊗μ1`, by plain alternating
/// marginal scaling.
pub fn balanced_sinkhorn(mu0: &[f64], mu1: &[f64], cost: &ArrayView2<f64>, eps: f64, iters: usize) -> Array2<f64> {
    let (n0, n1) = cost.dim();
    let k = Array2::from_shape_fn((n0, n1), |(i, j)| mu0[i] * mu1[j] * (-cost[[i, j]] / eps).exp());
    let mut a = vec![1.0; n0];
    let mut b = vec![1.0; n1];
    for _ in 0..iters {
        for i in 0..n0 {
            let s: f64 = (0..n1).map(|j| k[[i, j]] * b[j]).sum();
            a[i] = mu0[i] / s;
        }
        for j in 0..n1 {
            let s: f64 = (0..n0).map(|i| k[[i, j]] * a[i]).sum();
            b[j] = mu1[j] / s;
        }
    }
    Array2::from_shape_fn((n0, n1), |(i, j)| a[i] * k[[i, j]] * b[j])
}

/// Exact W1 between two weighted samples on the real line via the quantile
/// functions.
pub fn w1_1d(x: &[f64], wx: &[f64], y: &[f64], wy: &[f64]) -> f64 {
    let sorted = |p: &[f64], w: &[f64]| {
        let total: f64 = w.iter().sum();
        let mut v: Vec<(f64, f64)> = p.iter().zip(w).map(|(a, b)| (*a, b / total)).collect();
        v.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        v
    };
    let (a, b) = (sorted(x, wx), sorted(y, wy));
    // Integrate |F⁻¹ − G⁻¹| over the merged breakpoints.
    let (mut i, mut j) = (0, 0);
    let (mut ra, mut rb) = (a[0].1, b[0].1);
    let mut total = 0.0;
    while i < a.len() && j < b.len() {
        let step = ra.min(rb);
        total += step * (a[i].0 - b[j].0).abs();
        ra -= step;
        rb -= step;
        if ra <= 1e-15 {
            i += 1;
            if i < a.len() {
                ra += a[i].1;
            }
        }
        if rb <= 1e-15 {
            j += 1;
            if j < b.len() {
                rb += b[j].1;
            }
        }
    }
    total
}

/// Euclidean distance between rows.
pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
}

/// Builds a random small network and batch and compares backpropagation to
/// central finite differences of `Σ w·|out − y|²`. Returns the worst relative
/// error over all parameters.
pub fn gradient_check_trial(seed: u64) -> f64 {
    use rand::{Rng, SeedableRng};
    use wfrfm::nn::Mlp;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    loop {
        let mut dims = vec![rng.gen_range(2..6)];
        for _ in 0..rng.gen_range(1..4) {
            dims.push(rng.gen_range(3..9));
        }
        dims.push(rng.gen_range(1..4));
        let mut net = Mlp::new(&dims, rng.gen()).unwrap();
        for l in &mut net.layers {
            l.bias.mapv_inplace(|_| rng.gen_range(-0.5..0.5));
        }
        let n = 4;
        let x = Array2::from_shape_fn((n, dims[0]), |_| rng.gen_range(-1.0..1.0));
        let y = Array2::from_shape_fn((n, *dims.last().unwrap()), |_| rng.gen_range(-1.0..1.0));
        let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..2.0)).collect();

        let cache = net.forward_cached(&x.view()).unwrap();
        // Stay clear of the rectifier kink so differences are smooth.
        let closest = cache.pre.iter().flat_map(|p| p.iter()).fold(f64::INFINITY, |m, v| m.min(v.abs()));
        if closest < 1e-3 {
            continue;
        }
        let loss = |net: &Mlp| {
            let out = net.forward_batch(&x.view()).unwrap();
            let mut total = 0.0;
            for r in 0..n {
                for c in 0..out.ncols() {
                    total += w[r] * (out[[r, c]] - y[[r, c]]).powi(2);
                }
            }
            total
        };
        let out = cache.output();
        let grad_out = Array2::from_shape_fn(out.dim(), |(r, c)| 2.0 * w[r] * (out[[r, c]] - y[[r, c]]));
        let grads = net.backward(&cache, &grad_out.view());
        let analytic: Vec<f64> = grads.iter().flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied()).collect();

        let base = net.params();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for k in 0..base.len() {
            let mut p = base.clone();
            p[k] = base[k] + h;
            net.set_params(&p).unwrap();
            let up = loss(&net);
            p[k] = base[k] - h;
            net.set_params(&p).unwrap();
            let down = loss(&net);
            let fd = (up - down) / (2.0 * h);
            let rel = (fd - analytic[k]).abs() / (fd.abs().max(analytic[k].abs()).max(1e-6));
            worst = worst.max(rel);
        }
        return worst;
    }
}

/// Finite-difference check of the CUFM loss gradient through a velocity and a
/// growth network on a random batch. Returns the worst relative error.
pub fn cufm_gradient_trial(seed: u64) -> f64 {
    use rand::{Rng, SeedableRng};
    use wfrfm::train::{cufm_loss, cufm_loss_from_outputs, ModelPair, NetConfig, TrainingBatch};

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    loop {
        let d = rng.gen_range(1..4);
        let net = NetConfig { hidden: rng.gen_range(3..8), layers: rng.gen_range(2..4) };
        let mut models = ModelPair::new(d, &net, rng.gen()).unwrap();
        for l in models.velocity.layers.iter_mut().chain(models.growth.layers.iter_mut()) {
            l.bias.mapv_inplace(|_| rng.gen_range(-0.5..0.5));
        }
        let n = 5;
        let batch = TrainingBatch {
            inputs: Array2::from_shape_fn((n, d + 1), |_| rng.gen_range(-1.0..1.0)),
            u_target: Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0)),
            g_target: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            w: (0..n).map(|_| rng.gen_range(0.1..2.0)).collect(),
        };
        let kappa = rng.gen_range(0.5..3.0);
        let cv = models.velocity.forward_cached(&batch.inputs.view()).unwrap();
        let cg = models.growth.forward_cached(&batch.inputs.view()).unwrap();
        let closest =
            cv.pre.iter().chain(cg.pre.iter()).flat_map(|p| p.iter()).fold(f64::INFINITY, |m, v| m.min(v.abs()));
        if closest < 1e-3 {
            continue;
        }
        let parts = cufm_loss_from_outputs(&cv.output().view(), &cg.output().view(), &batch, kappa);
        let gv = models.velocity.backward(&cv, &parts.grad_v.view());
        let gg = models.growth.backward(&cg, &parts.grad_g.view());
        let flat = |g: &Vec<wfrfm::nn::Layer>| -> Vec<f64> {
            g.iter().flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied()).collect()
        };
        let mut worst: f64 = 0.0;
        let h = 1e-5;
        for which in 0..2 {
            let analytic = if which == 0 { flat(&gv) } else { flat(&gg) };
            let base = if which == 0 { models.velocity.params() } else { models.growth.params() };
            for k in 0..base.len() {
                let eval = |value: f64| {
                    let mut p = base.clone();
                    p[k] = value;
                    let mut m = models.clone();
                    if which == 0 {
                        m.velocity.set_params(&p).unwrap();
                    } else {
                        m.growth.set_params(&p).unwrap();
                    }
                    cufm_loss(&m, &batch, kappa).unwrap().loss
                };
                let fd = (eval(base[k] + h) - eval(base[k] - h)) / (2.0 * h);
                let rel = (fd - analytic[k]).abs() / fd.abs().max(analytic[k].abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
        return worst;
    }
}
