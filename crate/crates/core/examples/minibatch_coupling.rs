//! Trains on a 3000-point two-snapshot mixture twice, once with a single
//! full coupling and once with 2000-point OET blocks, and compares the W1
//! of the propagated populations.

use std::time::Instant;

use wfrfm::datagen::{gaussian_mixture_snapshots, MixtureComponent, MixtureSpec};
use wfrfm::metrics::{evaluate, EvalConfig};
use wfrfm::train::{train, NetConfig, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let c = |mean: &[f64], count| MixtureComponent { mean: mean.to_vec(), std: 0.2, count };
    let spec = MixtureSpec {
        initial: vec![c(&[0.0, 1.0], 600), c(&[0.0, -1.0], 2400)],
        final_: vec![c(&[0.0, 1.0], 2000), c(&[-1.0, -1.5], 500), c(&[1.0, -1.5], 500)],
        ..MixtureSpec::default()
    };
    let data = gaussian_mixture_snapshots(&spec, 0)?;
    let mut w1 = Vec::new();
    for ot_batch in [3000, 2000] {
        let started = Instant::now();
        let mut cfg = TrainConfig {
            delta: 1.0,
            ot_batch,
            epochs: 1500,
            net: NetConfig { hidden: 128, layers: 4 },
            ..TrainConfig::default()
        };
        cfg.lr_final = Some(cfg.adam.lr * 0.01);
        let out = train(&data, &cfg)?;
        let (report, _) = evaluate(&out.models, &data, &EvalConfig { delta: cfg.delta, ..EvalConfig::default() })?;
        let m = &report.times[0];
        println!(
            "B = {ot_batch} ({} coupling, {} pairs): W1 {:.4}, RME {:.4}, diameter {:.3}, {:.1} s",
            if ot_batch >= 3000 { "full" } else { "mini-batch" },
            out.couplings.iter().map(|c| c.pairs.len()).sum::<usize>(),
            m.w1,
            m.rme,
            report.diameter,
            started.elapsed().as_secs_f64()
        );
        w1.push((m.w1, report.diameter));
    }
    let gap = (w1[0].0 - w1[1].0).abs();
    println!("W1 difference {gap:.4} = {:.2}% of the data diameter", 100.0 * gap / w1[0].1);
    Ok(())
}
