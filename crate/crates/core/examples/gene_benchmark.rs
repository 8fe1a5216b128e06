//! Simulates the toggle-switch population, trains at δ = 1.5, propagates the
//! first snapshot, and reports W1, relative mass error, growth correlation and
//! path action against the static reference.
//!
//! Optional arguments: `epochs hidden layers batch_size seed`.

use std::time::Instant;

use wfrfm::datagen::{simulate_gene, GeneSimParams};
use wfrfm::metrics::{evaluate, EvalConfig};
use wfrfm::oet::static_wfr_squared;
use wfrfm::train::{train, NetConfig, TrainConfig};

fn arg<T: std::str::FromStr>(k: usize, default: T) -> T {
    std::env::args().nth(k).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed: u64 = arg(5, 0);
    let started = Instant::now();
    let sim = simulate_gene(&GeneSimParams::default(), seed)?;
    let data = sim.snapshots;
    println!("counts {:?} at times {:?}", data.counts(), data.times());

    let delta = 1.5;
    let mut cfg = TrainConfig {
        delta,
        epochs: arg(1, 4000),
        net: NetConfig { hidden: arg(2, 128), layers: arg(3, 4) },
        batch_size: arg(4, 128),
        seed,
        ..TrainConfig::default()
    };
    cfg.lr_final = Some(cfg.adam.lr * 0.01);
    let out = train(&data, &cfg)?;
    let trained = started.elapsed().as_secs_f64();
    for c in &out.couplings {
        println!(
            "interval {}: {} pairs, ratio {:.4}, sigma {:.4}, deaths {}, births {}",
            c.index,
            c.pairs.len(),
            c.expected_ratio(),
            c.sigma,
            c.death_rows,
            c.birth_cols
        );
    }
    let tail = &out.log[out.log.len().saturating_sub(100)..];
    println!("final loss (mean of last 100) {:.4e}", tail.iter().map(|r| r.loss).sum::<f64>() / tail.len() as f64);

    let eval = EvalConfig { delta, seed, ..EvalConfig::default() };
    let (report, _) = evaluate(&out.models, &data, &eval)?;
    println!("diameter {:.4}", report.diameter);
    for m in &report.times {
        println!(
            "t = {}: W1 {:.4} ({:.2}% of diameter), RME {:.4}, predicted {:.1} vs {}",
            m.time,
            m.w1,
            100.0 * m.w1 / report.diameter,
            m.rme,
            m.n_pred,
            m.n_true
        );
    }
    println!("growth correlation {:.4}", report.growth_correlation.unwrap_or(f64::NAN));

    let first = &data.snapshots[0];
    let last = data.snapshots.last().unwrap();
    let n0 = first.count() as f64;
    let mu0 = vec![1.0 / n0; first.count()];
    let mu1 = vec![1.0 / n0; last.count()];
    let reference = static_wfr_squared(&mu0, &mu1, &first.points.view(), &last.points.view(), delta, &cfg.oet)?;
    let action = report.action.unwrap();
    println!(
        "action {action:.4}, static reference {reference:.4}, relative gap {:.4}",
        (action - reference).abs() / reference
    );
    let mut chain = 0.0;
    let span = last.time - first.time;
    for w in data.snapshots.windows(2) {
        let a = vec![1.0 / n0; w[0].count()];
        let b = vec![1.0 / n0; w[1].count()];
        let s = static_wfr_squared(&a, &b, &w[0].points.view(), &w[1].points.view(), delta, &cfg.oet)?;
        chain += span * s / (w[1].time - w[0].time);
    }
    println!("chained reference {chain:.4}, relative gap {:.4}", (action - chain).abs() / chain);
    println!("training {trained:.1} s, total {:.1} s", started.elapsed().as_secs_f64());
    Ok(())
}
