//! Traveling-Dirac geodesics: the closed-form path between two weighted
//! points, its action, and how the cost behaves as the points separate.

use wfrfm::geometry::{log_cos_cost, path_action_quadrature, traveling_dirac, wfr_dd_squared, WfrConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = WfrConfig::with_delta(1.0);
    let (x0, x1) = ([0.0, 0.0], [0.8, 0.6]);
    let p = traveling_dirac(&x0, &x1, 1.0, 2.0, &cfg)?;

    println!("{:>5} {:>9} {:>9} {:>8} {:>9} {:>9}", "t", "x", "y", "mass", "|u|", "g");
    for k in 0..=10 {
        let t = k as f64 / 10.0;
        let x = p.position(t);
        let u = p.velocity(t);
        let speed = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        println!("{t:5.2} {:9.5} {:9.5} {:8.5} {:9.5} {:9.5}", x[0], x[1], p.mass(t), speed, p.growth(t));
    }

    let closed = wfr_dd_squared(1.0, 2.0, 1.0, cfg.delta)?;
    let quad = path_action_quadrature(&p, &cfg, 20_000);
    println!("\naction: closed form {closed:.8}, quadrature {quad:.8}");

    // The transport cost blows up at πδ; beyond it mass is destroyed and recreated.
    for r in [0.5, 1.5, 2.5, 3.0, 3.1, 3.2] {
        match log_cos_cost(r, cfg.delta) {
            Ok(c) => println!("cost at distance {r:4.2}: {c:.4}"),
            Err(e) => println!("cost at distance {r:4.2}: {e}"),
        }
    }
    let far = traveling_dirac(&[0.0], &[4.0], 1.0, 1.0, &cfg);
    println!("geodesic across distance 4: {:?}", far.map(|_| ()).map_err(|e| e.to_string()));
    Ok(())
}
