//! Solves an unbalanced entropic transport problem between two small
//! clouds and splits the plan into the semi-coupling used for training.

use ndarray::array;
use wfrfm::oet::{build_cost, oet_objective, semi_coupling, solve_oet, OetConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let delta = 1.0;
    let x0 = array![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
    let x1 = array![[0.2, 0.1], [1.1, 0.2], [1.0, 1.1], [0.1, 1.2], [2.6, 2.4]];
    // Three source points of mass 1/3 and five targets of the same weight:
    // total mass grows by 5/3 and the far target is mostly created.
    let mu0 = vec![1.0 / 3.0; 3];
    let mu1 = vec![1.0 / 3.0; 5];

    let cost = build_cost(&x0.view(), &x1.view(), delta)?;
    let plan = solve_oet(&mu0, &mu1, &cost, &OetConfig::default())?;
    println!(
        "OET: {:?} after {} iterations, ε = {}, objective {:.6}, WFR² = {:.6}",
        plan.status,
        plan.iterations,
        plan.epsilon,
        oet_objective(&plan, &mu0, &mu1),
        2.0 * delta * delta * oet_objective(&plan, &mu0, &mu1)
    );
    println!("plan row sums {:.4?}", plan.row_sums());
    println!("plan col sums {:.4?}", plan.col_sums());

    let sc = semi_coupling(&plan, &mu0, &mu1, 1e-4);
    println!("\ndeath rows {:?}, birth columns {:?}, folds {:?}", sc.death_rows, sc.birth_cols, sc.birth_folds);
    println!("{:>3} {:>3} {:>9} {:>9} {:>7}", "i", "j", "γ0", "γ1", "ratio");
    for ((i, j), &g0) in sc.gamma0.indexed_iter() {
        if g0 > 1e-6 {
            let g1 = sc.gamma1[[i, j]];
            println!("{i:>3} {j:>3} {g0:9.5} {g1:9.5} {:7.3}", g1 / g0);
        }
    }
    let rows: Vec<f64> = sc.gamma0.rows().into_iter().map(|r| r.sum()).collect();
    let cols: Vec<f64> = sc.gamma1.columns().into_iter().map(|c| c.sum()).collect();
    println!("\nγ0 row sums {rows:.6?}\nγ1 col sums {cols:.6?}");
    Ok(())
}
