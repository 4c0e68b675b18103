//! Brute-force ground truth: for each reference value, minimize the Lyapunov
//! function over the constraint boundary by grid search plus local
//! refinement. Writes the threshold curve as CSV to stdout.
//!
//! Run with: cargo run --release --example oracle_curve > curve.csv

use rdinvariant::invariant::parse_problem;
use rdinvariant::oracle::{gamma_star_curve, OracleConfig};

fn main() {
    let def = parse_problem(include_str!("../../../problems/double_integrator.problem"))
        .expect("problem file");
    let cfg = OracleConfig::new(vec![-6.0, -16.0], vec![6.0, 16.0]);

    let n = 201usize;
    let (lo, hi) = (-1.5f64, 3.721f64);
    let r_pts: Vec<Vec<f64>> = (0..n)
        .map(|i| vec![lo + (hi - lo) * i as f64 / (n - 1) as f64])
        .collect();
    let curve = gamma_star_curve(&def.system, 0, &r_pts, &cfg).expect("oracle");

    println!("r,gamma_star,x1_min,x2_min");
    for (r, g) in &curve {
        let x = g.minimizer.clone().unwrap_or_else(|| vec![f64::NAN; 2]);
        println!("{:.16e},{:.16e},{:.16e},{:.16e}", r[0], g.value, x[0], x[1]);
    }
}
