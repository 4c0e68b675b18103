//! Accuracy ladder on the double-integrator problem: solve the level-bound
//! program at increasing polynomial degrees and compare each bound against
//! the brute-force oracle curve via the integral-ratio accuracy metric.
//!
//! Run with: cargo run --release --example degree_sweep

use rdinvariant::invariant::{compute_gamma, parse_problem, Degrees, GammaConfig};
use rdinvariant::oracle::{accuracy, gamma_star_curve, OracleConfig};

fn main() {
    let def = parse_problem(include_str!("../../../problems/double_integrator.problem"))
        .expect("problem file");
    let oracle_cfg = OracleConfig::new(vec![-6.0, -16.0], vec![6.0, 16.0]);

    // Dense reference grid and the oracle threshold on it.
    let n = 61usize;
    let (lo, hi) = (-1.5f64, 3.721f64);
    let r_grid: Vec<f64> = (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect();
    let r_pts: Vec<Vec<f64>> = r_grid.iter().map(|&r| vec![r]).collect();
    let star: Vec<_> = gamma_star_curve(&def.system, 0, &r_pts, &oracle_cfg)
        .expect("oracle")
        .into_iter()
        .map(|(_, g)| g)
        .collect();

    println!("degree  accuracy  solve_time");
    for degree in [3u32, 4, 5, 6, 7] {
        let t = std::time::Instant::now();
        let cfg = GammaConfig {
            degrees: Degrees {
                gamma: degree,
                q: None,
                s: None,
            },
            ..GammaConfig::default()
        };
        let res = compute_gamma(&def.system, &def.refs, 0, &cfg).expect("solve");
        let gh: Vec<f64> = r_grid
            .iter()
            .map(|&r| res.approx.evaluate(&[r]).unwrap())
            .collect();
        let acc = accuracy(&r_grid, &gh, &star).expect("accuracy");
        println!("{degree:>6}  {acc:>8.4}  {:?}", t.elapsed());
    }
}
