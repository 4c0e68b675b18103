//! Piecewise level bound: split the reference domain into sub-intervals,
//! solve one low-degree program per piece, and stitch the results into a
//! single piecewise-polynomial bound. Many cheap pieces beat one expensive
//! global polynomial.
//!
//! Run with: cargo run --release --example piecewise_domain

use rdinvariant::invariant::{compute_gamma, parse_problem, tessellate, Degrees, GammaConfig};
use rdinvariant::oracle::{accuracy, gamma_star_curve, OracleConfig};

fn main() {
    let def = parse_problem(include_str!("../../../problems/double_integrator.problem"))
        .expect("problem file");
    let oracle_cfg = OracleConfig::new(vec![-6.0, -16.0], vec![6.0, 16.0]);

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

    println!("pieces  accuracy  solve_time");
    for n_pieces in [1usize, 3, 9] {
        let pieces = if n_pieces == 1 {
            Vec::new()
        } else {
            tessellate(&def.refs.domain, n_pieces).expect("tessellate")
        };
        let t = std::time::Instant::now();
        let cfg = GammaConfig {
            degrees: Degrees {
                gamma: 4,
                q: None,
                s: None,
            },
            pieces,
            workers: 4,
            ..GammaConfig::default()
        };
        let res = compute_gamma(&def.system, &def.refs, 0, &cfg).expect("solve");
        let gh: Vec<f64> = r_grid
            .iter()
            .map(|&r| res.approx.evaluate(&[r]).unwrap())
            .collect();
        let acc = accuracy(&r_grid, &gh, &star).expect("accuracy");
        println!("{n_pieces:>6}  {acc:>8.4}  {:?}", t.elapsed());
    }
}
