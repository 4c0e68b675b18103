// temporary: measure worst gamma_hat - gamma_star per degree on a fine grid
use rdinvariant::invariant::{compute_gamma, parse_problem, Degrees, GammaConfig};
use rdinvariant::oracle::{gamma_star, OracleConfig};

fn main() {
    let def = parse_problem(include_str!("../../../problems/double_integrator.problem")).unwrap();
    let cfg = OracleConfig::new(vec![-6.0, -16.0], vec![6.0, 16.0]);
    let n = 1000usize;
    let (lo, hi) = (-1.5f64, 3.721f64);
    let grid: Vec<f64> = (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect();
    let star: Vec<f64> = grid
        .iter()
        .map(|&r| gamma_star(&def.system, 0, &[r], &cfg).unwrap().value)
        .collect();
    for (deg, k) in [(3u32, 0u32), (4, 0), (5, 0), (6, 0), (7, 0), (5, 1), (2, 2)] {
        let gc = GammaConfig {
            degrees: Degrees { gamma: deg, q: None, s: None },
            factor_k: k,
            ..GammaConfig::default()
        };
        let res = compute_gamma(&def.system, &def.refs, 0, &gc).unwrap();
        let mut worst = f64::NEG_INFINITY;
        let mut worst_r = 0.0;
        for (&r, &gs) in grid.iter().zip(&star) {
            let over = res.approx.evaluate(&[r]).unwrap() - gs;
            if over > worst {
                worst = over;
                worst_r = r;
            }
        }
        println!("deg {deg} k {k}: worst overshoot {worst:.3e} at r = {worst_r:.4}");
    }
}
