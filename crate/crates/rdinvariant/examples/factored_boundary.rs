//! Boundary-factored level bounds: write the bound as cbar^k * gamma_tilde so
//! it vanishes exactly where the steady-state constraint margin cbar hits
//! zero. This matches the true threshold's behavior at the edge of the
//! admissible reference set, where it collapses to zero.
//!
//! Run with: cargo run --release --example factored_boundary

use rdinvariant::invariant::{compute_gamma, parse_problem, Degrees, GammaConfig};

fn main() {
    let def = parse_problem(include_str!("../../../problems/double_integrator.problem"))
        .expect("problem file");

    for (factor_k, degree) in [(0u32, 5u32), (1, 5), (2, 2)] {
        let cfg = GammaConfig {
            degrees: Degrees {
                gamma: degree,
                q: None,
                s: None,
            },
            factor_k,
            ..GammaConfig::default()
        };
        let res = compute_gamma(&def.system, &def.refs, 0, &cfg).expect("solve");
        println!("k = {factor_k}, gamma_tilde degree {degree}:");
        for r in [-1.5, 0.0, 1.0, 2.0, 3.0, 3.5, 3.721] {
            let g = res.approx.evaluate(&[r]).unwrap();
            println!("  gamma_hat({r:>6.3}) = {g:.6}");
        }
        // With k >= 1 the bound is exactly zero at the right domain endpoint,
        // where the constraint becomes active at the steady state itself.
        if factor_k >= 1 {
            let g_end = res.approx.evaluate(&[3.721]).unwrap();
            println!("  (endpoint value {g_end:.3e} pinned to zero by the cbar factor)");
        }
    }
}
