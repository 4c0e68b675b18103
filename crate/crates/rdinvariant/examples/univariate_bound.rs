//! Smallest-value bound for a univariate polynomial: maximize gamma such that
//! p(x) - gamma is a sum of squares. For univariate polynomials, nonnegative
//! and SOS coincide, so the bound equals the global minimum; the example
//! cross-checks against dense sampling.
//!
//! Run with: cargo run --release --example univariate_bound

use rdinvariant::poly::parse_polynomial;
use rdinvariant::sos::{solve, AffineExpr, SosProgram};
use rdinvariant::sdp::SolverSettings;

fn main() {
    let cases = [
        "x^4 - 3*x^2 + x + 4",
        "x^6 - 2*x^3 + 5",
        "(x-1)^2*(x+2)^2 + 0.5",
        "x^2 + 2*x + 3",
    ];
    println!("{:<28} {:>12} {:>12}", "polynomial", "sos_bound", "sampled_min");
    for src in cases {
        let p = parse_polynomial(src, &["x"]).expect("parse");
        let mut prog = SosProgram::new();
        let gamma = prog.make_scalar(&["x"]);
        let expr = AffineExpr::from_poly(p.clone())
            .sub(&AffineExpr::from_decision(&gamma))
            .unwrap();
        prog.add_sos(expr);
        prog.set_objective(vec![(gamma.coeff_ids[0], 1.0)]);
        let sol = solve(&prog, &SolverSettings::default()).expect("solve");
        let bound = sol.decision_values[gamma.coeff_ids[0]];

        // Dense sampling with local refinement as the reference.
        let mut best = f64::INFINITY;
        for i in 0..200_001 {
            let x = -10.0 + 20.0 * i as f64 / 200_000.0;
            best = best.min(p.evaluate(&[x]).unwrap());
        }
        println!("{src:<28} {bound:>12.8} {best:>12.8}");
    }
}
