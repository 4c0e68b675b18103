//! Direct use of the semidefinite solver on a small hand-built problem:
//! minimize X11 subject to X12 = X22 = 1 and X positive semidefinite.
//! The optimum is X = [[1, 1], [1, 1]] with value 1 (since X11*X22 >= X12^2).
//!
//! Run with: cargo run --release --example sdp_solve

use rdinvariant::sdp::{
    planted_sdp, smat, solve, Cone, SdpProblem, SolverSettings, SparseMatrix,
};

fn main() {
    // svec layout for a 2x2 block: [X11, sqrt(2)*X12, X22].
    let s2 = 2f64.sqrt();
    let mut a = SparseMatrix::new(2, 3);
    a.push(0, 1, 1.0 / s2); // X12 = 1
    a.push(1, 2, 1.0); // X22 = 1
    let problem = SdpProblem {
        objective: vec![1.0, 0.0, 0.0],
        equality_lhs: a,
        equality_rhs: vec![1.0, 1.0],
        cones: vec![Cone::Psd(2)],
    };
    let sol = solve(&problem, &SolverSettings::default());
    let x = smat(&sol.primal, 2);
    println!("status {:?}", sol.status);
    println!("minimum X11 = {:.9} (expected 1)", sol.objective_value);
    println!("X = [[{:.6}, {:.6}], [{:.6}, {:.6}]]", x[(0, 0)], x[(0, 1)], x[(1, 0)], x[(1, 1)]);

    // A few randomly planted problems with known optima.
    println!("\nplanted problems:");
    for seed in 0..5u64 {
        let (p, opt) = planted_sdp(seed);
        let sol = solve(&p, &SolverSettings::default());
        println!(
            "  seed {seed}: solved {:>12.6}, planted {:>12.6}, rel err {:.2e}",
            sol.objective_value,
            opt,
            ((sol.objective_value - opt) / opt.abs().max(1.0)).abs()
        );
    }
}
