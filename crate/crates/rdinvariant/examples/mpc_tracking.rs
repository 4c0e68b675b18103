//! Tracking MPC on the ball-and-plate system with an artificial reference:
//! each step optimizes the input sequence and a steady-state reference v
//! jointly, with terminal condition V(x_N, v) <= gamma_hat(v). The invariant
//! set family supplies the terminal set, so recursive feasibility holds even
//! when the target r is far away or inadmissible.
//!
//! Requires the precomputed family from `cargo run --release --example
//! bow_tie_family`.
//!
//! Run with: cargo run --release --example mpc_tracking

use rdinvariant::control::{ball_and_plate, run_mpc, MpcConfig, Vec2, Vec4};
use rdinvariant::invariant::{parse_gamma, InvariantSetFamily};
use std::path::Path;

fn main() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../problems/ball_and_plate_mpc.gamma");
    let text = std::fs::read_to_string(&path).unwrap_or_else(|_| {
        panic!(
            "missing {}; run `cargo run --release --example bow_tie_family` first",
            path.display()
        )
    });
    let fam = InvariantSetFamily {
        per_constraint: vec![parse_gamma(&text).expect("gamma dump")],
    };

    let cfg = MpcConfig::ball_and_plate(fam).expect("config");
    let x0 = Vec4::new(-2.0, 0.0, 1.75, 0.0);
    let r = Vec2::new(2.0, 1.0);
    let traj = run_mpc(&cfg, &x0, &r, 40).expect("simulate");

    let xbar = cfg.g_x * r;
    println!("step  position          applied ref       slack      terminal margin");
    for k in (0..traj.len()).step_by(4).chain([traj.len() - 1]) {
        let s = &traj.states[k];
        let v = &traj.vrefs[k];
        println!(
            "{k:>4}  ({:+.3}, {:+.3})  ({:+.3}, {:+.3})  {:+.3e}  {:+.3e}",
            s[0],
            s[2],
            v[0],
            v[1],
            ball_and_plate::position_slack(s[0], s[2]),
            traj.margins[k]
        );
    }
    let xe = Vec4::from_column_slice(traj.states.last().unwrap());
    println!("final tracking error |x - xbar_r| = {:.4}", (xe - xbar).norm());
}
