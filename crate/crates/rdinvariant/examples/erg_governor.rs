//! Explicit reference governor on the ball-and-plate system: the applied
//! reference v chases the target r along a geometry-aware navigation field,
//! but only as fast as the invariant-set budget gamma_hat(v) - V(x, v)
//! allows. The ball crosses the bow-tie-shaped safe region without ever
//! violating the position constraint.
//!
//! Requires the precomputed family from `cargo run --release --example
//! bow_tie_family`.
//!
//! Run with: cargo run --release --example erg_governor

use rdinvariant::control::{ball_and_plate, lyapunov_value, run_erg, ErgConfig, Vec2, Vec4};
use rdinvariant::invariant::{parse_gamma, InvariantSetFamily};
use std::path::Path;

fn main() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../problems/ball_and_plate_erg.gamma");
    let text = std::fs::read_to_string(&path).unwrap_or_else(|_| {
        panic!(
            "missing {}; run `cargo run --release --example bow_tie_family` first",
            path.display()
        )
    });
    let fam = InvariantSetFamily {
        per_constraint: vec![parse_gamma(&text).expect("gamma dump")],
    };

    let cfg = ErgConfig::ball_and_plate(fam).expect("config");
    let x0 = Vec4::new(-2.0, 0.0, 1.75, 0.0);
    let v0 = Vec2::new(-2.0, 1.75);
    let r = Vec2::new(2.0, 1.0);
    let traj = run_erg(&cfg, &x0, &v0, &r, 30.0, 100).expect("simulate");

    let mut min_slack = f64::INFINITY;
    let mut max_excess = f64::NEG_INFINITY;
    for (s, v) in traj.states.iter().zip(&traj.vrefs) {
        min_slack = min_slack.min(ball_and_plate::position_slack(s[0], s[2]));
        let x = Vec4::from_column_slice(s);
        let vv = Vec2::new(v[0], v[1]);
        let budget = cfg.family.evaluate(&[v[0], v[1]]).unwrap();
        max_excess = max_excess.max(lyapunov_value(&cfg.p, &cfg.g_x, &x, &vv) - budget);
    }
    let xe = traj.states.last().unwrap();
    let ve = traj.vrefs.last().unwrap();
    println!("simulated {:.1} s in {} recorded samples", traj.times.last().unwrap(), traj.len());
    println!("final ball position   ({:+.4}, {:+.4})", xe[0], xe[2]);
    println!("final applied ref     ({:+.4}, {:+.4})  target ({:+.1}, {:+.1})", ve[0], ve[1], r[0], r[1]);
    println!("min constraint slack  {min_slack:.3e}  (>= 0 means never violated)");
    println!("max V - gamma_hat     {max_excess:.3e}  (<= 0 means always inside the invariant set)");
}
