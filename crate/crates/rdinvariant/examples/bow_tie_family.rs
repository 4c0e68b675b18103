//! Precompute the ball-and-plate level-bound families and write them to
//! problems/ as gamma dumps plus certificate dumps. The MPC and governor
//! simulation examples (and the simulate-* CLI subcommands) load these files
//! instead of recomputing them, since each family takes several minutes of
//! solver time.
//!
//! Run with: cargo run --release --example bow_tie_family

use rdinvariant::control::ball_and_plate;
use rdinvariant::invariant::{dump_certificates, dump_gamma};
use std::path::Path;

fn main() {
    let workers = std::env::var("RDI_WORKERS")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(1);
    let out_dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../problems");

    for (tag, p) in [
        ("erg", ball_and_plate::continuous_lyapunov()),
        ("mpc", ball_and_plate::discrete_lyapunov()),
    ] {
        let t = std::time::Instant::now();
        let (fam, results) =
            ball_and_plate::compute_bow_tie_family(&p, 4, workers).expect("family");
        let failed: usize = results[0].reports.iter().filter(|r| r.failed).count();
        println!(
            "{tag}: {} pieces ({failed} failed) in {:?}",
            results[0].reports.len(),
            t.elapsed()
        );
        for v in [[-2.0, 1.75], [2.0, 1.0], [0.0, 0.15], [2.8, 0.5]] {
            println!("  gamma({v:?}) = {:.4}", fam.evaluate(&v).unwrap());
        }
        let gamma_path = out_dir.join(format!("ball_and_plate_{tag}.gamma"));
        std::fs::write(&gamma_path, dump_gamma(&results[0].approx)).expect("write gamma");
        let cert_path = out_dir.join(format!("ball_and_plate_{tag}.certs"));
        std::fs::write(&cert_path, dump_certificates(&results[0].reports)).expect("write certs");
        println!("  wrote {} and {}", gamma_path.display(), cert_path.display());
    }
}
