//! File-driven front end for the invariant-set pipeline: compute level
//! bounds from a problem file, validate them against the brute-force oracle,
//! re-verify certificates, and run the control-application simulations.
//!
//! Exit codes: 0 success, 1 input parse error, 2 all pieces failed (or usage
//! error), 3 validation/feasibility violation.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rdinvariant::control::{self, ball_and_plate, ErgConfig, MpcConfig, Vec2, Vec4};
use rdinvariant::invariant::{
    self, compute_gamma, dump_certificates, dump_gamma, parse_certificates, parse_gamma,
    parse_problem, tessellate, GammaApprox, GammaConfig, GammaResult, InvariantSetFamily,
    ProblemDef, CERT_TOL_MATCH, CERT_TOL_PSD,
};
use rdinvariant::oracle::{self, OracleConfig};
use rdinvariant::poly::Region;
use rdinvariant::sos;

#[derive(Parser)]
#[command(
    name = "rdinvariant",
    version,
    about = "Reference-dependent invariant set toolkit"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Copy, Clone, ValueEnum)]
enum Objective {
    /// Exact closed-form moments of the piece region.
    Exact,
    /// Monte-Carlo average over sampled references.
    Sampled,
}

#[derive(Subcommand)]
enum Cmd {
    /// Compute the piecewise level bound from a problem file.
    ComputeGamma {
        problem: PathBuf,
        /// Polynomial degree of each piece (overrides the problem file).
        #[arg(long)]
        degree: Option<u32>,
        /// Boundary factorization power k (overrides the problem file).
        #[arg(long)]
        factor_k: Option<u32>,
        /// Number of domain pieces (overrides the problem file).
        #[arg(long)]
        pieces: Option<usize>,
        #[arg(long, value_enum, default_value_t = Objective::Exact)]
        objective: Objective,
        /// Sample count for the sampled objective.
        #[arg(long, default_value_t = 200)]
        nw: usize,
        /// Seed for all stochastic choices.
        #[arg(long, default_value_t = 24243)]
        seed: u64,
        /// Output directory (default: current directory).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Piece-level parallelism (default: env RDI_WORKERS, else 1).
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Validate a level-bound dump against the brute-force oracle.
    Validate {
        gamma: PathBuf,
        problem: PathBuf,
        /// Number of soundness samples.
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long, default_value_t = 24243)]
        seed: u64,
    },
    /// Simulate the tracking MPC scenario.
    SimulateMpc {
        scenario: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulate the explicit reference governor scenario.
    SimulateErg {
        scenario: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-verify a certificate dump.
    CheckCert { certs: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.cmd {
        Cmd::ComputeGamma {
            problem,
            degree,
            factor_k,
            pieces,
            objective,
            nw,
            seed,
            out,
            workers,
        } => cmd_compute_gamma(
            &problem, degree, factor_k, pieces, objective, nw, seed, out, workers,
        ),
        Cmd::Validate {
            gamma,
            problem,
            samples,
            seed,
        } => cmd_validate(&gamma, &problem, samples, seed),
        Cmd::SimulateMpc { scenario, out } => cmd_simulate(&scenario, out, SimKind::Mpc),
        Cmd::SimulateErg { scenario, out } => cmd_simulate(&scenario, out, SimKind::Erg),
        Cmd::CheckCert { certs } => cmd_check_cert(&certs),
    };
    ExitCode::from(code)
}

const EXIT_OK: u8 = 0;
const EXIT_PARSE: u8 = 1;
const EXIT_ALL_FAILED: u8 = 2;
const EXIT_VIOLATION: u8 = 3;

fn read_file(path: &Path) -> Result<String, u8> {
    std::fs::read_to_string(path).map_err(|e| {
        eprintln!("error: cannot read {}: {e}", path.display());
        EXIT_PARSE
    })
}

fn load_problem(path: &Path) -> Result<ProblemDef, u8> {
    let text = read_file(path)?;
    parse_problem(&text).map_err(|e| {
        eprintln!("error: {}: {e}", path.display());
        EXIT_PARSE
    })
}

fn write_out(dir: &Option<PathBuf>, name: &str, contents: &str) -> Result<PathBuf, u8> {
    let dir = dir.clone().unwrap_or_else(|| PathBuf::from("."));
    if let Err(e) = std::fs::create_dir_all(&dir) {
        eprintln!("error: cannot create {}: {e}", dir.display());
        return Err(EXIT_PARSE);
    }
    let path = dir.join(name);
    if let Err(e) = std::fs::write(&path, contents) {
        eprintln!("error: cannot write {}: {e}", path.display());
        return Err(EXIT_PARSE);
    }
    Ok(path)
}

fn default_workers() -> usize {
    std::env::var("RDI_WORKERS")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(1)
}

#[allow(clippy::too_many_arguments)]
fn cmd_compute_gamma(
    problem: &Path,
    degree: Option<u32>,
    factor_k: Option<u32>,
    pieces: Option<usize>,
    objective: Objective,
    nw: usize,
    seed: u64,
    out: Option<PathBuf>,
    workers: Option<usize>,
) -> u8 {
    let def = match load_problem(problem) {
        Ok(d) => d,
        Err(c) => return c,
    };
    let n_pieces = pieces.unwrap_or(def.pieces);
    let regions: Vec<Region> = if n_pieces <= 1 {
        Vec::new()
    } else {
        match tessellate(&def.refs.domain, n_pieces) {
            Ok(r) => r,
            Err(e) => {
                eprintln!("error: cannot tessellate domain: {e}");
                return EXIT_PARSE;
            }
        }
    };
    let cfg = GammaConfig {
        degrees: invariant::Degrees {
            gamma: degree.unwrap_or(def.degree),
            q: None,
            s: None,
        },
        factor_k: factor_k.unwrap_or(def.factor_k),
        pieces: regions,
        objective: match objective {
            Objective::Exact => invariant::ObjectiveKind::ExactMoments,
            Objective::Sampled => invariant::ObjectiveKind::Sampled { n_w: nw, seed },
        },
        workers: workers.unwrap_or_else(default_workers),
        solver: Default::default(),
    };
    let mut results: Vec<GammaResult> = Vec::new();
    for i in 0..def.system.constraints.len() {
        match compute_gamma(&def.system, &def.refs, i, &cfg) {
            Ok(r) => results.push(r),
            Err(e) => {
                eprintln!("error: constraint {i}: {e}");
                return EXIT_PARSE;
            }
        }
    }
    let all_failed = results
        .iter()
        .all(|r| r.reports.iter().all(|rep| rep.failed));
    for res in &results {
        let i = res.approx.constraint_index;
        let failed = res.reports.iter().filter(|r| r.failed).count();
        println!(
            "constraint {i}: {} pieces, {failed} failed",
            res.reports.len()
        );
        if write_out(&out, &format!("gamma_{i}.txt"), &dump_gamma(&res.approx)).is_err() {
            return EXIT_PARSE;
        }
        if write_out(
            &out,
            &format!("certificates_{i}.txt"),
            &dump_certificates(&res.reports),
        )
        .is_err()
        {
            return EXIT_PARSE;
        }
    }
    // Evaluation grid CSV over the domain bounding box.
    let fam = InvariantSetFamily {
        per_constraint: results.iter().map(|r| r.approx.clone()).collect(),
    };
    match sample_csv(&fam, &def) {
        Ok(csv) => {
            if write_out(&out, "samples.csv", &csv).is_err() {
                return EXIT_PARSE;
            }
        }
        Err(e) => {
            eprintln!("error: sampling failed: {e}");
            return EXIT_PARSE;
        }
    }
    if all_failed {
        eprintln!("error: every piece of every constraint failed");
        return EXIT_ALL_FAILED;
    }
    EXIT_OK
}

fn sample_csv(fam: &InvariantSetFamily, def: &ProblemDef) -> Result<String, String> {
    let (lo, hi) = domain_bbox(&def.refs.domain);
    let dim = lo.len();
    let per_axis: usize = match dim {
        1 => 200,
        2 => 25,
        _ => 8,
    };
    let mut out = String::new();
    for j in 1..=dim {
        out.push_str(&format!("r{j},"));
    }
    out.push_str("gamma_hat\n");
    let mut idx = vec![0usize; dim];
    loop {
        let r: Vec<f64> = idx
            .iter()
            .enumerate()
            .map(|(j, &k)| {
                if per_axis == 1 {
                    lo[j]
                } else {
                    lo[j] + (hi[j] - lo[j]) * k as f64 / (per_axis - 1) as f64
                }
            })
            .collect();
        let g = fam.evaluate(&r).map_err(|e| e.to_string())?;
        for v in &r {
            out.push_str(&format!("{:.16e},", v));
        }
        out.push_str(&format!("{:.16e}\n", g));
        // Odometer increment.
        let mut j = 0;
        loop {
            if j == dim {
                return Ok(out);
            }
            idx[j] += 1;
            if idx[j] < per_axis {
                break;
            }
            idx[j] = 0;
            j += 1;
        }
    }
}

fn domain_bbox(region: &Region) -> (Vec<f64>, Vec<f64>) {
    match region {
        Region::Box { lower, upper } => (lower.clone(), upper.clone()),
        Region::Simplex { vertices } => {
            let dim = vertices[0].len();
            let mut lo = vec![f64::INFINITY; dim];
            let mut hi = vec![f64::NEG_INFINITY; dim];
            for v in vertices {
                for j in 0..dim {
                    lo[j] = lo[j].min(v[j]);
                    hi[j] = hi[j].max(v[j]);
                }
            }
            (lo, hi)
        }
    }
}

fn cmd_validate(gamma_path: &Path, problem: &Path, samples: usize, seed: u64) -> u8 {
    if samples == 0 {
        eprintln!("usage error: --samples must be positive");
        return EXIT_ALL_FAILED;
    }
    let def = match load_problem(problem) {
        Ok(d) => d,
        Err(c) => return c,
    };
    let text = match read_file(gamma_path) {
        Ok(t) => t,
        Err(c) => return c,
    };
    let approx: GammaApprox = match parse_gamma(&text) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {}: {e}", gamma_path.display());
            return EXIT_PARSE;
        }
    };
    let fam = InvariantSetFamily {
        per_constraint: vec![approx.clone()],
    };
    let sys = &def.system;
    let nx = sys.n_states();
    let oracle_cfg = OracleConfig::new(vec![-6.0; nx], vec![6.0; nx]);
    let (lo, hi) = domain_bbox(&def.refs.domain);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Lower-bound property and accuracy against the oracle on a fixed grid.
    let n_grid = 60usize.min(samples.max(2));
    let mut grid: Vec<Vec<f64>> = Vec::new();
    for k in 0..n_grid {
        let r: Vec<f64> = lo
            .iter()
            .zip(&hi)
            .map(|(l, u)| l + (u - l) * k as f64 / (n_grid - 1) as f64)
            .collect();
        grid.push(r);
    }
    let mut star = Vec::new();
    for r in &grid {
        match oracle::gamma_star_all(sys, r, &oracle_cfg) {
            Ok(s) => star.push(s),
            Err(e) => {
                eprintln!("error: oracle failed: {e}");
                return EXIT_PARSE;
            }
        }
    }
    let mut worst_gap = f64::NEG_INFINITY;
    for (r, sv) in grid.iter().zip(&star) {
        let gh = fam.evaluate(r).unwrap_or(f64::INFINITY);
        if sv.bounded {
            let gs = sv.value;
            if gh > gs + 1e-4 {
                eprintln!(
                    "violation: gamma_hat({r:?}) = {gh:.6e} exceeds oracle {gs:.6e} + 1e-4"
                );
                return EXIT_VIOLATION;
            }
            worst_gap = worst_gap.max(gh - gs);
        }
    }
    if lo.len() == 1 {
        let r_grid: Vec<f64> = grid.iter().map(|r| r[0]).collect();
        let gh: Vec<f64> = grid
            .iter()
            .map(|r| fam.evaluate(r).unwrap_or(0.0))
            .collect();
        match oracle::accuracy(&r_grid, &gh, &star) {
            Ok(acc) => println!("accuracy {:.4}", acc),
            Err(e) => {
                eprintln!("error: accuracy metric failed: {e}");
                return EXIT_PARSE;
            }
        }
    }

    // Soundness sampling: points inside the level set must satisfy every
    // constraint.
    let mut worst_slack = f64::INFINITY;
    let mut accepted = 0usize;
    let mut attempts = 0usize;
    while accepted < samples && attempts < samples * 200 {
        attempts += 1;
        let r: Vec<f64> = lo
            .iter()
            .zip(&hi)
            .map(|(l, u)| rng.gen_range(*l..=*u))
            .collect();
        let Ok(true) = def.refs.contains(&r, 0.0) else {
            continue;
        };
        let gamma = fam.evaluate(&r).unwrap_or(0.0);
        if gamma <= 0.0 {
            continue;
        }
        let xbar = match sys.steady_state_at(&r) {
            Ok(x) => x,
            Err(_) => continue,
        };
        // Walk outward along a random direction to the level boundary, then
        // take a random point on the chord.
        let dir: Vec<f64> = (0..nx).map(|_| rng.gen_range(-1.0f64..=1.0)).collect();
        let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
        if norm < 1e-9 {
            continue;
        }
        let mut s_hit = 0.0f64;
        let mut s = 0.05f64;
        while s < 50.0 {
            let x: Vec<f64> = xbar
                .iter()
                .zip(&dir)
                .map(|(c, d)| c + s * d / norm)
                .collect();
            if sys.v_at(&x, &r).map(|v| v > gamma).unwrap_or(true) {
                break;
            }
            s_hit = s;
            s *= 1.25;
        }
        let t = rng.gen_range(0.0f64..=1.0);
        let x: Vec<f64> = xbar
            .iter()
            .zip(&dir)
            .map(|(c, d)| c + t * s_hit * d / norm)
            .collect();
        let Ok(v) = sys.v_at(&x, &r) else { continue };
        if v > gamma {
            continue;
        }
        accepted += 1;
        for i in 0..sys.constraints.len() {
            let c = sys.constraint_at(i, &x, &r).unwrap_or(f64::NEG_INFINITY);
            worst_slack = worst_slack.min(c);
            if c < -1e-6 {
                eprintln!(
                    "violation: c_{i}(x, r) = {c:.6e} < -1e-6 at r = {r:?}, x = {x:?}"
                );
                return EXIT_VIOLATION;
            }
        }
    }
    println!("soundness samples {accepted}, worst slack {worst_slack:.6e}");
    println!("worst oracle gap {worst_gap:.6e}");
    EXIT_OK
}

enum SimKind {
    Mpc,
    Erg,
}

struct Scenario {
    gamma_path: PathBuf,
    x0: Vec4,
    v0: Vec2,
    r: Vec2,
    steps: usize,
    t_end: f64,
    lambda: f64,
    theta: f64,
    h: f64,
    stride: usize,
}

fn parse_scenario(path: &Path, kind: &SimKind) -> Result<Scenario, u8> {
    let text = read_file(path)?;
    let mut sc = Scenario {
        gamma_path: PathBuf::new(),
        x0: Vec4::zeros(),
        v0: Vec2::zeros(),
        r: Vec2::zeros(),
        steps: 40,
        t_end: 30.0,
        lambda: 10.0,
        theta: 0.01,
        h: 1e-3,
        stride: 10,
    };
    let mut have_gamma = false;
    let fail = |lineno: usize, msg: &str| {
        eprintln!("error: {}:{}: {msg}", path.display(), lineno + 1);
        EXIT_PARSE
    };
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, rest)) = line.split_once(char::is_whitespace) else {
            return Err(fail(lineno, "expected `key value`"));
        };
        let rest = rest.trim();
        let floats = |rest: &str| -> Result<Vec<f64>, u8> {
            rest.split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| fail(lineno, "bad number"))
        };
        match key {
            "kind" => {
                let want = match kind {
                    SimKind::Mpc => "mpc",
                    SimKind::Erg => "erg",
                };
                if rest != want {
                    return Err(fail(lineno, &format!("scenario kind `{rest}`, expected `{want}`")));
                }
            }
            "gamma" => {
                let p = PathBuf::from(rest);
                sc.gamma_path = if p.is_relative() {
                    path.parent().unwrap_or(Path::new(".")).join(p)
                } else {
                    p
                };
                have_gamma = true;
            }
            "x0" => {
                let v = floats(rest)?;
                if v.len() != 4 {
                    return Err(fail(lineno, "x0 needs 4 numbers"));
                }
                sc.x0 = Vec4::from_column_slice(&v);
            }
            "v0" => {
                let v = floats(rest)?;
                if v.len() != 2 {
                    return Err(fail(lineno, "v0 needs 2 numbers"));
                }
                sc.v0 = Vec2::from_column_slice(&v);
            }
            "r" => {
                let v = floats(rest)?;
                if v.len() != 2 {
                    return Err(fail(lineno, "r needs 2 numbers"));
                }
                sc.r = Vec2::from_column_slice(&v);
            }
            "steps" => sc.steps = rest.parse().map_err(|_| fail(lineno, "bad steps"))?,
            "t_end" => sc.t_end = rest.parse().map_err(|_| fail(lineno, "bad t_end"))?,
            "lambda" => sc.lambda = rest.parse().map_err(|_| fail(lineno, "bad lambda"))?,
            "theta" => sc.theta = rest.parse().map_err(|_| fail(lineno, "bad theta"))?,
            "h" => sc.h = rest.parse().map_err(|_| fail(lineno, "bad h"))?,
            "stride" => sc.stride = rest.parse().map_err(|_| fail(lineno, "bad stride"))?,
            other => return Err(fail(lineno, &format!("unknown key `{other}`"))),
        }
    }
    if !have_gamma {
        eprintln!("error: {}: missing `gamma` entry", path.display());
        return Err(EXIT_PARSE);
    }
    Ok(sc)
}

fn load_family(path: &Path) -> Result<InvariantSetFamily, u8> {
    let text = read_file(path)?;
    let approx = parse_gamma(&text).map_err(|e| {
        eprintln!("error: {}: {e}", path.display());
        EXIT_PARSE
    })?;
    Ok(InvariantSetFamily {
        per_constraint: vec![approx],
    })
}

fn cmd_simulate(scenario: &Path, out: Option<PathBuf>, kind: SimKind) -> u8 {
    let sc = match parse_scenario(scenario, &kind) {
        Ok(s) => s,
        Err(c) => return c,
    };
    let fam = match load_family(&sc.gamma_path) {
        Ok(f) => f,
        Err(c) => return c,
    };
    let traj = match kind {
        SimKind::Mpc => {
            let cfg = match MpcConfig::ball_and_plate(fam) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("error: {e}");
                    return EXIT_PARSE;
                }
            };
            match control::run_mpc(&cfg, &sc.x0, &sc.r, sc.steps) {
                Ok(t) => t,
                Err(e) => {
                    eprintln!("error: {e}");
                    return EXIT_VIOLATION;
                }
            }
        }
        SimKind::Erg => {
            let mut cfg = match ErgConfig::ball_and_plate(fam) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("error: {e}");
                    return EXIT_PARSE;
                }
            };
            cfg.lambda = sc.lambda;
            cfg.theta = sc.theta;
            cfg.h = sc.h;
            match control::run_erg(&cfg, &sc.x0, &sc.v0, &sc.r, sc.t_end, sc.stride) {
                Ok(t) => t,
                Err(e) => {
                    eprintln!("error: {e}");
                    return EXIT_VIOLATION;
                }
            }
        }
    };
    let last = traj.states.last().expect("nonempty trajectory");
    let target = match kind {
        SimKind::Mpc => [sc.r[0], sc.r[1]],
        SimKind::Erg => [sc.r[0], sc.r[1]],
    };
    let final_err =
        ((last[0] - target[0]).powi(2) + (last[2] - target[1]).powi(2)).sqrt();
    let min_slack = traj
        .states
        .iter()
        .map(|s| ball_and_plate::position_slack(s[0], s[2]))
        .fold(f64::INFINITY, f64::min);
    println!("steps {}", traj.len());
    println!("final position error {final_err:.6e}");
    println!("min constraint slack {min_slack:.6e}");
    if write_out(&out, "trajectory.csv", &traj.to_csv()).is_err() {
        return EXIT_PARSE;
    }
    if min_slack < -1e-6 {
        eprintln!("violation: constraint slack {min_slack:.6e} < -1e-6");
        return EXIT_VIOLATION;
    }
    EXIT_OK
}

fn cmd_check_cert(path: &Path) -> u8 {
    let text = match read_file(path) {
        Ok(t) => t,
        Err(c) => return c,
    };
    let entries = match parse_certificates(&text) {
        Ok(e) => e,
        Err(e) => {
            eprintln!("error: {}: {e}", path.display());
            return EXIT_PARSE;
        }
    };
    if entries.is_empty() {
        eprintln!("error: no certificates in {}", path.display());
        return EXIT_PARSE;
    }
    let mut all_pass = true;
    for e in &entries {
        match sos::check_certificate(&e.expr, &e.certificate, CERT_TOL_MATCH, CERT_TOL_PSD) {
            Ok(rep) => {
                println!(
                    "piece {} cone {}: {} (mismatch {:.3e}, min eig {:.3e})",
                    e.piece_index,
                    e.cone_index,
                    if rep.pass { "pass" } else { "FAIL" },
                    rep.max_mismatch,
                    rep.min_eigenvalue
                );
                all_pass &= rep.pass;
            }
            Err(err) => {
                eprintln!(
                    "error: piece {} cone {}: {err}",
                    e.piece_index, e.cone_index
                );
                return EXIT_PARSE;
            }
        }
    }
    if all_pass {
        EXIT_OK
    } else {
        EXIT_VIOLATION
    }
}
