//! Control application harnesses built on the level-set engine: an MPC for
//! tracking whose terminal set is a reference-dependent Lyapunov sublevel
//! set, and an explicit reference governor (ERG) that uses the same bound as
//! a dynamic safety margin.
//!
//! Both harnesses are exercised on a ball-and-plate system whose positions
//! are confined to a nonconvex "bow-tie" region. The two position/velocity
//! pairs are decoupled and the constraint only involves the positions, so
//! the level bound is computed on an exact two-state reduction (see
//! [`ball_and_plate::reduced_system`]) and consumed with the full
//! four-state Lyapunov function.

use nalgebra::{SMatrix, SVector};
use thiserror::Error;

use crate::invariant::{
    compute_family, ConstrainedSystem, GammaConfig, GammaResult, InvariantError,
    InvariantSetFamily, Mode,
};
use crate::poly::{Polynomial, PolyError, Region};

pub type Mat4 = SMatrix<f64, 4, 4>;
pub type Mat42 = SMatrix<f64, 4, 2>;
pub type Mat24 = SMatrix<f64, 2, 4>;
pub type Mat2 = SMatrix<f64, 2, 2>;
pub type Vec4 = SVector<f64, 4>;
pub type Vec2 = SVector<f64, 2>;

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("optimizer failed to find a feasible point at step {step}: {detail}")]
    Infeasible { step: usize, detail: String },
    #[error("non-finite state at step {step}")]
    NonFinite { step: usize },
    #[error(transparent)]
    Poly(#[from] PolyError),
    #[error(transparent)]
    Invariant(#[from] InvariantError),
}

// ---------------------------------------------------------------------------
// Ball-and-plate fixtures
// ---------------------------------------------------------------------------

/// System data for the ball-and-plate examples: a discrete-time double chain
/// of integrators per axis (MPC harness) and a continuous-time PD-stabilized
/// loop (ERG harness), both position-constrained to the bow-tie set
/// `slack(p1, p2) >= 0` with `slack = 0.1 + 10 p1^2 - p1^4 - p2^2 - p2^4`.
pub mod ball_and_plate {
    use super::*;

    /// Discrete-time plant x+ = A x + B u (state: p1, p1dot, p2, p2dot).
    pub fn discrete_plant() -> (Mat4, Mat42) {
        let a = Mat4::from_row_slice(&[
            1.0, 0.5, 0.0, 0.0, //
            0.0, 1.0, 0.0, 0.0, //
            0.0, 0.0, 1.0, 0.5, //
            0.0, 0.0, 0.0, 1.0,
        ]);
        let b = Mat42::from_row_slice(&[
            0.125, 0.0, //
            0.5, 0.0, //
            0.0, 0.125, //
            0.0, 0.5,
        ]);
        (a, b)
    }

    /// Stabilizing terminal control law u = K x + L v for the discrete plant.
    pub fn terminal_law() -> (Mat24, Mat2) {
        let k = Mat24::from_row_slice(&[
            -4.0, -2.73, 0.0, 0.0, //
            0.0, 0.0, -4.0, -2.73,
        ]);
        let l = Mat2::from_row_slice(&[4.0, 0.0, 0.0, 4.0]);
        (k, l)
    }

    /// Lyapunov weight for the discrete closed loop under the terminal law.
    pub fn discrete_lyapunov() -> Mat4 {
        Mat4::from_row_slice(&[
            5.3933, 0.8668, 0.0, 0.0, //
            0.8668, 1.1946, 0.0, 0.0, //
            0.0, 0.0, 5.3933, 0.8668, //
            0.0, 0.0, 0.8668, 1.1946,
        ])
    }

    /// Continuous-time prestabilized loop xdot = A x + B v.
    pub fn continuous_closed_loop() -> (Mat4, Mat42) {
        let a = Mat4::from_row_slice(&[
            0.0, 1.0, 0.0, 0.0, //
            -100.0, -4.0, 0.0, 0.0, //
            0.0, 0.0, 0.0, 1.0, //
            0.0, 0.0, -100.0, -4.0,
        ]);
        let b = Mat42::from_row_slice(&[
            0.0, 0.0, //
            100.0, 0.0, //
            0.0, 0.0, //
            0.0, 100.0,
        ]);
        (a, b)
    }

    /// Lyapunov weight for the continuous closed loop.
    pub fn continuous_lyapunov() -> Mat4 {
        Mat4::from_row_slice(&[
            12.645, 0.005, 0.0, 0.0, //
            0.005, 0.1263, 0.0, 0.0, //
            0.0, 0.0, 12.645, 0.005, //
            0.0, 0.0, 0.005, 0.1263,
        ])
    }

    /// Steady-state map: x̄_v = G_x v (positions at v, velocities zero). The
    /// steady-state input is zero for both fixtures.
    pub fn steady_state_map() -> Mat42 {
        Mat42::from_row_slice(&[
            1.0, 0.0, //
            0.0, 0.0, //
            0.0, 1.0, //
            0.0, 0.0,
        ])
    }

    /// Constraint slack at positions (p1, p2); admissible iff >= 0.
    pub fn position_slack(p1: f64, p2: f64) -> f64 {
        0.1 + 10.0 * p1 * p1 - p1.powi(4) - p2 * p2 - p2.powi(4)
    }

    /// Largest |p1| in the bow tie (slack(p1, 0) = 0).
    pub fn p1_extent() -> f64 {
        ((10.0 + (100.0 + 0.4f64).sqrt()) / 2.0).sqrt()
    }

    /// Half-height of the bow tie at a given p1: the largest |p2| with
    /// slack(p1, p2) >= 0 (zero outside the p1 extent).
    pub fn half_height(p1: f64) -> f64 {
        let r = 0.1 + 10.0 * p1 * p1 - p1.powi(4);
        if r <= 0.0 {
            return 0.0;
        }
        (((1.0 + 4.0 * r).sqrt() - 1.0) / 2.0).sqrt()
    }

    /// Diffeomorphism mapping the interior of the bow tie onto an open
    /// rectangle: first coordinate unchanged, second normalized by the local
    /// half-height.
    pub fn bow_tie_map(v: &[f64; 2]) -> [f64; 2] {
        [v[0], v[1] / half_height(v[0])]
    }

    /// Bounding box of the bow tie, used as the reference domain.
    pub fn reference_domain() -> Region {
        let e1 = p1_extent();
        let e2 = half_height((5.0f64).sqrt());
        Region::Box {
            lower: vec![-e1, -e2],
            upper: vec![e1, e2],
        }
    }

    /// Interior cover of the bow tie by vertical strips with adaptive
    /// height. The strips deliberately stop short of the set boundary: on
    /// the boundary the largest safe level vanishes quadratically, and a
    /// low-degree piece polynomial forced to follow that collapse across an
    /// interior curve ends up near zero everywhere. Keeping each piece
    /// strictly inside the set (where the target level is bounded away from
    /// zero) makes low-degree pieces effective; the uncovered shell simply
    /// evaluates to the always-sound level zero. Strip edges are denser
    /// where the half-height profile changes fastest (the pinch).
    pub fn reference_pieces() -> Vec<Region> {
        let half = [0.0, 0.1, 0.25, 0.5, 1.0, 2.05, 3.05];
        let mut edges: Vec<f64> = half.iter().rev().map(|e| -e).collect();
        edges.extend_from_slice(&half[1..]);
        let mut out = Vec::new();
        for w in edges.windows(2) {
            let (lo, hi) = (w[0], w[1]);
            // Inscribed trapezoid per strip, split into two triangles. The
            // profile is concave away from the pinch, so the chord between
            // the scaled corner heights stays inside the set; the 0.9
            // factor covers the slightly convex stretch at the pinch.
            let hl = 0.9 * half_height(lo);
            let hh = 0.9 * half_height(hi);
            let a = vec![lo, -hl];
            let b = vec![hi, -hh];
            let c = vec![hi, hh];
            let d = vec![lo, hl];
            out.push(Region::Simplex {
                vertices: vec![a.clone(), b.clone(), c.clone()],
            });
            out.push(Region::Simplex {
                vertices: vec![a, c, d],
            });
        }
        out
    }

    /// Exact two-state reduction used for the level bound. The constraint
    /// involves only the positions and the Lyapunov weight is block diagonal
    /// per axis, so minimizing V over the velocities at fixed positions
    /// gives V_red(y, v) = a ((y1-v1)^2 + (y2-v2)^2) with a the Schur
    /// complement of the velocity entry. Then {V <= g} satisfies the
    /// constraint iff {V_red <= g} does, and V >= V_red keeps the full-state
    /// membership test sound.
    pub fn reduced_system(p: &Mat4) -> Result<ConstrainedSystem, ControlError> {
        let a = p[(0, 0)] - p[(0, 1)] * p[(0, 1)] / p[(1, 1)];
        if !(a > 0.0) {
            return Err(ControlError::Config(
                "Lyapunov weight has nonpositive Schur complement".into(),
            ));
        }
        let vars = ["y1", "y2", "v1", "v2"];
        let y1 = Polynomial::var(&vars, "y1")?;
        let y2 = Polynomial::var(&vars, "y2")?;
        let v1 = Polynomial::var(&vars, "v1")?;
        let v2 = Polynomial::var(&vars, "v2")?;
        let d1 = y1.sub(&v1)?;
        let d2 = y2.sub(&v2)?;
        let v_red = d1.mul(&d1)?.add(&d2.mul(&d2)?)?.scale(a);
        // slack = 0.1 + 10 y1^2 - y1^4 - y2^2 - y2^4 >= 0
        let slack = Polynomial::constant(&vars, 0.1)
            .add(&y1.pow(2)?.scale(10.0))?
            .sub(&y1.pow(4)?)?
            .sub(&y2.pow(2)?)?
            .sub(&y2.pow(4)?)?;
        let rvars = ["v1", "v2"];
        let ss = vec![
            Polynomial::var(&rvars, "v1")?,
            Polynomial::var(&rvars, "v2")?,
        ];
        // Any dynamics consistent with the steady state works here; the
        // level bound only uses V, the constraint, and the steady state.
        let f = vec![v1.sub(&y1)?, v2.sub(&y2)?];
        Ok(ConstrainedSystem::new(
            vec!["y1".into(), "y2".into()],
            vec!["v1".into(), "v2".into()],
            Mode::Continuous,
            f,
            vec![slack],
            ss,
            v_red,
        )?)
    }

    /// Compute the piecewise level bound for the bow tie under the given
    /// Lyapunov weight.
    pub fn compute_bow_tie_family(
        p: &Mat4,
        degree: u32,
        workers: usize,
    ) -> Result<(InvariantSetFamily, Vec<GammaResult>), ControlError> {
        let sys = reduced_system(p)?;
        let refs = sys.admissible_refs(reference_domain())?;
        let cfg = GammaConfig {
            degrees: crate::invariant::Degrees {
                gamma: degree,
                q: None,
                s: None,
            },
            factor_k: 0,
            pieces: reference_pieces(),
            objective: crate::invariant::ObjectiveKind::ExactMoments,
            workers,
            solver: Default::default(),
        };
        Ok(compute_family(&sys, &refs, &cfg)?)
    }
}

/// Full-state Lyapunov value V(x, v) = (x - x̄_v)' P (x - x̄_v).
pub fn lyapunov_value(p: &Mat4, g_x: &Mat42, x: &Vec4, v: &Vec2) -> f64 {
    let d = x - g_x * v;
    (d.transpose() * p * d)[(0, 0)]
}

// ---------------------------------------------------------------------------
// Trajectories
// ---------------------------------------------------------------------------

/// A simulated run on a uniform time grid. `margins` holds the per-step
/// diagnostic: the terminal-constraint slack for MPC, the dynamic safety
/// margin for the ERG.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub inputs: Vec<Vec<f64>>,
    pub vrefs: Vec<Vec<f64>>,
    pub margins: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    fn check_consistent(&self) -> Result<(), ControlError> {
        let n = self.times.len();
        if self.states.len() != n
            || self.inputs.len() != n
            || self.vrefs.len() != n
            || self.margins.len() != n
        {
            return Err(ControlError::Config("trajectory length mismatch".into()));
        }
        Ok(())
    }

    /// CSV dump with full-precision floats (round-trippable).
    pub fn to_csv(&self) -> String {
        let nx = self.states.first().map_or(0, |s| s.len());
        let nu = self.inputs.first().map_or(0, |s| s.len());
        let nv = self.vrefs.first().map_or(0, |s| s.len());
        let mut out = String::from("t");
        for i in 1..=nx {
            out.push_str(&format!(",x{i}"));
        }
        for i in 1..=nu {
            out.push_str(&format!(",u{i}"));
        }
        for i in 1..=nv {
            out.push_str(&format!(",v{i}"));
        }
        out.push_str(",margin\n");
        for k in 0..self.times.len() {
            out.push_str(&format!("{:.16e}", self.times[k]));
            for v in self.states[k]
                .iter()
                .chain(self.inputs[k].iter())
                .chain(self.vrefs[k].iter())
            {
                out.push_str(&format!(",{:.16e}", v));
            }
            out.push_str(&format!(",{:.16e}\n", self.margins[k]));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// MPC for tracking
// ---------------------------------------------------------------------------

/// Tracking MPC over decision (u(0..Nc-1), v): stage cost Q/R about the
/// artificial equilibrium x̄_v, offset cost T on v - r, terminal cost P, and
/// the terminal constraint V(x(Np), v) <= Γ̂(v) with v kept strictly inside
/// the admissible set by `epsilon`.
pub struct MpcConfig {
    pub np: usize,
    pub nc: usize,
    pub q: Mat4,
    pub r_w: Mat2,
    pub t_w: Mat2,
    pub p: Mat4,
    pub a: Mat4,
    pub b: Mat42,
    /// Terminal law u = K x + L v applied beyond the control horizon.
    pub k_gain: Mat24,
    pub l_gain: Mat2,
    /// Steady-state maps x̄_v = G_x v, ū_v = G_u v.
    pub g_x: Mat42,
    pub g_u: Mat2,
    /// Margin keeping v strictly inside the admissible reference set,
    /// enforced as slack(v) >= epsilon.
    pub epsilon: f64,
    pub family: InvariantSetFamily,
}

impl MpcConfig {
    /// The ball-and-plate scenario: Nc=1, Np=2, Q=I, R=0.1 I, T=10 I.
    pub fn ball_and_plate(family: InvariantSetFamily) -> Result<Self, ControlError> {
        let (a, b) = ball_and_plate::discrete_plant();
        let (k, l) = ball_and_plate::terminal_law();
        let cfg = MpcConfig {
            np: 2,
            nc: 1,
            q: Mat4::identity(),
            r_w: Mat2::identity() * 0.1,
            t_w: Mat2::identity() * 10.0,
            p: ball_and_plate::discrete_lyapunov(),
            a,
            b,
            k_gain: k,
            l_gain: l,
            g_x: ball_and_plate::steady_state_map(),
            g_u: Mat2::zeros(),
            epsilon: 1e-3,
            family,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ControlError> {
        if self.nc == 0 || self.nc > self.np {
            return Err(ControlError::Config("require 1 <= Nc <= Np".into()));
        }
        if self.epsilon < 0.0 {
            return Err(ControlError::Config("epsilon must be >= 0".into()));
        }
        for (m, name) in [(&self.q, "Q"), (&self.p, "P")] {
            let eigs = m.symmetric_eigenvalues();
            if eigs.iter().cloned().fold(f64::INFINITY, f64::min) <= 0.0 {
                return Err(ControlError::Config(format!(
                    "{name} must be positive definite"
                )));
            }
        }
        for (m, name) in [(&self.r_w, "R"), (&self.t_w, "T")] {
            let eigs = m.symmetric_eigenvalues();
            if eigs.iter().cloned().fold(f64::INFINITY, f64::min) < -1e-12 {
                return Err(ControlError::Config(format!(
                    "{name} must be positive semidefinite"
                )));
            }
        }
        Ok(())
    }

    fn n_decision(&self) -> usize {
        2 * self.nc + 2
    }
}

/// One solved MPC step.
#[derive(Debug, Clone)]
pub struct MpcStep {
    pub u: Vec2,
    pub v: Vec2,
    /// Predicted states x(1..=Np).
    pub predicted: Vec<Vec4>,
    pub cost: f64,
    /// Γ̂(v) - V(x(Np), v); feasibility requires >= -1e-6.
    pub terminal_slack: f64,
    /// Worst position-constraint slack over the prediction.
    pub worst_slack: f64,
}

struct MpcEval {
    cost: f64,
    violation: f64,
    terminal_slack: f64,
    worst_slack: f64,
    predicted: Vec<Vec4>,
    u0: Vec2,
    v: Vec2,
}

const MPC_FEAS_TOL: f64 = 1e-6;

fn mpc_evaluate(cfg: &MpcConfig, x0: &Vec4, r: &Vec2, z: &[f64]) -> Result<MpcEval, ControlError> {
    let v = Vec2::new(z[2 * cfg.nc], z[2 * cfg.nc + 1]);
    let xbar = cfg.g_x * v;
    let ubar = cfg.g_u * v;
    let mut cost = 0.0;
    let mut violation = 0.0f64;
    let mut worst_slack = f64::INFINITY;
    let mut predicted = Vec::with_capacity(cfg.np);
    let mut x = *x0;
    let mut u0 = Vec2::zeros();
    for i in 0..cfg.np {
        let u = if i < cfg.nc {
            Vec2::new(z[2 * i], z[2 * i + 1])
        } else {
            cfg.k_gain * x + cfg.l_gain * v
        };
        if i == 0 {
            u0 = u;
        }
        let dx = x - xbar;
        let du = u - ubar;
        cost += (dx.transpose() * cfg.q * dx)[(0, 0)] + (du.transpose() * cfg.r_w * du)[(0, 0)];
        x = cfg.a * x + cfg.b * u;
        predicted.push(x);
        let s = ball_and_plate::position_slack(x[0], x[2]);
        worst_slack = worst_slack.min(s);
        violation += (-s).max(0.0).powi(2);
    }
    let dv = v - r;
    cost += (dv.transpose() * cfg.t_w * dv)[(0, 0)];
    let dxf = x - xbar;
    cost += (dxf.transpose() * cfg.p * dxf)[(0, 0)];
    // Reference admissibility with margin, and the terminal set membership.
    let v_slack = ball_and_plate::position_slack(v[0], v[1]) - cfg.epsilon;
    violation += (-v_slack).max(0.0).powi(2);
    let gamma = self::evaluate_family(&cfg.family, &[v[0], v[1]])?;
    let terminal_slack = gamma - lyapunov_value(&cfg.p, &cfg.g_x, &x, &v);
    violation += (-terminal_slack).max(0.0).powi(2);
    Ok(MpcEval {
        cost,
        violation,
        terminal_slack,
        worst_slack: worst_slack.min(v_slack + cfg.epsilon),
        predicted,
        u0,
        v,
    })
}

fn evaluate_family(fam: &InvariantSetFamily, v: &[f64]) -> Result<f64, ControlError> {
    Ok(fam.evaluate(v)?)
}

/// Derivative-free Nelder-Mead minimization; deterministic for fixed inputs.
fn nelder_mead<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    x0: &[f64],
    scale: f64,
    max_iter: usize,
) -> (Vec<f64>, f64) {
    let n = x0.len();
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    simplex.push((x0.to_vec(), f(x0)));
    for i in 0..n {
        let mut p = x0.to_vec();
        p[i] += scale;
        let fp = f(&p);
        simplex.push((p, fp));
    }
    for _ in 0..max_iter {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let best = simplex[0].1;
        let worst = simplex[n].1;
        if (worst - best).abs() <= 1e-14 * (1.0 + best.abs()) {
            break;
        }
        let mut centroid = vec![0.0; n];
        for (p, _) in simplex.iter().take(n) {
            for (c, v) in centroid.iter_mut().zip(p) {
                *c += v / n as f64;
            }
        }
        let at = |t: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&simplex[n].0)
                .map(|(c, w)| c + t * (c - w))
                .collect()
        };
        let xr = at(1.0);
        let fr = f(&xr);
        if fr < simplex[0].1 {
            let xe = at(2.0);
            let fe = f(&xe);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
        } else {
            let xc = at(-0.5);
            let fc = f(&xc);
            if fc < simplex[n].1 {
                simplex[n] = (xc, fc);
            } else {
                let best_p = simplex[0].0.clone();
                for (p, fv) in simplex.iter_mut().skip(1) {
                    for (pi, bi) in p.iter_mut().zip(&best_p) {
                        *pi = 0.5 * (*pi + bi);
                    }
                    *fv = f(p);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (p, fv) = simplex.swap_remove(0);
    (p, fv)
}

/// Solve one MPC step by penalty + Nelder-Mead multistart. `warm` is the
/// shifted previous solution; further starts aim v at the desired reference
/// and at the current position.
pub fn mpc_step(
    cfg: &MpcConfig,
    x0: &Vec4,
    r: &Vec2,
    warm: Option<(Vec2, Vec2)>,
) -> Result<MpcStep, ControlError> {
    let mut starts: Vec<(Vec2, Vec2)> = Vec::new();
    if let Some(w) = warm {
        starts.push(w);
    }
    let pos = Vec2::new(x0[0], x0[2]);
    let candidates = [
        *r,
        pos,
        pos + 0.25 * (r - pos),
        pos + 0.5 * (r - pos),
        pos + 0.75 * (r - pos),
    ];
    for v in candidates {
        let u = cfg.k_gain * x0 + cfg.l_gain * v;
        starts.push((u, v));
    }
    let mut best: Option<(MpcEval, f64)> = None;
    for (u_s, v_s) in starts {
        let nz = cfg.n_decision();
        let mut z0 = vec![0.0; nz];
        for i in 0..cfg.nc {
            z0[2 * i] = u_s[0];
            z0[2 * i + 1] = u_s[1];
        }
        z0[nz - 2] = v_s[0];
        z0[nz - 1] = v_s[1];
        let mut z = z0;
        for mu in [1e3, 1e5, 1e7] {
            let obj = |p: &[f64]| match mpc_evaluate(cfg, x0, r, p) {
                Ok(e) => e.cost + mu * e.violation,
                Err(_) => f64::INFINITY,
            };
            let (znew, _) = nelder_mead(obj, &z, 0.3, 600);
            z = znew;
        }
        let eval = mpc_evaluate(cfg, x0, r, &z)?;
        let feasible = eval.worst_slack >= -MPC_FEAS_TOL
            && eval.terminal_slack >= -MPC_FEAS_TOL
            && ball_and_plate::position_slack(eval.v[0], eval.v[1])
                >= cfg.epsilon - MPC_FEAS_TOL;
        if feasible {
            let score = eval.cost;
            if best.as_ref().map_or(true, |(_, s)| score < *s) {
                best = Some((eval, score));
            }
        }
    }
    match best {
        Some((e, _)) => Ok(MpcStep {
            u: e.u0,
            v: e.v,
            predicted: e.predicted,
            cost: e.cost,
            terminal_slack: e.terminal_slack,
            worst_slack: e.worst_slack,
        }),
        None => Err(ControlError::Infeasible {
            step: 0,
            detail: "no multistart point satisfied the constraints".into(),
        }),
    }
}

/// Closed-loop MPC simulation for `steps` steps.
pub fn run_mpc(
    cfg: &MpcConfig,
    x0: &Vec4,
    r: &Vec2,
    steps: usize,
) -> Result<Trajectory, ControlError> {
    let mut x = *x0;
    let mut warm: Option<(Vec2, Vec2)> = None;
    let mut traj = Trajectory {
        times: Vec::new(),
        states: Vec::new(),
        inputs: Vec::new(),
        vrefs: Vec::new(),
        margins: Vec::new(),
    };
    for step in 0..steps {
        let sol = mpc_step(cfg, &x, r, warm).map_err(|e| match e {
            ControlError::Infeasible { detail, .. } => ControlError::Infeasible { step, detail },
            other => other,
        })?;
        traj.times.push(step as f64);
        traj.states.push(x.iter().cloned().collect());
        traj.inputs.push(sol.u.iter().cloned().collect());
        traj.vrefs.push(sol.v.iter().cloned().collect());
        traj.margins.push(sol.terminal_slack);
        x = cfg.a * x + cfg.b * sol.u;
        if !x.iter().all(|v| v.is_finite()) {
            return Err(ControlError::NonFinite { step });
        }
        // Shifted warm start: next first input from the terminal law at the
        // realized next state.
        let u_next = cfg.k_gain * x + cfg.l_gain * sol.v;
        warm = Some((u_next, sol.v));
    }
    traj.check_consistent()?;
    Ok(traj)
}

// ---------------------------------------------------------------------------
// Explicit reference governor
// ---------------------------------------------------------------------------

/// ERG over a prestabilized continuous loop: v̇ = Δ(x, v) ρ(r, v) with the
/// dynamic safety margin Δ = λ max(0, Γ̂(v) - V(x, v)) and a navigation
/// field pulled back through a diffeomorphism onto a convex set.
pub struct ErgConfig {
    pub lambda: f64,
    /// Smoothing floor in the navigation-field normalization.
    pub theta: f64,
    /// RK4 step.
    pub h: f64,
    pub a: Mat4,
    pub b: Mat42,
    pub p: Mat4,
    pub g_x: Mat42,
    pub family: InvariantSetFamily,
    /// Diffeomorphism from the admissible-reference interior to a convex
    /// set; may be non-polynomial. The Jacobian is taken by central
    /// differences.
    pub phi: fn(&[f64; 2]) -> [f64; 2],
}

impl ErgConfig {
    /// The ball-and-plate scenario with default gains.
    pub fn ball_and_plate(family: InvariantSetFamily) -> Result<Self, ControlError> {
        let (a, b) = ball_and_plate::continuous_closed_loop();
        let cfg = ErgConfig {
            lambda: 10.0,
            theta: 0.01,
            h: 1e-3,
            a,
            b,
            p: ball_and_plate::continuous_lyapunov(),
            g_x: ball_and_plate::steady_state_map(),
            family,
            phi: ball_and_plate::bow_tie_map,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ControlError> {
        if !(self.lambda > 0.0 && self.theta > 0.0 && self.h > 0.0) {
            return Err(ControlError::Config(
                "lambda, theta, and h must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Navigation field: the straight line toward r in mapped coordinates,
/// pulled back through the Jacobian and normalized with smoothing floor
/// theta. Returns a vector of norm <= 1.
pub fn navigation_field(
    phi: fn(&[f64; 2]) -> [f64; 2],
    r: &Vec2,
    v: &Vec2,
    theta: f64,
) -> Result<Vec2, ControlError> {
    let jac = phi_jacobian(phi, v)?;
    let target = phi(&[r[0], r[1]]);
    let here = phi(&[v[0], v[1]]);
    let diff = Vec2::new(target[0] - here[0], target[1] - here[1]);
    let d = jac.lu().solve(&diff).ok_or_else(|| {
        ControlError::Config(format!("singular navigation Jacobian at v = {:?}", v))
    })?;
    Ok(d / d.norm().max(theta))
}

/// Central-difference Jacobian of the diffeomorphism.
pub fn phi_jacobian(phi: fn(&[f64; 2]) -> [f64; 2], v: &Vec2) -> Result<Mat2, ControlError> {
    let h = 1e-6;
    let mut jac = Mat2::zeros();
    for j in 0..2 {
        let mut vp = [v[0], v[1]];
        let mut vm = [v[0], v[1]];
        vp[j] += h;
        vm[j] -= h;
        let fp = phi(&vp);
        let fm = phi(&vm);
        for i in 0..2 {
            jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    if !jac.iter().all(|x| x.is_finite()) {
        return Err(ControlError::Config(format!(
            "navigation map not differentiable at v = {:?}",
            v
        )));
    }
    Ok(jac)
}

/// Integrate the coupled (x, v) system with fixed-step RK4. The dynamic
/// safety margin is clamped at zero so v never moves while the state is
/// outside its safe level set. Records every `stride`-th step (and always
/// the last).
pub fn run_erg(
    cfg: &ErgConfig,
    x0: &Vec4,
    v0: &Vec2,
    r: &Vec2,
    t_end: f64,
    stride: usize,
) -> Result<Trajectory, ControlError> {
    cfg.validate()?;
    let stride = stride.max(1);
    let steps = (t_end / cfg.h).round() as usize;
    let mut x = *x0;
    let mut v = *v0;
    let mut traj = Trajectory {
        times: Vec::new(),
        states: Vec::new(),
        inputs: Vec::new(),
        vrefs: Vec::new(),
        margins: Vec::new(),
    };
    let dsm = |x: &Vec4, v: &Vec2| -> Result<f64, ControlError> {
        let gamma = evaluate_family(&cfg.family, &[v[0], v[1]])?;
        Ok(cfg.lambda * (gamma - lyapunov_value(&cfg.p, &cfg.g_x, x, v)).max(0.0))
    };
    let deriv = |x: &Vec4, v: &Vec2| -> Result<(Vec4, Vec2), ControlError> {
        let xdot = cfg.a * x + cfg.b * v;
        let delta = dsm(x, v)?;
        let vdot = if delta > 0.0 {
            delta * navigation_field(cfg.phi, r, v, cfg.theta)?
        } else {
            Vec2::zeros()
        };
        Ok((xdot, vdot))
    };
    let mut record = |k: usize, x: &Vec4, v: &Vec2, delta: f64| {
        traj.times.push(k as f64 * cfg.h);
        traj.states.push(x.iter().cloned().collect());
        traj.inputs.push(vec![v[0], v[1]]);
        traj.vrefs.push(vec![v[0], v[1]]);
        traj.margins.push(delta);
    };
    for k in 0..steps {
        let delta = dsm(&x, &v)?;
        if k % stride == 0 {
            record(k, &x, &v, delta);
        }
        let h = cfg.h;
        let (k1x, k1v) = deriv(&x, &v)?;
        let (k2x, k2v) = deriv(&(x + 0.5 * h * k1x), &(v + 0.5 * h * k1v))?;
        let (k3x, k3v) = deriv(&(x + 0.5 * h * k2x), &(v + 0.5 * h * k2v))?;
        let (k4x, k4v) = deriv(&(x + h * k3x), &(v + h * k3v))?;
        x += h / 6.0 * (k1x + 2.0 * k2x + 2.0 * k3x + k4x);
        v += h / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v);
        if !(x.iter().all(|t| t.is_finite()) && v.iter().all(|t| t.is_finite())) {
            return Err(ControlError::NonFinite { step: k });
        }
    }
    let delta = dsm(&x, &v)?;
    record(steps, &x, &v, delta);
    traj.check_consistent()?;
    Ok(traj)
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::invariant::GammaApprox;

    fn constant_family(level: f64) -> InvariantSetFamily {
        let rvars = ["v1", "v2"];
        let gamma = Polynomial::constant(&rvars, level);
        let cbar = Polynomial::constant(&rvars, 1.0);
        InvariantSetFamily {
            per_constraint: vec![GammaApprox {
                constraint_index: 0,
                pieces: vec![(ball_and_plate::reference_domain(), gamma)],
                factor_k: 0,
                cbar,
            }],
        }
    }

    #[test]
    fn bow_tie_geometry() {
        let e = ball_and_plate::p1_extent();
        assert!((ball_and_plate::position_slack(e, 0.0)).abs() < 1e-9);
        assert!((e - 3.1639).abs() < 1e-3);
        let h0 = ball_and_plate::half_height(0.0);
        assert!(ball_and_plate::position_slack(0.0, h0).abs() < 1e-9);
        // Widest at p1 = sqrt(5).
        let hw = ball_and_plate::half_height((5.0f64).sqrt());
        assert!(hw > 2.0 && hw < 2.2);
    }

    #[test]
    fn pieces_sit_strictly_inside_the_bow_tie() {
        for piece in ball_and_plate::reference_pieces() {
            let Region::Simplex { vertices } = &piece else {
                panic!("expected simplex pieces");
            };
            // Check the whole edge graph, not just the vertices: the set is
            // not convex, so segment interiors need verifying too.
            for i in 0..vertices.len() {
                for j in (i + 1)..vertices.len() {
                    for k in 0..=20 {
                        let t = k as f64 / 20.0;
                        let p1 = vertices[i][0] + t * (vertices[j][0] - vertices[i][0]);
                        let p2 = vertices[i][1] + t * (vertices[j][1] - vertices[i][1]);
                        assert!(
                            ball_and_plate::position_slack(p1, p2) > 0.0,
                            "edge point ({p1}, {p2}) outside the set"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn pieces_cover_the_governor_path() {
        // The navigation field moves v on the straight line in mapped
        // coordinates from the scenario start to the scenario target; the
        // interior cover must contain that whole line.
        let pieces = ball_and_plate::reference_pieces();
        let a = ball_and_plate::bow_tie_map(&[-2.0, 1.75]);
        let b = ball_and_plate::bow_tie_map(&[2.0, 1.0]);
        for i in 0..=400 {
            let t = i as f64 / 400.0;
            let m1 = a[0] + t * (b[0] - a[0]);
            let m2 = a[1] + t * (b[1] - a[1]);
            let pt = [m1, m2 * ball_and_plate::half_height(m1)];
            assert!(
                pieces.iter().any(|r| r.contains(&pt, 1e-9)),
                "uncovered path point {:?}",
                pt
            );
        }
    }

    #[test]
    fn reduced_system_is_sound_wrt_full_v() {
        // V_red(y, v) <= V(x, v) whenever y are the positions of x.
        let p = ball_and_plate::continuous_lyapunov();
        let sys = ball_and_plate::reduced_system(&p).unwrap();
        let g_x = ball_and_plate::steady_state_map();
        let x = Vec4::new(0.3, -0.7, -1.1, 0.4);
        let v = Vec2::new(0.5, 0.2);
        let full = lyapunov_value(&p, &g_x, &x, &v);
        let red = sys.v_at(&[x[0], x[2]], &[v[0], v[1]]).unwrap();
        assert!(red <= full + 1e-12);
        // And equal when the velocities minimize the quadratic.
        let w = -p[(0, 1)] / p[(1, 1)];
        let xmin = Vec4::new(0.3, w * (0.3 - v[0]), -1.1, w * (-1.1 - v[1]));
        let fmin = lyapunov_value(&p, &g_x, &xmin, &v);
        let rmin = sys.v_at(&[0.3, -1.1], &[v[0], v[1]]).unwrap();
        assert!((fmin - rmin).abs() < 1e-10);
    }

    #[test]
    fn navigation_field_trivial_cases() {
        fn identity(v: &[f64; 2]) -> [f64; 2] {
            *v
        }
        let v = Vec2::new(0.3, -0.2);
        let rho = navigation_field(identity, &v, &v, 0.01).unwrap();
        assert!(rho.norm() < 1e-9);
        let r = Vec2::new(5.0, 0.0);
        let rho = navigation_field(identity, &r, &Vec2::zeros(), 0.01).unwrap();
        assert!((rho - Vec2::new(1.0, 0.0)).norm() < 1e-9);
    }

    #[test]
    fn navigation_jacobian_matches_identity() {
        fn identity(v: &[f64; 2]) -> [f64; 2] {
            *v
        }
        let jac = phi_jacobian(identity, &Vec2::new(0.1, 0.9)).unwrap();
        assert!((jac - Mat2::identity()).norm() < 1e-9);
    }

    #[test]
    fn bow_tie_map_is_finite_inside() {
        let v = [0.0, 0.25];
        let m = ball_and_plate::bow_tie_map(&v);
        assert!(m.iter().all(|x| x.is_finite()));
        assert!(m[1].abs() < 1.0);
        let rho = navigation_field(
            ball_and_plate::bow_tie_map,
            &Vec2::new(2.0, 1.0),
            &Vec2::new(0.0, 0.5 * ball_and_plate::half_height(0.0)),
            0.01,
        )
        .unwrap();
        assert!(rho.norm() <= 1.0 + 1e-9 && rho.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn mpc_equilibrium_is_a_fixed_point() {
        let fam = constant_family(1.0);
        let cfg = MpcConfig::ball_and_plate(fam).unwrap();
        let r = Vec2::new(2.0, 1.0);
        let x0 = cfg.g_x * r;
        let sol = mpc_step(&cfg, &x0, &r, None).unwrap();
        assert!(sol.u.norm() < 1e-4, "u = {:?}", sol.u);
        assert!((sol.v - r).norm() < 1e-4);
        assert!(sol.cost < 1e-6);
    }

    #[test]
    fn erg_stationary_at_equilibrium() {
        let fam = constant_family(1.0);
        let cfg = ErgConfig::ball_and_plate(fam).unwrap();
        let v0 = Vec2::new(2.0, 1.0);
        let x0 = cfg.g_x * v0;
        let traj = run_erg(&cfg, &x0, &v0, &v0, 0.05, 10).unwrap();
        let last = traj.states.last().unwrap();
        assert!((last[0] - 2.0).abs() < 1e-9 && (last[2] - 1.0).abs() < 1e-9);
        let vlast = traj.vrefs.last().unwrap();
        assert!((vlast[0] - 2.0).abs() < 1e-12 && (vlast[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn trajectory_csv_roundtrip_shape() {
        let traj = Trajectory {
            times: vec![0.0, 1.0],
            states: vec![vec![1.0, 2.0], vec![3.0, 4.0]],
            inputs: vec![vec![0.5], vec![0.25]],
            vrefs: vec![vec![0.0], vec![0.1]],
            margins: vec![1.0, 2.0],
        };
        let csv = traj.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "t,x1,x2,u1,v1,margin");
        let first: Vec<f64> = lines[1].split(',').map(|s| s.parse().unwrap()).collect();
        assert_eq!(first, vec![0.0, 1.0, 2.0, 0.5, 0.0, 1.0]);
    }

    #[test]
    fn config_validation_rejects_bad_shapes() {
        let fam = constant_family(1.0);
        let mut cfg = MpcConfig::ball_and_plate(fam).unwrap();
        cfg.nc = 3;
        assert!(cfg.validate().is_err());
        cfg.nc = 1;
        cfg.q = Mat4::zeros();
        assert!(cfg.validate().is_err());
    }
}
