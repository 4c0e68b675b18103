//! Reference-dependent invariant set computation.
//!
//! Given closed-loop polynomial dynamics, a reference-dependent Lyapunov
//! function V(x, r), and polynomial constraints c_i(x, r) >= 0, this module
//! assembles sum-of-squares programs whose solutions are polynomial lower
//! bounds gamma_hat(r) on the largest safe level gamma_star(r) of V. The level
//! set {x : V(x, r) <= gamma_hat(r)} is then positively invariant and
//! constraint-admissible for every admissible reference r.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::poly::{
    monomials_up_to, parse_polynomial, Monomial, PolyError, Polynomial, Region,
};
use crate::sdp::{SolveStatus, SolverSettings};
use crate::sos::{self, AffineExpr, DecisionPoly, GramCertificate, SosError, SosProgram};

/// Tolerance for the polynomial identity checks on system construction
/// (V(xbar, r) == 0 and steady-state consistency).
pub const IDENTITY_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum InvariantError {
    #[error("polynomial error: {0}")]
    Poly(#[from] PolyError),
    #[error("sos error: {0}")]
    Sos(#[from] SosError),
    #[error("V does not vanish at the steady state: residual coefficient {0:.3e}")]
    LyapunovNotCentered(f64),
    #[error("steady state is not an equilibrium of f: residual coefficient {0:.3e}")]
    SteadyStateInconsistent(f64),
    #[error("constraint index {0} out of range ({1} constraints)")]
    BadConstraintIndex(usize, usize),
    #[error("tessellation only built in for 1-D and 2-D domains; got dimension {0}")]
    UnsupportedDimension(usize),
    #[error("problem file: {0}")]
    ProblemFile(String),
    #[error("problem file: missing required field `{0}`")]
    MissingField(&'static str),
}

/// Continuous-time (f is a vector field) or discrete-time (f is a map).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Continuous,
    Discrete,
}

/// A polynomial constrained closed-loop system with a reference-dependent
/// Lyapunov function.
///
/// All (x, r) polynomials live over the concatenated variable list
/// `state_vars ++ ref_vars`; the steady-state map and admissible-reference
/// data live over `ref_vars` alone.
#[derive(Debug, Clone)]
pub struct ConstrainedSystem {
    pub state_vars: Vec<String>,
    pub ref_vars: Vec<String>,
    pub mode: Mode,
    /// Closed-loop dynamics, one polynomial in (x, r) per state.
    pub f: Vec<Polynomial>,
    /// Constraints with the convention c_i(x, r) >= 0 on the admissible set.
    pub constraints: Vec<Polynomial>,
    /// Steady state xbar(r), one polynomial in r per state.
    pub steady_state: Vec<Polynomial>,
    /// The reference-dependent Lyapunov function V(x, r).
    pub v: Polynomial,
}

impl ConstrainedSystem {
    pub fn new(
        state_vars: Vec<String>,
        ref_vars: Vec<String>,
        mode: Mode,
        f: Vec<Polynomial>,
        constraints: Vec<Polynomial>,
        steady_state: Vec<Polynomial>,
        v: Polynomial,
    ) -> Result<Self, InvariantError> {
        let sys = ConstrainedSystem {
            state_vars,
            ref_vars,
            mode,
            f,
            constraints,
            steady_state,
            v,
        };
        // V(xbar_r, r) must vanish identically.
        let v_at_ss = sys.project_to_refs(&sys.v)?;
        let res = max_abs_coeff(&v_at_ss);
        if res > IDENTITY_TOL {
            return Err(InvariantError::LyapunovNotCentered(res));
        }
        // f(xbar_r, r) == 0 (continuous) or == xbar_r (discrete).
        for (j, fj) in sys.f.iter().enumerate() {
            let fj_at_ss = sys.project_to_refs(fj)?;
            let resid = match sys.mode {
                Mode::Continuous => fj_at_ss,
                Mode::Discrete => fj_at_ss.sub(&sys.steady_state[j])?,
            };
            let res = max_abs_coeff(&resid);
            if res > IDENTITY_TOL {
                return Err(InvariantError::SteadyStateInconsistent(res));
            }
        }
        Ok(sys)
    }

    pub fn n_states(&self) -> usize {
        self.state_vars.len()
    }

    pub fn n_refs(&self) -> usize {
        self.ref_vars.len()
    }

    /// Combined (x, r) variable list shared by V, f, and the constraints.
    pub fn all_vars(&self) -> Vec<String> {
        self.state_vars
            .iter()
            .chain(self.ref_vars.iter())
            .cloned()
            .collect()
    }

    /// Substitute x -> xbar(r), yielding a polynomial over the reference ring.
    pub fn project_to_refs(&self, p: &Polynomial) -> Result<Polynomial, PolyError> {
        let bindings: BTreeMap<String, Polynomial> = self
            .state_vars
            .iter()
            .cloned()
            .zip(self.steady_state.iter().cloned())
            .collect();
        p.substitute(&bindings)
    }

    /// Evaluate V at a concrete state and reference.
    pub fn v_at(&self, x: &[f64], r: &[f64]) -> Result<f64, PolyError> {
        let point: Vec<f64> = x.iter().chain(r.iter()).copied().collect();
        self.v.evaluate(&point)
    }

    /// Evaluate constraint i at a concrete state and reference.
    pub fn constraint_at(&self, i: usize, x: &[f64], r: &[f64]) -> Result<f64, PolyError> {
        let point: Vec<f64> = x.iter().chain(r.iter()).copied().collect();
        self.constraints[i].evaluate(&point)
    }

    /// Evaluate the steady state at a concrete reference.
    pub fn steady_state_at(&self, r: &[f64]) -> Result<Vec<f64>, PolyError> {
        self.steady_state.iter().map(|p| p.evaluate(r)).collect()
    }

    /// Evaluate the dynamics at a concrete state and reference.
    pub fn f_at(&self, x: &[f64], r: &[f64]) -> Result<Vec<f64>, PolyError> {
        let point: Vec<f64> = x.iter().chain(r.iter()).copied().collect();
        self.f.iter().map(|p| p.evaluate(&point)).collect()
    }

    pub fn admissible_refs(&self, domain: Region) -> Result<AdmissibleRefs, InvariantError> {
        domain.check_nondegenerate()?;
        let cbar = self
            .constraints
            .iter()
            .map(|c| self.project_to_refs(c))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(AdmissibleRefs { cbar, domain })
    }
}

fn max_abs_coeff(p: &Polynomial) -> f64 {
    p.terms().map(|(_, c)| c.abs()).fold(0.0, f64::max)
}

/// The admissible reference data: steady-state constraints cbar_i(r) >= 0 and
/// the compact optimization domain inside the admissible set.
#[derive(Debug, Clone)]
pub struct AdmissibleRefs {
    pub cbar: Vec<Polynomial>,
    pub domain: Region,
}

impl AdmissibleRefs {
    /// True iff every cbar_i(r) >= -tol.
    pub fn contains(&self, r: &[f64], tol: f64) -> Result<bool, PolyError> {
        for c in &self.cbar {
            if c.evaluate(r)? < -tol {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

/// Piecewise polynomial lower bound for one constraint: evaluation is the max
/// over pieces covering r (zero outside all pieces), times cbar^k when the
/// factored form is used, clamped at zero.
#[derive(Debug, Clone)]
pub struct GammaApprox {
    pub constraint_index: usize,
    pub pieces: Vec<(Region, Polynomial)>,
    pub factor_k: u32,
    pub cbar: Polynomial,
    /// Absolute soundness margin subtracted at evaluation time (after the
    /// cbar^k factor), compensating for the certificate tolerances the
    /// solved pieces were accepted under. See [`SOUNDNESS_MARGIN`].
    pub margin: f64,
}

impl GammaApprox {
    pub fn evaluate(&self, r: &[f64]) -> Result<f64, PolyError> {
        let mut best: Option<f64> = None;
        for (region, p) in &self.pieces {
            if region.contains(r, 1e-9) {
                let v = p.evaluate(r)?;
                best = Some(best.map_or(v, |b: f64| b.max(v)));
            }
        }
        let raw = match best {
            None => return Ok(0.0),
            Some(v) => v,
        };
        let factored = if self.factor_k > 0 {
            raw * self.cbar.evaluate(r)?.powi(self.factor_k as i32)
        } else {
            raw
        };
        Ok(factored.max(0.0))
    }
}

/// Per-constraint bounds combined pointwise by min.
#[derive(Debug, Clone)]
pub struct InvariantSetFamily {
    pub per_constraint: Vec<GammaApprox>,
}

impl InvariantSetFamily {
    pub fn evaluate(&self, r: &[f64]) -> Result<f64, PolyError> {
        let mut out = f64::INFINITY;
        for g in &self.per_constraint {
            out = out.min(g.evaluate(r)?);
        }
        if out.is_infinite() {
            Ok(0.0)
        } else {
            Ok(out)
        }
    }
}

/// Level-set membership: x belongs to the invariant set at reference r.
pub fn membership(
    fam: &InvariantSetFamily,
    sys: &ConstrainedSystem,
    r: &[f64],
    x: &[f64],
) -> Result<bool, PolyError> {
    Ok(sys.v_at(x, r)? <= fam.evaluate(r)?)
}

pub fn evaluate_gamma(fam: &InvariantSetFamily, r: &[f64]) -> Result<f64, PolyError> {
    fam.evaluate(r)
}

// ---------------------------------------------------------------------------
// Region half-spaces
// ---------------------------------------------------------------------------

/// Affine inequalities g(r) >= 0 describing a region: per-axis bounds for a
/// box, barycentric coordinates for a simplex.
pub fn region_halfspaces(region: &Region, ref_vars: &[String]) -> Result<Vec<Polynomial>, PolyError> {
    let refs: Vec<&str> = ref_vars.iter().map(|s| s.as_str()).collect();
    match region {
        Region::Box { lower, upper } => {
            let mut out = Vec::new();
            for (i, name) in refs.iter().enumerate() {
                let ri = Polynomial::var(&refs, name)?;
                out.push(ri.sub(&Polynomial::constant(&refs, lower[i]))?);
                out.push(Polynomial::constant(&refs, upper[i]).sub(&ri)?);
            }
            Ok(out)
        }
        Region::Simplex { vertices } => {
            let p = vertices[0].len();
            // Barycentric coordinates: [1; r] = M * lambda with columns
            // [1; v_j]; each lambda_j(r) = row j of M^{-1} applied to [1; r]
            // is affine and nonnegative exactly on the simplex.
            let mut m = DMatrix::zeros(p + 1, p + 1);
            for (j, v) in vertices.iter().enumerate() {
                m[(0, j)] = 1.0;
                for k in 0..p {
                    m[(k + 1, j)] = v[k];
                }
            }
            let minv = m
                .try_inverse()
                .ok_or_else(|| PolyError::DegenerateRegion("singular simplex".to_string()))?;
            let mut out = Vec::new();
            for j in 0..=p {
                let mut lam = Polynomial::constant(&refs, minv[(j, 0)]);
                for k in 0..p {
                    let rk = Polynomial::var(&refs, refs[k])?;
                    lam = lam.add(&rk.scale(minv[(j, k + 1)]))?;
                }
                out.push(lam);
            }
            Ok(out)
        }
    }
}

// ---------------------------------------------------------------------------
// Tessellation
// ---------------------------------------------------------------------------

/// Split a domain into simplices: equal intervals in 1-D, a Delaunay
/// triangulation of a uniform grid in 2-D. Higher dimensions must supply
/// their own simplex list.
pub fn tessellate(domain: &Region, n_divisions: usize) -> Result<Vec<Region>, InvariantError> {
    domain.check_nondegenerate()?;
    let (lower, upper) = match domain {
        Region::Box { lower, upper } => (lower.clone(), upper.clone()),
        Region::Simplex { vertices } => {
            let p = vertices[0].len();
            if p == 1 {
                let xs: Vec<f64> = vertices.iter().map(|v| v[0]).collect();
                (
                    vec![xs.iter().cloned().fold(f64::INFINITY, f64::min)],
                    vec![xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max)],
                )
            } else {
                // A simplex is already a piece; splitting it is out of scope.
                return Ok(vec![domain.clone()]);
            }
        }
    };
    match lower.len() {
        1 => {
            let (a, b) = (lower[0], upper[0]);
            let w = (b - a) / n_divisions as f64;
            Ok((0..n_divisions)
                .map(|i| Region::Simplex {
                    vertices: vec![vec![a + i as f64 * w], vec![a + (i + 1) as f64 * w]],
                })
                .collect())
        }
        2 => {
            let n = (n_divisions as f64).sqrt().round().max(1.0) as usize;
            let mut points = Vec::new();
            for i in 0..=n {
                for j in 0..=n {
                    points.push(vec![
                        lower[0] + (upper[0] - lower[0]) * i as f64 / n as f64,
                        lower[1] + (upper[1] - lower[1]) * j as f64 / n as f64,
                    ]);
                }
            }
            let tris = delaunay_triangulation(&points);
            Ok(tris
                .into_iter()
                .map(|[a, b, c]| Region::Simplex {
                    vertices: vec![points[a].clone(), points[b].clone(), points[c].clone()],
                })
                .collect())
        }
        d => Err(InvariantError::UnsupportedDimension(d)),
    }
}

/// Bowyer-Watson incremental Delaunay triangulation of a 2-D point set.
/// Returns triangles as index triples. Cocircular cases (grids) are broken
/// arbitrarily but consistently.
pub fn delaunay_triangulation(points: &[Vec<f64>]) -> Vec<[usize; 3]> {
    if points.len() < 3 {
        return Vec::new();
    }
    // Super-triangle comfortably containing every point.
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in points {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1.0);
    let cx = (lo[0] + hi[0]) / 2.0;
    let cy = (lo[1] + hi[1]) / 2.0;
    let mut pts: Vec<[f64; 2]> = points.iter().map(|p| [p[0], p[1]]).collect();
    let base = pts.len();
    pts.push([cx - 20.0 * span, cy - 10.0 * span]);
    pts.push([cx + 20.0 * span, cy - 10.0 * span]);
    pts.push([cx, cy + 20.0 * span]);
    let mut tris: Vec<[usize; 3]> = vec![[base, base + 1, base + 2]];

    let circumcircle_contains = |t: &[usize; 3], p: &[f64; 2]| -> bool {
        // Sign of the incircle determinant for a counterclockwise triangle.
        let (a, b, c) = (pts[t[0]], pts[t[1]], pts[t[2]]);
        let orient = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);
        let row = |q: [f64; 2]| {
            let dx = q[0] - p[0];
            let dy = q[1] - p[1];
            (dx, dy, dx * dx + dy * dy)
        };
        let (ax, ay, ad) = row(a);
        let (bx, by, bd) = row(b);
        let (cx_, cy_, cd) = row(c);
        let det = ax * (by * cd - bd * cy_) - ay * (bx * cd - bd * cx_) + ad * (bx * cy_ - by * cx_);
        if orient >= 0.0 {
            det > 1e-12
        } else {
            det < -1e-12
        }
    };

    for (pi, p) in points.iter().enumerate() {
        let p = [p[0], p[1]];
        let mut bad: Vec<usize> = Vec::new();
        for (ti, t) in tris.iter().enumerate() {
            if circumcircle_contains(t, &p) {
                bad.push(ti);
            }
        }
        // Boundary of the cavity: edges appearing in exactly one bad triangle.
        let mut edges: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        for &ti in &bad {
            let t = tris[ti];
            for e in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
                let key = (e.0.min(e.1), e.0.max(e.1));
                *edges.entry(key).or_insert(0) += 1;
            }
        }
        for &ti in bad.iter().rev() {
            tris.swap_remove(ti);
        }
        for (&(u, v), &count) in &edges {
            if count == 1 {
                tris.push([u, v, pi]);
            }
        }
    }
    tris.retain(|t| t.iter().all(|&i| i < base));
    tris
}

// ---------------------------------------------------------------------------
// Program assembly
// ---------------------------------------------------------------------------

/// Degree selection for the certificate polynomials. When `q`/`s` are absent
/// they are derived so every product in the certificate reaches a common even
/// degree D = (max relevant degree) + 2 rounded up to even.
#[derive(Debug, Clone, Copy)]
pub struct Degrees {
    /// Degree of gamma_hat (or of gamma_tilde when factor_k > 0).
    pub gamma: u32,
    pub q: Option<u32>,
    pub s: Option<u32>,
}

#[derive(Debug, Clone)]
pub enum ObjectiveKind {
    /// Exact monomial moments of the region.
    ExactMoments,
    /// Average of gamma_hat over n_w uniform samples from the region.
    Sampled { n_w: usize, seed: u64 },
}

/// The gamma decision handle returned alongside a built program.
///
/// The program is assembled in normalized reference coordinates
/// `r = center + halfwidth * u` with `u` ranging over [-1, 1] (per piece), so
/// the SDP data stays well conditioned regardless of the region's position
/// and size. `into_ref_poly` undoes the substitution on the solved gamma.
#[derive(Debug, Clone)]
pub struct GammaProgram {
    pub program: SosProgram,
    pub gamma: DecisionPoly,
    /// Template of gamma over the (normalized) reference ring.
    pub ref_template: Vec<Monomial>,
    pub ref_center: Vec<f64>,
    pub ref_halfwidth: Vec<f64>,
    /// Undoes the value normalization applied while building the program.
    pub gamma_scale: f64,
}

/// Safety margin subtracted from every solved gamma piece, in normalized
/// value units. Certificates are accepted up to small coefficient mismatch
/// and Gram eigenvalue tolerances, and those residuals can amplify pointwise
/// near the edge of the reference domain; shrinking gamma by a fixed sliver
/// keeps the reported bound below the true threshold despite that slack. The
/// shift is proportional to the problem's value scale, so it is invariant
/// under rescaling V. The magnitude is calibrated against the brute-force
/// oracle on the bundled double-integrator problem, where raw solved bounds
/// overshoot the true threshold by up to 9e-3 in original units (3.5e-4
/// normalized) near the domain edge; 1.5e-3 leaves a 4x safety factor while
/// costing under half a percent of accuracy.
pub const SOUNDNESS_MARGIN: f64 = 1.5e-3;

impl GammaProgram {
    /// Reassemble the solved gamma polynomial in the original reference
    /// coordinates.
    pub fn into_ref_poly(
        &self,
        ref_vars: &[String],
        decision_values: &[f64],
    ) -> Result<Polynomial, PolyError> {
        let ref_strs: Vec<&str> = ref_vars.iter().map(|s| s.as_str()).collect();
        let in_u = Polynomial::from_terms(
            &ref_strs,
            self.ref_template
                .iter()
                .zip(&self.gamma.coeff_ids)
                .map(|(m, &id)| (m.0.clone(), decision_values[id] * self.gamma_scale))
                .collect(),
        );
        // u_j = (r_j - c_j) / h_j
        let mut bindings = BTreeMap::new();
        for (j, name) in ref_vars.iter().enumerate() {
            let rj = Polynomial::var(&ref_strs, name)?;
            bindings.insert(
                name.clone(),
                rj.sub(&Polynomial::constant(&ref_strs, self.ref_center[j]))?
                    .scale(1.0 / self.ref_halfwidth[j]),
            );
        }
        let shifted = in_u.sub(&Polynomial::constant(
            &ref_strs,
            SOUNDNESS_MARGIN * self.gamma_scale.abs(),
        ))?;
        shifted.substitute(&bindings)
    }
}

/// Bounding box of a region.
fn region_bbox(region: &Region) -> (Vec<f64>, Vec<f64>) {
    match region {
        Region::Box { lower, upper } => (lower.clone(), upper.clone()),
        Region::Simplex { vertices } => {
            let p = vertices[0].len();
            let mut lo = vec![f64::INFINITY; p];
            let mut hi = vec![f64::NEG_INFINITY; p];
            for v in vertices {
                for k in 0..p {
                    lo[k] = lo[k].min(v[k]);
                    hi[k] = hi[k].max(v[k]);
                }
            }
            (lo, hi)
        }
    }
}

/// Assemble the certificate program for constraint `i` on one region:
///
///   maximize  integral over region of cbar_i^k * gamma
///   s.t.      V - cbar_i^k*gamma + q*c_i - sum_j s_j*g_j  is SOS,
///             each s_j is SOS,
///
/// where g_j ranges over every steady-state constraint cbar_j plus the
/// region's describing half-spaces, q is a free polynomial, and gamma is a
/// polynomial in r alone.
pub fn build_gamma_program(
    sys: &ConstrainedSystem,
    refs: &AdmissibleRefs,
    i: usize,
    region: &Region,
    degrees: &Degrees,
    factor_k: u32,
    objective: &ObjectiveKind,
) -> Result<GammaProgram, InvariantError> {
    if i >= sys.constraints.len() {
        return Err(InvariantError::BadConstraintIndex(i, sys.constraints.len()));
    }
    region.check_nondegenerate()?;
    let ambient = sys.all_vars();
    let ambient_refs: Vec<&str> = ambient.iter().map(|s| s.as_str()).collect();
    let nx = sys.n_states();
    let np = sys.n_refs();

    // Normalized reference coordinates: r_j = center_j + halfwidth_j * u_j
    // maps the region's bounding box onto [-1, 1]^p.
    let (blo, bhi) = region_bbox(region);
    let coord_norm = std::env::var_os("RDI_NO_COORD_NORM").is_none();
    let ref_center: Vec<f64> = if coord_norm {
        blo.iter().zip(&bhi).map(|(l, u)| 0.5 * (l + u)).collect()
    } else {
        vec![0.0; blo.len()]
    };
    let ref_halfwidth: Vec<f64> = if coord_norm {
        blo.iter()
            .zip(&bhi)
            .map(|(l, u)| (0.5 * (u - l)).max(1e-12))
            .collect()
    } else {
        vec![1.0; blo.len()]
    };
    let scaled_region = if !coord_norm {
        region.clone()
    } else {
        match region {
        Region::Box { lower, .. } => Region::Box {
            lower: vec![-1.0; lower.len()],
            upper: vec![1.0; lower.len()],
        },
        Region::Simplex { vertices } => Region::Simplex {
            vertices: vertices
                .iter()
                .map(|v| {
                    v.iter()
                        .enumerate()
                        .map(|(k, &x)| (x - ref_center[k]) / ref_halfwidth[k])
                        .collect()
                })
                .collect(),
        },
        }
    };
    let subst_for = |vars: &[&str]| -> Result<BTreeMap<String, Polynomial>, PolyError> {
        let mut b = BTreeMap::new();
        for (j, name) in sys.ref_vars.iter().enumerate() {
            let u = Polynomial::var(vars, name)?;
            b.insert(
                name.clone(),
                Polynomial::constant(vars, ref_center[j]).add(&u.scale(ref_halfwidth[j]))?,
            );
        }
        Ok(b)
    };
    let subst_xr = subst_for(&ambient_refs)?;
    let ref_strs_own: Vec<&str> = sys.ref_vars.iter().map(|s| s.as_str()).collect();
    let subst_r = subst_for(&ref_strs_own)?;

    // Value normalization: divide the Lyapunov data (and each multiplier
    // inequality below) by its largest coefficient so the compiled equality
    // rows are O(1); the solved gamma is rescaled on extraction.
    let v_sub = sys.v.substitute(&subst_xr)?;
    // State scaling x_i = w_i * x~_i, with w_i chosen so the leading terms of
    // the Lyapunov function are balanced. Without it, certificates at higher
    // degree become numerically meaningless: boundary minimizers at |x| ~ 10
    // amplify coefficient-level residuals by |x|^degree.
    let vmax0 = max_abs_coeff(&v_sub).max(1.0);
    let mut state_scale = vec![1.0f64; nx];
    for (si, w) in state_scale.iter_mut().enumerate() {
        let mut di = 0u32;
        let mut ci = 0.0f64;
        for (m, c) in v_sub.terms() {
            let e = m.0[si];
            if e > di {
                di = e;
                ci = c.abs();
            } else if e == di && e > 0 {
                ci = ci.max(c.abs());
            }
        }
        if di > 0 && ci > 0.0 {
            *w = (vmax0 / ci).powf(1.0 / f64::from(di));
        }
    }
    let subst_x: BTreeMap<String, Polynomial> = sys
        .state_vars
        .iter()
        .zip(&state_scale)
        .map(|(name, &w)| {
            Ok((
                name.clone(),
                Polynomial::var(&ambient_refs, name)?.scale(w),
            ))
        })
        .collect::<Result<_, PolyError>>()?;
    let v_sub = v_sub.substitute(&subst_x)?;
    let vscale = max_abs_coeff(&v_sub).max(1.0);
    let v_scaled = v_sub.scale(1.0 / vscale);
    let c_i_raw = sys.constraints[i].substitute(&subst_xr)?.substitute(&subst_x)?;
    let c_i = c_i_raw.scale(1.0 / max_abs_coeff(&c_i_raw).max(1.0));
    let cbar_i_r = refs.cbar[i].substitute(&subst_r)?;
    let cbar_i = lift(&cbar_i_r, &ambient, nx)?;
    let cbar_k_r = cbar_i_r.pow(factor_k)?;
    let cbar_scale = max_abs_coeff(&cbar_k_r).max(1.0);
    let cbar_k = cbar_i.pow(factor_k)?.scale(1.0 / cbar_scale);
    let gamma_scale = vscale / cbar_scale;

    // Multiplier inequalities: every global cbar_j plus region half-spaces,
    // all in normalized coordinates.
    let mut g_list: Vec<Polynomial> = Vec::new();
    for cb in &refs.cbar {
        g_list.push(lift(&cb.substitute(&subst_r)?, &ambient, nx)?);
    }
    for h in region_halfspaces(&scaled_region, &sys.ref_vars)? {
        g_list.push(lift(&h, &ambient, nx)?);
    }
    // Positive rescaling is absorbed by the SOS multipliers.
    for g in &mut g_list {
        *g = g.scale(1.0 / max_abs_coeff(g).max(1.0));
    }

    // Balanced degree policy: all products reach the common even degree D.
    let deg = |p: &Polynomial| p.terms().map(|(m, _)| m.total_degree()).max().unwrap_or(0);
    let gamma_full_deg = degrees.gamma + factor_k * deg(&cbar_i_r);
    let base = deg(&v_scaled)
        .max(gamma_full_deg)
        .max(deg(&c_i))
        .max(g_list.iter().map(|g| deg(g)).max().unwrap_or(0));
    let d_common = (base + 2).next_multiple_of(2);
    let deg_q = degrees.q.unwrap_or(d_common.saturating_sub(deg(&c_i)));
    let deg_s = |gdeg: u32| {
        let d = degrees.s.unwrap_or(d_common.saturating_sub(gdeg));
        d - d % 2
    };

    let mut program = SosProgram::new();

    // gamma lives in r alone; embed its r-monomials into the ambient ring.
    let ref_template = monomials_up_to(np, degrees.gamma, false);
    let embedded: Vec<Monomial> = ref_template
        .iter()
        .map(|m| {
            let mut e = vec![0u32; nx + np];
            e[nx..].copy_from_slice(&m.0);
            Monomial::new(e)
        })
        .collect();
    let gamma = program.make_decision_poly_on(&ambient_refs, embedded);

    let q = program.make_decision_poly(&ambient_refs, deg_q, false);

    let mut expr = AffineExpr::from_poly(v_scaled)
        .sub(&AffineExpr::from_decision(&gamma).mul_poly(&cbar_k)?)?
        .add(&AffineExpr::from_decision(&q).mul_poly(&c_i)?)?;
    for g in &g_list {
        let s_j = program.make_decision_poly(&ambient_refs, deg_s(deg(g)), false);
        program.add_sos(AffineExpr::from_decision(&s_j));
        expr = expr.sub(&AffineExpr::from_decision(&s_j).mul_poly(g)?)?;
    }
    program.add_sos(expr);

    // Also certify the piece polynomial nonnegative on its region. The
    // evaluated bound is clamped at zero anyway, so negative excursions only
    // waste objective mass; ruling them out keeps the attained integral equal
    // to the usable one and makes quality monotone in the template degree.
    let d_nn = (degrees.gamma + 1).next_multiple_of(2);
    let mut nonneg = AffineExpr::from_decision(&gamma);
    for g in &g_list {
        let gd = deg(g);
        if gd > d_nn {
            continue;
        }
        let d = d_nn - gd;
        let sigma = program.make_decision_poly(&ambient_refs, d - d % 2, false);
        program.add_sos(AffineExpr::from_decision(&sigma));
        nonneg = nonneg.sub(&AffineExpr::from_decision(&sigma).mul_poly(g)?)?;
    }
    program.add_sos(nonneg);

    // Objective: integral (or sampled average) of cbar^k * gamma over the
    // region, expressed as weights on gamma's coefficients.
    let ref_strs: Vec<&str> = sys.ref_vars.iter().map(|s| s.as_str()).collect();
    let mut weights = Vec::with_capacity(ref_template.len());
    match objective {
        ObjectiveKind::ExactMoments => {
            for m in &ref_template {
                let mono = Polynomial::from_terms(&ref_strs, vec![(m.0.clone(), 1.0)]);
                weights.push(cbar_k_r.mul(&mono)?.integrate(&scaled_region)?);
            }
        }
        ObjectiveKind::Sampled { n_w, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let samples: Vec<Vec<f64>> = (0..*n_w)
                .map(|_| sample_region(&scaled_region, &mut rng))
                .collect();
            for m in &ref_template {
                let mono = Polynomial::from_terms(&ref_strs, vec![(m.0.clone(), 1.0)]);
                let p = cbar_k_r.mul(&mono)?;
                let mut acc = 0.0;
                for s in &samples {
                    acc += p.evaluate(s)?;
                }
                weights.push(acc / *n_w as f64);
            }
        }
    }
    program.set_objective(
        gamma
            .coeff_ids
            .iter()
            .zip(&weights)
            .map(|(&id, &w)| (id, w))
            .collect(),
    );

    Ok(GammaProgram {
        program,
        gamma,
        ref_template,
        ref_center,
        ref_halfwidth,
        gamma_scale,
    })
}

/// Embed a polynomial over the reference ring into the ambient (x, r) ring.
fn lift(p: &Polynomial, ambient: &[String], nx: usize) -> Result<Polynomial, PolyError> {
    let refs: Vec<&str> = ambient.iter().map(|s| s.as_str()).collect();
    for v in p.vars() {
        if !ambient[nx..].contains(v) {
            return Err(PolyError::UnknownVariable(v.clone()));
        }
    }
    Ok(Polynomial::from_terms(
        &refs,
        p.terms()
            .map(|(m, c)| {
                let mut e = vec![0u32; ambient.len()];
                e[nx..nx + m.0.len()].copy_from_slice(&m.0);
                (e, c)
            })
            .collect(),
    ))
}

/// Uniform sample from a region (per-axis for boxes, exponential-spacing
/// barycentric weights for simplices).
pub fn sample_region(region: &Region, rng: &mut ChaCha8Rng) -> Vec<f64> {
    match region {
        Region::Box { lower, upper } => lower
            .iter()
            .zip(upper)
            .map(|(&l, &u)| rng.gen_range(l..=u))
            .collect(),
        Region::Simplex { vertices } => {
            let k = vertices.len();
            let mut w: Vec<f64> = (0..k).map(|_| -rng.gen_range(1e-12..1.0f64).ln()).collect();
            let total: f64 = w.iter().sum();
            for wi in &mut w {
                *wi /= total;
            }
            let p = vertices[0].len();
            (0..p)
                .map(|d| vertices.iter().zip(&w).map(|(v, &wi)| v[d] * wi).sum())
                .collect()
        }
    }
}

// ---------------------------------------------------------------------------
// Solving with the fallback ladder
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct GammaConfig {
    pub degrees: Degrees,
    pub factor_k: u32,
    /// Empty means a single piece covering the whole domain.
    pub pieces: Vec<Region>,
    pub objective: ObjectiveKind,
    /// Piece-level parallelism; 0 means 1.
    pub workers: usize,
    pub solver: SolverSettings,
}

impl Default for GammaConfig {
    fn default() -> Self {
        GammaConfig {
            degrees: Degrees {
                gamma: 4,
                q: None,
                s: None,
            },
            factor_k: 0,
            pieces: Vec::new(),
            objective: ObjectiveKind::ExactMoments,
            workers: 1,
            solver: SolverSettings::default(),
        }
    }
}

/// Outcome of one piece solve, including the certificates actually used so
/// they can be re-verified and dumped.
#[derive(Debug, Clone)]
pub struct PieceReport {
    pub piece_index: usize,
    pub attempts: usize,
    pub failed: bool,
    pub status: SolveStatus,
    pub objective: f64,
    pub certificates: Vec<GramCertificate>,
    /// The instantiated SOS expressions the certificates must match.
    pub sos_expressions: Vec<Polynomial>,
}

#[derive(Debug, Clone)]
pub struct GammaResult {
    pub approx: GammaApprox,
    pub reports: Vec<PieceReport>,
}

/// Tolerances used when accepting a solver run's certificate.
pub const CERT_TOL_MATCH: f64 = 1e-6;
pub const CERT_TOL_PSD: f64 = 1e-7;

fn attempt_piece(
    sys: &ConstrainedSystem,
    refs: &AdmissibleRefs,
    i: usize,
    region: &Region,
    degrees: &Degrees,
    factor_k: u32,
    objective: &ObjectiveKind,
    settings: &SolverSettings,
) -> Result<Option<(Polynomial, SolveStatus, f64, Vec<GramCertificate>, Vec<Polynomial>)>, InvariantError>
{
    let built = build_gamma_program(sys, refs, i, region, degrees, factor_k, objective)?;
    let sol = sos::solve(&built.program, settings)?;
    if matches!(sol.status, SolveStatus::Infeasible | SolveStatus::Unbounded) {
        return Ok(None);
    }
    // The certificate check below is the real acceptance gate: a stalled
    // solve whose Gram matrices still reproduce the target expression and
    // stay PSD yields a sound (if slightly suboptimal) bound.
    let mut exprs = Vec::new();
    for (k, c) in built.program.sos_constraints.iter().enumerate() {
        let expr = c.instantiate(&sol.decision_values)?;
        let report = sos::check_certificate(&expr, &sol.certificates[k], CERT_TOL_MATCH, CERT_TOL_PSD)?;
        if !report.pass {
            return Ok(None);
        }
        exprs.push(expr);
    }
    let poly = built.into_ref_poly(&sys.ref_vars, &sol.decision_values)?;
    Ok(Some((poly, sol.status, sol.objective, sol.certificates, exprs)))
}

/// Solve one piece with the fallback ladder: (1) as configured, (2) toggled
/// equilibration, (3) gamma degree reduced by one, (4) sampled objective,
/// (5) the zero polynomial (always a sound lower bound).
fn solve_piece(
    sys: &ConstrainedSystem,
    refs: &AdmissibleRefs,
    i: usize,
    piece_index: usize,
    region: &Region,
    cfg: &GammaConfig,
) -> (Polynomial, PieceReport) {
    let mut toggled = cfg.solver.clone();
    toggled.scaling = !toggled.scaling;
    let reduced = Degrees {
        gamma: cfg.degrees.gamma.saturating_sub(1),
        ..cfg.degrees
    };
    let sampled = ObjectiveKind::Sampled {
        n_w: 200,
        seed: 0x5eed,
    };
    let ladder: [(&Degrees, &ObjectiveKind, &SolverSettings); 4] = [
        (&cfg.degrees, &cfg.objective, &cfg.solver),
        (&cfg.degrees, &cfg.objective, &toggled),
        (&reduced, &cfg.objective, &cfg.solver),
        (&cfg.degrees, &sampled, &cfg.solver),
    ];
    let mut attempts = 0;
    for (degrees, objective, settings) in ladder {
        attempts += 1;
        if let Ok(Some((poly, status, objective_value, certificates, sos_expressions))) =
            attempt_piece(sys, refs, i, region, degrees, cfg.factor_k, objective, settings)
        {
            return (
                poly,
                PieceReport {
                    piece_index,
                    attempts,
                    failed: false,
                    status,
                    objective: objective_value,
                    certificates,
                    sos_expressions,
                },
            );
        }
    }
    let ref_strs: Vec<&str> = sys.ref_vars.iter().map(|s| s.as_str()).collect();
    (
        Polynomial::zero(&ref_strs),
        PieceReport {
            piece_index,
            attempts,
            failed: true,
            status: SolveStatus::NumericalFailure,
            objective: 0.0,
            certificates: Vec::new(),
            sos_expressions: Vec::new(),
        },
    )
}

/// Compute the piecewise lower bound for constraint `i`. Pieces solve
/// independently across `cfg.workers` threads; the merged output is ordered
/// by piece index and therefore independent of scheduling. Pieces whose every
/// attempt fails are recorded as the zero polynomial.
pub fn compute_gamma(
    sys: &ConstrainedSystem,
    refs: &AdmissibleRefs,
    i: usize,
    cfg: &GammaConfig,
) -> Result<GammaResult, InvariantError> {
    if i >= sys.constraints.len() {
        return Err(InvariantError::BadConstraintIndex(i, sys.constraints.len()));
    }
    let regions: Vec<Region> = if cfg.pieces.is_empty() {
        vec![refs.domain.clone()]
    } else {
        cfg.pieces.clone()
    };
    let workers = cfg.workers.max(1).min(regions.len().max(1));
    let results: Mutex<Vec<Option<(Polynomial, PieceReport)>>> =
        Mutex::new(vec![None; regions.len()]);
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, Ordering::SeqCst);
                if idx >= regions.len() {
                    break;
                }
                let out = solve_piece(sys, refs, i, idx, &regions[idx], cfg);
                results.lock().unwrap()[idx] = Some(out);
            });
        }
    });
    let merged = results.into_inner().unwrap();
    let mut pieces = Vec::with_capacity(regions.len());
    let mut reports = Vec::with_capacity(regions.len());
    for (region, slot) in regions.iter().zip(merged) {
        let (poly, report) = slot.expect("piece result missing");
        pieces.push((region.clone(), poly));
        reports.push(report);
    }
    Ok(GammaResult {
        approx: GammaApprox {
            constraint_index: i,
            pieces,
            factor_k: cfg.factor_k,
            cbar: refs.cbar[i].clone(),
        },
        reports,
    })
}

/// Compute the full family (one GammaApprox per constraint).
pub fn compute_family(
    sys: &ConstrainedSystem,
    refs: &AdmissibleRefs,
    cfg: &GammaConfig,
) -> Result<(InvariantSetFamily, Vec<GammaResult>), InvariantError> {
    let mut per_constraint = Vec::new();
    let mut results = Vec::new();
    for i in 0..sys.constraints.len() {
        let res = compute_gamma(sys, refs, i, cfg)?;
        per_constraint.push(res.approx.clone());
        results.push(res);
    }
    Ok((InvariantSetFamily { per_constraint }, results))
}

// ---------------------------------------------------------------------------
// Problem-definition files and GammaApprox dumps
// ---------------------------------------------------------------------------

/// A parsed problem definition: the system, the reference domain, and default
/// computation settings (overridable from the command line).
#[derive(Debug, Clone)]
pub struct ProblemDef {
    pub system: ConstrainedSystem,
    pub refs: AdmissibleRefs,
    pub degree: u32,
    pub factor_k: u32,
    pub pieces: usize,
}

/// Key/value problem file with embedded polynomial strings:
///
/// ```text
/// state_vars x1 x2
/// ref_vars r
/// mode continuous
/// dynamics x2 | -100*x1 - 4*x2 + 100*r
/// V <polynomial in (x, r)>
/// constraint x2 - x1^3 + 3*x1^2 + 10
/// steady_state r | 0
/// domain -1.5 3.721
/// degree 4
/// factor_k 0
/// pieces 1
/// ```
pub fn parse_problem(input: &str) -> Result<ProblemDef, InvariantError> {
    let mut state_vars: Option<Vec<String>> = None;
    let mut ref_vars: Option<Vec<String>> = None;
    let mut mode: Option<Mode> = None;
    let mut dynamics: Option<Vec<String>> = None;
    let mut v_str: Option<String> = None;
    let mut constraints: Vec<String> = Vec::new();
    let mut steady: Option<Vec<String>> = None;
    let mut domain: Option<Vec<f64>> = None;
    let mut degree = 4u32;
    let mut factor_k = 0u32;
    let mut pieces = 1usize;
    for (lineno, raw) in input.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, rest) = line
            .split_once(char::is_whitespace)
            .ok_or_else(|| bad_line(lineno, "expected `key value`"))?;
        let rest = rest.trim();
        match key {
            "state_vars" => state_vars = Some(words(rest)),
            "ref_vars" => ref_vars = Some(words(rest)),
            "mode" => {
                mode = Some(match rest {
                    "continuous" => Mode::Continuous,
                    "discrete" => Mode::Discrete,
                    other => return Err(bad_line(lineno, &format!("unknown mode `{other}`"))),
                })
            }
            "dynamics" => dynamics = Some(split_bar(rest)),
            "V" => v_str = Some(rest.to_string()),
            "constraint" => constraints.push(rest.to_string()),
            "steady_state" => steady = Some(split_bar(rest)),
            "domain" => {
                let nums: Result<Vec<f64>, _> = rest.split_whitespace().map(|t| t.parse()).collect();
                domain = Some(nums.map_err(|_| bad_line(lineno, "bad number in domain"))?);
            }
            "degree" => {
                degree = rest
                    .parse()
                    .map_err(|_| bad_line(lineno, "bad degree"))?
            }
            "factor_k" => {
                factor_k = rest
                    .parse()
                    .map_err(|_| bad_line(lineno, "bad factor_k"))?
            }
            "pieces" => {
                pieces = rest
                    .parse()
                    .map_err(|_| bad_line(lineno, "bad pieces"))?
            }
            other => return Err(bad_line(lineno, &format!("unknown key `{other}`"))),
        }
    }
    let state_vars = state_vars.ok_or(InvariantError::MissingField("state_vars"))?;
    let ref_vars = ref_vars.ok_or(InvariantError::MissingField("ref_vars"))?;
    let mode = mode.ok_or(InvariantError::MissingField("mode"))?;
    let dynamics = dynamics.ok_or(InvariantError::MissingField("dynamics"))?;
    let v_str = v_str.ok_or(InvariantError::MissingField("V"))?;
    if constraints.is_empty() {
        return Err(InvariantError::MissingField("constraint"));
    }
    let steady = steady.ok_or(InvariantError::MissingField("steady_state"))?;
    let domain = domain.ok_or(InvariantError::MissingField("domain"))?;
    if domain.len() != 2 * ref_vars.len() {
        return Err(InvariantError::ProblemFile(format!(
            "domain needs {} numbers (lo hi per reference variable), got {}",
            2 * ref_vars.len(),
            domain.len()
        )));
    }

    let ambient: Vec<String> = state_vars.iter().chain(ref_vars.iter()).cloned().collect();
    let ambient_refs: Vec<&str> = ambient.iter().map(|s| s.as_str()).collect();
    let ref_strs: Vec<&str> = ref_vars.iter().map(|s| s.as_str()).collect();
    let parse_xr = |s: &str| parse_polynomial(s, &ambient_refs).map_err(InvariantError::from);
    let parse_r = |s: &str| parse_polynomial(s, &ref_strs).map_err(InvariantError::from);

    if dynamics.len() != state_vars.len() {
        return Err(InvariantError::ProblemFile(format!(
            "dynamics needs {} components, got {}",
            state_vars.len(),
            dynamics.len()
        )));
    }
    if steady.len() != state_vars.len() {
        return Err(InvariantError::ProblemFile(format!(
            "steady_state needs {} components, got {}",
            state_vars.len(),
            steady.len()
        )));
    }
    let f = dynamics.iter().map(|s| parse_xr(s)).collect::<Result<Vec<_>, _>>()?;
    let cons = constraints.iter().map(|s| parse_xr(s)).collect::<Result<Vec<_>, _>>()?;
    let ss = steady.iter().map(|s| parse_r(s)).collect::<Result<Vec<_>, _>>()?;
    let v = parse_xr(&v_str)?;
    let system = ConstrainedSystem::new(state_vars, ref_vars.clone(), mode, f, cons, ss, v)?;
    let p = ref_vars.len();
    let region = Region::Box {
        lower: (0..p).map(|k| domain[2 * k]).collect(),
        upper: (0..p).map(|k| domain[2 * k + 1]).collect(),
    };
    let refs = system.admissible_refs(region)?;
    Ok(ProblemDef {
        system,
        refs,
        degree,
        factor_k,
        pieces,
    })
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(|t| t.to_string()).collect()
}

fn split_bar(s: &str) -> Vec<String> {
    s.split('|').map(|t| t.trim().to_string()).collect()
}

fn bad_line(lineno: usize, msg: &str) -> InvariantError {
    InvariantError::ProblemFile(format!("line {}: {}", lineno + 1, msg))
}

/// Round-trippable text dump of a piecewise bound.
pub fn dump_gamma(approx: &GammaApprox) -> String {
    let mut s = String::new();
    s.push_str(&format!("constraint {}\n", approx.constraint_index));
    s.push_str(&format!("factor_k {}\n", approx.factor_k));
    s.push_str(&format!("ref_vars {}\n", approx.cbar.vars().join(" ")));
    s.push_str(&format!("cbar {}\n", approx.cbar));
    for (region, p) in &approx.pieces {
        match region {
            Region::Box { lower, upper } => {
                s.push_str("piece box ");
                s.push_str(&join_floats(lower));
                s.push_str(" | ");
                s.push_str(&join_floats(upper));
                s.push('\n');
            }
            Region::Simplex { vertices } => {
                s.push_str("piece simplex ");
                let parts: Vec<String> = vertices.iter().map(|v| join_floats(v)).collect();
                s.push_str(&parts.join(" | "));
                s.push('\n');
            }
        }
        s.push_str(&format!("poly {}\n", p));
    }
    s
}

/// One certificate block from a dump: which piece and SOS cone it belongs
/// to, the instantiated expression it must reproduce, and the Gram factor.
#[derive(Debug, Clone)]
pub struct CertEntry {
    pub piece_index: usize,
    pub cone_index: usize,
    pub expr: Polynomial,
    pub certificate: sos::GramCertificate,
}

/// Dump every certificate of a run in a re-verifiable text form.
pub fn dump_certificates(reports: &[PieceReport]) -> String {
    let mut s = String::new();
    for rep in reports {
        for (k, (cert, expr)) in rep
            .certificates
            .iter()
            .zip(&rep.sos_expressions)
            .enumerate()
        {
            s.push_str(&format!("cert {} {}\n", rep.piece_index, k));
            s.push_str(&format!("vars {}\n", expr.vars().join(" ")));
            s.push_str(&format!("expr {}\n", expr));
            let basis: Vec<String> = cert
                .basis
                .iter()
                .map(|m| {
                    m.0.iter()
                        .map(|e| e.to_string())
                        .collect::<Vec<_>>()
                        .join(" ")
                })
                .collect();
            s.push_str(&format!("basis {}\n", basis.join(" | ")));
            let entries: Vec<String> = cert.gram.iter().map(|v| format!("{:.17e}", v)).collect();
            s.push_str(&format!("gram {}\n", entries.join(" ")));
        }
    }
    s
}

pub fn parse_certificates(input: &str) -> Result<Vec<CertEntry>, InvariantError> {
    let mut out: Vec<CertEntry> = Vec::new();
    let mut piece = 0usize;
    let mut cone = 0usize;
    let mut vars: Vec<String> = Vec::new();
    let mut expr: Option<Polynomial> = None;
    let mut basis: Vec<Monomial> = Vec::new();
    for (lineno, raw) in input.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, rest) = line
            .split_once(char::is_whitespace)
            .ok_or_else(|| bad_line(lineno, "expected `key value`"))?;
        let rest = rest.trim();
        match key {
            "cert" => {
                let mut it = rest.split_whitespace();
                piece = it
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| bad_line(lineno, "bad piece index"))?;
                cone = it
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| bad_line(lineno, "bad cone index"))?;
            }
            "vars" => vars = words(rest),
            "expr" => {
                let vs: Vec<&str> = vars.iter().map(|s| s.as_str()).collect();
                expr = Some(parse_polynomial(rest, &vs)?);
            }
            "basis" => {
                basis = rest
                    .split('|')
                    .map(|g| {
                        g.split_whitespace()
                            .map(|t| {
                                t.parse::<u32>()
                                    .map_err(|_| bad_line(lineno, "bad exponent"))
                            })
                            .collect::<Result<Vec<u32>, _>>()
                            .map(Monomial::new)
                    })
                    .collect::<Result<Vec<_>, _>>()?;
            }
            "gram" => {
                let vals: Vec<f64> = rest
                    .split_whitespace()
                    .map(|t| {
                        t.parse::<f64>()
                            .map_err(|_| bad_line(lineno, "bad gram entry"))
                    })
                    .collect::<Result<_, _>>()?;
                let n = basis.len();
                if vals.len() != n * n {
                    return Err(bad_line(lineno, "gram size does not match basis"));
                }
                let expr = expr
                    .take()
                    .ok_or_else(|| bad_line(lineno, "gram before expr"))?;
                // DMatrix::iter is column-major; the dump wrote it the same
                // way, and the matrix is symmetric regardless.
                let gram = nalgebra::DMatrix::from_column_slice(n, n, &vals);
                out.push(CertEntry {
                    piece_index: piece,
                    cone_index: cone,
                    expr,
                    certificate: sos::GramCertificate {
                        basis: std::mem::take(&mut basis),
                        gram,
                    },
                });
            }
            other => return Err(bad_line(lineno, &format!("unknown key `{other}`"))),
        }
    }
    Ok(out)
}

fn join_floats(v: &[f64]) -> String {
    v.iter()
        .map(|x| format!("{:.17e}", x))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn parse_gamma(input: &str) -> Result<GammaApprox, InvariantError> {
    let mut constraint_index = 0usize;
    let mut factor_k = 0u32;
    let mut ref_vars: Vec<String> = Vec::new();
    let mut cbar: Option<Polynomial> = None;
    let mut pieces: Vec<(Region, Polynomial)> = Vec::new();
    let mut pending_region: Option<Region> = None;
    for (lineno, raw) in input.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, rest) = line
            .split_once(char::is_whitespace)
            .ok_or_else(|| bad_line(lineno, "expected `key value`"))?;
        let rest = rest.trim();
        let ref_strs: Vec<&str> = ref_vars.iter().map(|s| s.as_str()).collect();
        match key {
            "constraint" => {
                constraint_index = rest.parse().map_err(|_| bad_line(lineno, "bad index"))?
            }
            "factor_k" => factor_k = rest.parse().map_err(|_| bad_line(lineno, "bad factor_k"))?,
            "ref_vars" => ref_vars = words(rest),
            "cbar" => cbar = Some(parse_polynomial(rest, &ref_strs)?),
            "piece" => {
                let (kind, coords) = rest
                    .split_once(char::is_whitespace)
                    .ok_or_else(|| bad_line(lineno, "piece needs a kind"))?;
                let groups: Result<Vec<Vec<f64>>, InvariantError> = coords
                    .split('|')
                    .map(|g| {
                        g.split_whitespace()
                            .map(|t| {
                                t.parse::<f64>()
                                    .map_err(|_| bad_line(lineno, "bad number in piece"))
                            })
                            .collect()
                    })
                    .collect();
                let groups = groups?;
                pending_region = Some(match kind {
                    "box" => {
                        if groups.len() != 2 {
                            return Err(bad_line(lineno, "box needs `lower | upper`"));
                        }
                        Region::Box {
                            lower: groups[0].clone(),
                            upper: groups[1].clone(),
                        }
                    }
                    "simplex" => Region::Simplex { vertices: groups },
                    other => return Err(bad_line(lineno, &format!("unknown piece kind `{other}`"))),
                });
            }
            "poly" => {
                let region = pending_region
                    .take()
                    .ok_or_else(|| bad_line(lineno, "poly before piece"))?;
                pieces.push((region, parse_polynomial(rest, &ref_strs)?));
            }
            other => return Err(bad_line(lineno, &format!("unknown key `{other}`"))),
        }
    }
    let cbar = cbar.ok_or(InvariantError::MissingField("cbar"))?;
    Ok(GammaApprox {
        constraint_index,
        pieces,
        factor_k,
        cbar,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// Scalar test system with a known answer: xdot = -(x - r), V = (x-r)^2,
    /// constraint x <= 1 (c = 1 - x). The largest safe level is exactly
    /// gamma_star(r) = (1 - r)^2 and cbar(r) = 1 - r.
    fn scalar_system() -> (ConstrainedSystem, AdmissibleRefs) {
        let xr = &["x", "r"];
        let f = vec![parse_polynomial("r - x", xr).unwrap()];
        let c = vec![parse_polynomial("1 - x", xr).unwrap()];
        let ss = vec![parse_polynomial("r", &["r"]).unwrap()];
        let v = parse_polynomial("x^2 - 2*x*r + r^2", xr).unwrap();
        let sys = ConstrainedSystem::new(
            vec!["x".into()],
            vec!["r".into()],
            Mode::Continuous,
            f,
            c,
            ss,
            v,
        )
        .unwrap();
        let refs = sys
            .admissible_refs(Region::Box {
                lower: vec![-1.0],
                upper: vec![0.9],
            })
            .unwrap();
        (sys, refs)
    }

    #[test]
    fn system_identity_checks() {
        let (sys, refs) = scalar_system();
        assert_eq!(refs.cbar.len(), 1);
        // cbar = 1 - r
        assert_relative_eq!(refs.cbar[0].evaluate(&[0.25]).unwrap(), 0.75);
        assert!(refs.contains(&[0.5], 0.0).unwrap());
        assert!(!refs.contains(&[1.5], 0.0).unwrap());
        assert_relative_eq!(sys.v_at(&[0.7], &[0.2]).unwrap(), 0.25);
    }

    #[test]
    fn rejects_uncentered_lyapunov() {
        let xr = &["x", "r"];
        let v_bad = parse_polynomial("x^2 + 1", xr).unwrap();
        let err = ConstrainedSystem::new(
            vec!["x".into()],
            vec!["r".into()],
            Mode::Continuous,
            vec![parse_polynomial("r - x", xr).unwrap()],
            vec![parse_polynomial("1 - x", xr).unwrap()],
            vec![parse_polynomial("r", &["r"]).unwrap()],
            v_bad,
        );
        assert!(matches!(err, Err(InvariantError::LyapunovNotCentered(_))));
    }

    #[test]
    fn rejects_inconsistent_steady_state() {
        let xr = &["x", "r"];
        let err = ConstrainedSystem::new(
            vec!["x".into()],
            vec!["r".into()],
            Mode::Continuous,
            vec![parse_polynomial("r - x + 1", xr).unwrap()],
            vec![parse_polynomial("1 - x", xr).unwrap()],
            vec![parse_polynomial("r", &["r"]).unwrap()],
            parse_polynomial("x^2 - 2*x*r + r^2", xr).unwrap(),
        );
        assert!(matches!(
            err,
            Err(InvariantError::SteadyStateInconsistent(_))
        ));
    }

    #[test]
    fn scalar_gamma_recovers_exact_bound() {
        let (sys, refs) = scalar_system();
        let cfg = GammaConfig {
            degrees: Degrees {
                gamma: 2,
                q: None,
                s: None,
            },
            ..GammaConfig::default()
        };
        let res = compute_gamma(&sys, &refs, 0, &cfg).unwrap();
        assert!(!res.reports[0].failed, "{:?}", res.reports[0]);
        // gamma_hat should match (1 - r)^2 closely over the domain.
        for &r in &[-1.0, -0.3, 0.0, 0.5, 0.9] {
            let got = res.approx.evaluate(&[r]).unwrap();
            let truth = (1.0 - r) * (1.0 - r);
            assert!(
                got <= truth + 1e-4,
                "bound violated at r={}: {} > {}",
                r,
                got,
                truth
            );
            assert!(
                (truth - got).abs() < 5e-2,
                "loose at r={}: {} vs {}",
                r,
                got,
                truth
            );
        }
    }

    #[test]
    fn scalar_gamma_factored_form() {
        let (sys, refs) = scalar_system();
        let cfg = GammaConfig {
            degrees: Degrees {
                gamma: 1,
                q: None,
                s: None,
            },
            factor_k: 1,
            ..GammaConfig::default()
        };
        let res = compute_gamma(&sys, &refs, 0, &cfg).unwrap();
        assert!(!res.reports[0].failed);
        // cbar^1 * gamma_tilde with deg gamma_tilde = 1 can represent
        // (1-r)^2 exactly; evaluation at the cbar root is exactly zero.
        assert_eq!(res.approx.evaluate(&[1.0]).unwrap(), 0.0);
        for &r in &[-0.5, 0.0, 0.6] {
            let truth = (1.0 - r) * (1.0 - r);
            let got = res.approx.evaluate(&[r]).unwrap();
            assert!(got <= truth + 1e-4);
            assert!((truth - got).abs() < 5e-2, "r={}: {} vs {}", r, got, truth);
        }
    }

    #[test]
    fn piecewise_three_intervals() {
        let (sys, refs) = scalar_system();
        let pieces = tessellate(&refs.domain, 3).unwrap();
        assert_eq!(pieces.len(), 3);
        let cfg = GammaConfig {
            degrees: Degrees {
                gamma: 2,
                q: None,
                s: None,
            },
            pieces,
            workers: 3,
            ..GammaConfig::default()
        };
        let res = compute_gamma(&sys, &refs, 0, &cfg).unwrap();
        assert!(res.reports.iter().all(|r| !r.failed));
        for &r in &[-0.9, -0.2, 0.4, 0.85] {
            let truth = (1.0 - r) * (1.0 - r);
            let got = res.approx.evaluate(&[r]).unwrap();
            assert!(got <= truth + 1e-4);
            assert!((truth - got).abs() < 5e-2);
        }
        // outside every piece -> 0
        assert_eq!(res.approx.evaluate(&[5.0]).unwrap(), 0.0);
    }

    #[test]
    fn tessellate_intervals() {
        let dom = Region::Box {
            lower: vec![-1.5],
            upper: vec![3.721],
        };
        let pieces = tessellate(&dom, 9).unwrap();
        assert_eq!(pieces.len(), 9);
        let total: f64 = pieces.iter().map(|p| p.volume()).sum();
        assert_relative_eq!(total, 5.221, epsilon = 1e-12);
        // widths equal
        for p in &pieces {
            assert_relative_eq!(p.volume(), 5.221 / 9.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn tessellate_unit_square() {
        let dom = Region::Box {
            lower: vec![0.0, 0.0],
            upper: vec![1.0, 1.0],
        };
        // 2x2 grid of cells -> 8 triangles covering area 1
        let pieces = tessellate(&dom, 4).unwrap();
        assert_eq!(pieces.len(), 8);
        let total: f64 = pieces.iter().map(|p| p.volume()).sum();
        assert_relative_eq!(total, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn delaunay_empty_circumcircles() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let points: Vec<Vec<f64>> = (0..40)
            .map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .collect();
        let tris = delaunay_triangulation(&points);
        assert!(!tris.is_empty());
        // Delaunay property: no point strictly inside any circumcircle.
        for t in &tris {
            let (a, b, c) = (&points[t[0]], &points[t[1]], &points[t[2]]);
            let d = 2.0 * (a[0] * (b[1] - c[1]) + b[0] * (c[1] - a[1]) + c[0] * (a[1] - b[1]));
            let ux = ((a[0] * a[0] + a[1] * a[1]) * (b[1] - c[1])
                + (b[0] * b[0] + b[1] * b[1]) * (c[1] - a[1])
                + (c[0] * c[0] + c[1] * c[1]) * (a[1] - b[1]))
                / d;
            let uy = ((a[0] * a[0] + a[1] * a[1]) * (c[0] - b[0])
                + (b[0] * b[0] + b[1] * b[1]) * (a[0] - c[0])
                + (c[0] * c[0] + c[1] * c[1]) * (b[0] - a[0]))
                / d;
            let r2 = (a[0] - ux).powi(2) + (a[1] - uy).powi(2);
            for (pi, p) in points.iter().enumerate() {
                if t.contains(&pi) {
                    continue;
                }
                let d2 = (p[0] - ux).powi(2) + (p[1] - uy).powi(2);
                assert!(d2 >= r2 - 1e-9, "point {} inside circumcircle of {:?}", pi, t);
            }
        }
    }

    #[test]
    fn region_halfspaces_box_and_simplex() {
        let vars = vec!["r1".to_string(), "r2".to_string()];
        let hs = region_halfspaces(
            &Region::Box {
                lower: vec![0.0, -1.0],
                upper: vec![2.0, 1.0],
            },
            &vars,
        )
        .unwrap();
        assert_eq!(hs.len(), 4);
        for h in &hs {
            assert!(h.evaluate(&[1.0, 0.0]).unwrap() >= 0.0);
        }
        let simplex = Region::Simplex {
            vertices: vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]],
        };
        let hs = region_halfspaces(&simplex, &vars).unwrap();
        assert_eq!(hs.len(), 3);
        // inside: all nonnegative; outside: some negative
        assert!(hs.iter().all(|h| h.evaluate(&[0.2, 0.2]).unwrap() >= 0.0));
        assert!(hs.iter().any(|h| h.evaluate(&[0.8, 0.8]).unwrap() < 0.0));
        // barycentric coordinates sum to one
        let sum: f64 = hs.iter().map(|h| h.evaluate(&[0.3, 0.1]).unwrap()).sum();
        assert_relative_eq!(sum, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn problem_file_roundtrip_and_missing_field() {
        let text = "\
# scalar tracking problem
state_vars x
ref_vars r
mode continuous
dynamics r - x
V x^2 - 2*x*r + r^2
constraint 1 - x
steady_state r
domain -1 0.9
degree 2
";
        let def = parse_problem(text).unwrap();
        assert_eq!(def.degree, 2);
        assert_eq!(def.system.n_states(), 1);
        assert_relative_eq!(def.refs.cbar[0].evaluate(&[0.0]).unwrap(), 1.0);

        let missing = text.replace("V x^2 - 2*x*r + r^2\n", "");
        match parse_problem(&missing) {
            Err(InvariantError::MissingField(f)) => assert_eq!(f, "V"),
            other => panic!("expected missing V, got {:?}", other),
        }
    }

    #[test]
    fn gamma_dump_roundtrip() {
        let refsv: Vec<&str> = vec!["r"];
        let approx = GammaApprox {
            constraint_index: 0,
            pieces: vec![
                (
                    Region::Simplex {
                        vertices: vec![vec![-1.0], vec![0.25]],
                    },
                    parse_polynomial("1 - 2*r + r^2", &refsv).unwrap(),
                ),
                (
                    Region::Box {
                        lower: vec![0.25],
                        upper: vec![0.9],
                    },
                    parse_polynomial("0.5 - 0.125*r", &refsv).unwrap(),
                ),
            ],
            factor_k: 2,
            cbar: parse_polynomial("1 - r", &refsv).unwrap(),
        };
        let text = dump_gamma(&approx);
        let back = parse_gamma(&text).unwrap();
        assert_eq!(back.constraint_index, 0);
        assert_eq!(back.factor_k, 2);
        assert_eq!(back.pieces.len(), 2);
        for &r in &[-0.8, 0.0, 0.3, 0.85, 2.0] {
            assert_relative_eq!(
                back.evaluate(&[r]).unwrap(),
                approx.evaluate(&[r]).unwrap(),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn family_min_composition_and_membership() {
        let (sys, refs) = scalar_system();
        let refsv: Vec<&str> = vec!["r"];
        let g1 = GammaApprox {
            constraint_index: 0,
            pieces: vec![(refs.domain.clone(), parse_polynomial("4", &refsv).unwrap())],
            factor_k: 0,
            cbar: refs.cbar[0].clone(),
        };
        let g2 = GammaApprox {
            constraint_index: 0,
            pieces: vec![(
                refs.domain.clone(),
                parse_polynomial("1 - 2*r + r^2", &refsv).unwrap(),
            )],
            factor_k: 0,
            cbar: refs.cbar[0].clone(),
        };
        let fam = InvariantSetFamily {
            per_constraint: vec![g1, g2],
        };
        assert_relative_eq!(fam.evaluate(&[0.0]).unwrap(), 1.0);
        assert_relative_eq!(fam.evaluate(&[-1.0]).unwrap(), 4.0);
        // x = xbar -> member whenever the level is positive
        assert!(membership(&fam, &sys, &[0.0], &[0.0]).unwrap());
        // far state -> not a member
        assert!(!membership(&fam, &sys, &[0.0], &[3.0]).unwrap());
    }

    #[test]
    fn sampled_objective_close_to_exact() {
        let (sys, refs) = scalar_system();
        let exact = compute_gamma(&sys, &refs, 0, &GammaConfig::default()).unwrap();
        let sampled_cfg = GammaConfig {
            objective: ObjectiveKind::Sampled {
                n_w: 400,
                seed: 42,
            },
            ..GammaConfig::default()
        };
        let sampled = compute_gamma(&sys, &refs, 0, &sampled_cfg).unwrap();
        for &r in &[-0.5, 0.0, 0.5] {
            assert!(
                (exact.approx.evaluate(&[r]).unwrap() - sampled.approx.evaluate(&[r]).unwrap())
                    .abs()
                    < 0.1
            );
        }
    }

    #[test]
    fn certificate_dump_round_trips() {
        let (sys, refs) = scalar_system();
        let res = compute_gamma(&sys, &refs, 0, &GammaConfig::default()).unwrap();
        let dump = dump_certificates(&res.reports);
        let entries = parse_certificates(&dump).unwrap();
        let n: usize = res.reports.iter().map(|r| r.certificates.len()).sum();
        assert_eq!(entries.len(), n);
        for e in &entries {
            let rep = &res.reports[e.piece_index];
            assert_eq!(e.expr, rep.sos_expressions[e.cone_index]);
            let orig = &rep.certificates[e.cone_index];
            assert_eq!(e.certificate.basis, orig.basis);
            let diff = (&e.certificate.gram - &orig.gram).abs().max();
            assert!(diff < 1e-15, "gram drift {diff}");
            let check = crate::sos::check_certificate(
                &e.expr,
                &e.certificate,
                CERT_TOL_MATCH,
                CERT_TOL_PSD,
            )
            .unwrap();
            assert!(check.pass);
        }
    }
}
