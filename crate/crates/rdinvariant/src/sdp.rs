//! Small dense semidefinite programming solver in standard conic form.
//!
//! Problem: min c'x  s.t.  A x = b,  x in K, where K is a product of
//! vectorized PSD cones and free segments. Symmetric matrices are stored in
//! scaled svec form (off-diagonals times sqrt(2)) so the matrix inner product
//! equals the vector dot product.
//!
//! The reference backend is an infeasible-start primal-dual interior point
//! method with HKM search direction and Mehrotra predictor-corrector, adequate
//! for the desk-scale problems this toolkit produces (PSD blocks up to about
//! 100x100). Free variables are carried in the Newton saddle system directly.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

pub const SQRT2: f64 = std::f64::consts::SQRT_2;

#[derive(Debug, Error)]
pub enum SdpError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite entries in input")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cone {
    Psd(usize),
    Free(usize),
}

impl Cone {
    /// Length of this block in the stacked decision vector.
    pub fn vec_len(&self) -> usize {
        match *self {
            Cone::Psd(n) => n * (n + 1) / 2,
            Cone::Free(n) => n,
        }
    }
}

/// Sparse matrix in triplet form, rows indexed by equality constraints.
#[derive(Debug, Clone, Default)]
pub struct SparseMatrix {
    pub nrows: usize,
    pub ncols: usize,
    pub triplets: Vec<(usize, usize, f64)>,
}

impl SparseMatrix {
    pub fn new(nrows: usize, ncols: usize) -> Self {
        SparseMatrix {
            nrows,
            ncols,
            triplets: Vec::new(),
        }
    }

    pub fn push(&mut self, row: usize, col: usize, val: f64) {
        if val != 0.0 {
            self.triplets.push((row, col, val));
        }
    }

    /// Triplets grouped by row, duplicates summed.
    pub fn rows(&self) -> Vec<Vec<(usize, f64)>> {
        let mut rows: Vec<std::collections::BTreeMap<usize, f64>> =
            vec![Default::default(); self.nrows];
        for &(r, c, v) in &self.triplets {
            *rows[r].entry(c).or_insert(0.0) += v;
        }
        rows.into_iter()
            .map(|m| m.into_iter().filter(|&(_, v)| v != 0.0).collect())
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct SdpProblem {
    pub objective: Vec<f64>,
    pub equality_lhs: SparseMatrix,
    pub equality_rhs: Vec<f64>,
    pub cones: Vec<Cone>,
}

impl SdpProblem {
    pub fn total_dim(&self) -> usize {
        self.cones.iter().map(|c| c.vec_len()).sum()
    }

    pub fn validate(&self) -> Result<(), SdpError> {
        let n = self.total_dim();
        if self.objective.len() != n {
            return Err(SdpError::Shape(format!(
                "objective length {} != stacked dimension {}",
                self.objective.len(),
                n
            )));
        }
        if self.equality_lhs.ncols != n {
            return Err(SdpError::Shape(format!(
                "A has {} columns, stacked dimension is {}",
                self.equality_lhs.ncols, n
            )));
        }
        if self.equality_lhs.nrows != self.equality_rhs.len() {
            return Err(SdpError::Shape("A row count != b length".into()));
        }
        for c in &self.cones {
            if c.vec_len() == 0 {
                return Err(SdpError::Shape("zero-size cone block".into()));
            }
        }
        let finite = self.objective.iter().all(|v| v.is_finite())
            && self.equality_rhs.iter().all(|v| v.is_finite())
            && self.equality_lhs.triplets.iter().all(|t| t.2.is_finite());
        if !finite {
            return Err(SdpError::NonFinite);
        }
        Ok(())
    }

    /// Sparse text dump (triplet A, dense b and c, cone list) for
    /// cross-checking against external solvers.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        s.push_str("# rdinvariant sdp dump\n");
        s.push_str(&format!(
            "dims {} {}\n",
            self.equality_lhs.nrows, self.equality_lhs.ncols
        ));
        s.push_str("cones");
        for c in &self.cones {
            match c {
                Cone::Psd(n) => s.push_str(&format!(" psd:{}", n)),
                Cone::Free(n) => s.push_str(&format!(" free:{}", n)),
            }
        }
        s.push('\n');
        for v in &self.objective {
            s.push_str(&format!("c {:.17e}\n", v));
        }
        for v in &self.equality_rhs {
            s.push_str(&format!("b {:.17e}\n", v));
        }
        for &(r, c, v) in &self.equality_lhs.triplets {
            s.push_str(&format!("A {} {} {:.17e}\n", r, c, v));
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
    MaxIters,
    NumericalFailure,
}

#[derive(Debug, Clone, Copy)]
pub struct Residuals {
    pub primal: f64,
    pub dual: f64,
    pub gap: f64,
}

#[derive(Debug, Clone)]
pub struct SdpSolution {
    pub status: SolveStatus,
    /// Stacked primal vector (svec blocks + free segments).
    pub primal: Vec<f64>,
    /// Equality multipliers.
    pub dual: Vec<f64>,
    pub objective_value: f64,
    pub residuals: Residuals,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct SolverSettings {
    pub tol_primal: f64,
    pub tol_dual: f64,
    pub tol_gap: f64,
    pub max_iters: usize,
    pub scaling: bool,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            tol_primal: 1e-8,
            tol_dual: 1e-8,
            tol_gap: 1e-7,
            max_iters: 500,
            scaling: true,
        }
    }
}

/// Backend interface so an external solver can be swapped in.
pub trait SdpBackend {
    fn solve(&self, problem: &SdpProblem, settings: &SolverSettings) -> SdpSolution;
}

/// Solve with the in-repo interior point backend.
pub fn solve(problem: &SdpProblem, settings: &SolverSettings) -> SdpSolution {
    InteriorPoint.solve(problem, settings)
}

// ---------------------------------------------------------------------------
// svec / smat
// ---------------------------------------------------------------------------

/// Scaled symmetric vectorization: upper triangle column-wise, off-diagonals
/// multiplied by sqrt(2).
pub fn svec(m: &DMatrix<f64>) -> Vec<f64> {
    let n = m.nrows();
    let mut out = Vec::with_capacity(n * (n + 1) / 2);
    for j in 0..n {
        for i in 0..=j {
            if i == j {
                out.push(m[(i, j)]);
            } else {
                out.push(SQRT2 * 0.5 * (m[(i, j)] + m[(j, i)]));
            }
        }
    }
    out
}

pub fn smat(v: &[f64], n: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    let mut k = 0;
    for j in 0..n {
        for i in 0..=j {
            if i == j {
                m[(i, j)] = v[k];
            } else {
                m[(i, j)] = v[k] / SQRT2;
                m[(j, i)] = v[k] / SQRT2;
            }
            k += 1;
        }
    }
    m
}

/// Index into the svec of an n x n block for entry (i, j), i <= j.
pub fn svec_index(i: usize, j: usize) -> usize {
    debug_assert!(i <= j);
    j * (j + 1) / 2 + i
}

/// Smallest eigenvalue of a (symmetrized) square matrix.
pub fn min_eigenvalue(block: &DMatrix<f64>) -> Result<f64, SdpError> {
    if block.nrows() != block.ncols() {
        return Err(SdpError::Shape("matrix not square".into()));
    }
    if block.iter().any(|v| !v.is_finite()) {
        return Err(SdpError::NonFinite);
    }
    let sym = (block + block.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    Ok(eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min))
}

// ---------------------------------------------------------------------------
// Interior point backend
// ---------------------------------------------------------------------------

pub struct InteriorPoint;

struct BlockLayout {
    /// (offset into stacked vector, cone)
    blocks: Vec<(usize, Cone)>,
}

impl BlockLayout {
    fn new(cones: &[Cone]) -> Self {
        let mut blocks = Vec::new();
        let mut off = 0;
        for &c in cones {
            blocks.push((off, c));
            off += c.vec_len();
        }
        BlockLayout { blocks }
    }
}

impl SdpBackend for InteriorPoint {
    fn solve(&self, problem: &SdpProblem, settings: &SolverSettings) -> SdpSolution {
        if let Err(e) = problem.validate() {
            return failure_solution(problem, format!("{}", e));
        }
        // Free variables appear linearly, so they are pinned down by a subset
        // of the equality rows and can be eliminated up front. The reduced
        // pure-PSD problem is much better conditioned than the saddle system
        // the inner loop would otherwise have to factor.
        if problem.cones.iter().any(|c| matches!(c, Cone::Free(_))) {
            match eliminate_free(problem) {
                ElimOutcome::Reduced(reduced, elim) => {
                    let rsol = solve_direct(&reduced, settings);
                    return elim.expand(problem, settings, rsol);
                }
                ElimOutcome::Infeasible => {
                    let mut sol = failure_solution(problem, String::new());
                    sol.status = SolveStatus::Infeasible;
                    return sol;
                }
                ElimOutcome::Abort => {}
            }
        }
        solve_direct(problem, settings)
    }
}

fn solve_direct(problem: &SdpProblem, settings: &SolverSettings) -> SdpSolution {
    {
        let mut scaled = Scaled::identity(problem);
        if settings.scaling {
            scaled.ruiz(problem, 10);
        }
        let sp = scaled.apply(problem);
        let mut sol = ipm_core(&sp, settings);
        scaled.unapply(&mut sol);
        // Residuals reported against the original, unscaled data.
        let (rp0, _, _) = kkt_residuals(problem, &sol.primal, &sol.dual);
        if rp0 > settings.tol_primal && rp0 <= 1e-4 {
            polish_primal(problem, &mut sol.primal, 20000);
        }
        let (rp, rd, gap) = kkt_residuals(problem, &sol.primal, &sol.dual);
        sol.residuals = Residuals {
            primal: rp,
            dual: rd,
            gap,
        };
        sol.objective_value = dot(&problem.objective, &sol.primal);
        // Final acceptance is judged on the original data: a stalled inner
        // loop whose best iterate still meets the tolerances is optimal, and
        // conversely an accepted scaled iterate that violates them is not.
        if rp <= settings.tol_primal && rd <= settings.tol_dual && gap <= settings.tol_gap {
            sol.status = SolveStatus::Optimal;
        } else if sol.status == SolveStatus::Optimal
            && (rp > settings.tol_primal.max(1e-7) * 10.0
                || rd > settings.tol_dual.max(1e-7) * 10.0)
        {
            sol.status = SolveStatus::NumericalFailure;
        }
        sol
    }
}

enum ElimOutcome {
    Reduced(SdpProblem, FreeElim),
    Infeasible,
    Abort,
}

/// Bookkeeping needed to map a solution of the reduced problem back to the
/// original one.
struct FreeElim {
    psd_cols: Vec<usize>,
    free_cols: Vec<usize>,
    /// (original row index, index into `free_cols`) per pivot, in elimination
    /// order; the transformed pivot row expresses that free variable.
    pivots: Vec<(usize, usize)>,
    kept_rows: Vec<usize>,
    /// Transformed pivot rows restricted to the PSD columns, plus rhs.
    apiv: DMatrix<f64>,
    bpiv: DVector<f64>,
    /// Accumulated row operations: final row i = t.row(i) * original rows.
    t: DMatrix<f64>,
}

fn eliminate_free(p: &SdpProblem) -> ElimOutcome {
    let m = p.equality_rhs.len();
    let mut psd_cols = Vec::new();
    let mut free_cols = Vec::new();
    let mut off = 0;
    let mut cones = Vec::new();
    for &c in &p.cones {
        match c {
            Cone::Free(n) => free_cols.extend(off..off + n),
            Cone::Psd(_) => {
                cones.push(c);
                psd_cols.extend(off..off + c.vec_len());
            }
        }
        off += c.vec_len();
    }
    let nf = free_cols.len();
    let np = psd_cols.len();
    if nf == 0 || nf >= m || cones.is_empty() {
        return ElimOutcome::Abort;
    }
    let col_kind: Vec<(bool, usize)> = {
        // (is_free, local index) per global column
        let mut v = vec![(false, 0usize); off];
        for (k, &c) in free_cols.iter().enumerate() {
            v[c] = (true, k);
        }
        for (k, &c) in psd_cols.iter().enumerate() {
            v[c] = (false, k);
        }
        v
    };
    let mut af = DMatrix::<f64>::zeros(m, nf);
    let mut ap = DMatrix::<f64>::zeros(m, np);
    for &(r, c, v) in &p.equality_lhs.triplets {
        let (is_free, k) = col_kind[c];
        if is_free {
            af[(r, k)] += v;
        } else {
            ap[(r, k)] += v;
        }
    }
    let mut b = DVector::from_column_slice(&p.equality_rhs);
    let mut t = DMatrix::<f64>::identity(m, m);

    let fmax = af.amax();
    let tol = 1e-12 * (1.0 + fmax);
    let mut row_alive = vec![true; m];
    let mut col_alive = vec![true; nf];
    let mut pivots = Vec::with_capacity(nf);
    for _ in 0..nf {
        let mut best = (0usize, 0usize, 0.0f64);
        for i in 0..m {
            if !row_alive[i] {
                continue;
            }
            for k in 0..nf {
                if col_alive[k] && af[(i, k)].abs() > best.2 {
                    best = (i, k, af[(i, k)].abs());
                }
            }
        }
        if best.2 <= tol {
            // Rank-deficient free block: leave it to the saddle path.
            return ElimOutcome::Abort;
        }
        let (pi, pk, _) = best;
        row_alive[pi] = false;
        col_alive[pk] = false;
        pivots.push((pi, pk));
        let inv = 1.0 / af[(pi, pk)];
        for k in 0..nf {
            af[(pi, k)] *= inv;
        }
        for k in 0..np {
            ap[(pi, k)] *= inv;
        }
        b[pi] *= inv;
        for k in 0..m {
            t[(pi, k)] *= inv;
        }
        for j in 0..m {
            if j == pi {
                continue;
            }
            let f = af[(j, pk)];
            if f == 0.0 {
                continue;
            }
            for k in 0..nf {
                af[(j, k)] -= f * af[(pi, k)];
            }
            for k in 0..np {
                ap[(j, k)] -= f * ap[(pi, k)];
            }
            b[j] -= f * b[pi];
            for k in 0..m {
                t[(j, k)] -= f * t[(pi, k)];
            }
        }
    }

    let ap_max = ap.amax();
    let row_tol = 1e-11 * (1.0 + ap_max);
    let b_tol = 1e-8 * (1.0 + b.amax());
    let mut kept_rows = Vec::new();
    let mut lhs = SparseMatrix::new(0, np);
    let mut rhs = Vec::new();
    for i in 0..m {
        if !row_alive[i] {
            continue;
        }
        let rmax = (0..np).map(|k| ap[(i, k)].abs()).fold(0.0f64, f64::max);
        if rmax <= row_tol {
            if b[i].abs() > b_tol {
                return ElimOutcome::Infeasible;
            }
            continue;
        }
        let r = kept_rows.len();
        for k in 0..np {
            lhs.push(r, k, ap[(i, k)]);
        }
        rhs.push(b[i]);
        kept_rows.push(i);
    }
    if kept_rows.is_empty() {
        return ElimOutcome::Abort;
    }
    lhs.nrows = kept_rows.len();
    if std::env::var_os("RDI_SDP_VERBOSE").is_some() {
        let bmax = rhs.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        let amax = lhs.triplets.iter().fold(0.0f64, |a, t| a.max(t.2.abs()));
        let amin_row: f64 = (0..lhs.nrows)
            .map(|r| {
                lhs.triplets
                    .iter()
                    .filter(|t| t.0 == r)
                    .fold(0.0f64, |a, t| a.max(t.2.abs()))
            })
            .fold(f64::INFINITY, f64::min);
        eprintln!(
            "elim: m {} -> {} (nf={}), |A'|max={:.2e} row-max min={:.2e} |b'|max={:.2e} |T|max={:.2e}",
            m,
            lhs.nrows,
            nf,
            amax,
            amin_row,
            bmax,
            t.amax()
        );
    }

    // Substitute the pivot expressions into the objective.
    let mut objective: Vec<f64> = psd_cols.iter().map(|&c| p.objective[c]).collect();
    for &(pi, pk) in &pivots {
        let w = p.objective[free_cols[pk]];
        if w != 0.0 {
            for k in 0..np {
                objective[k] -= w * ap[(pi, k)];
            }
        }
    }

    let apiv = DMatrix::from_fn(nf, np, |r, c| ap[(pivots[r].0, c)]);
    let bpiv = DVector::from_fn(nf, |r, _| b[pivots[r].0]);
    ElimOutcome::Reduced(
        SdpProblem {
            objective,
            equality_lhs: lhs,
            equality_rhs: rhs,
            cones,
        },
        FreeElim {
            psd_cols,
            free_cols,
            pivots,
            kept_rows,
            apiv,
            bpiv,
            t,
        },
    )
}

impl FreeElim {
    fn expand(
        &self,
        problem: &SdpProblem,
        settings: &SolverSettings,
        rsol: SdpSolution,
    ) -> SdpSolution {
        let m = problem.equality_rhs.len();
        let mut x = vec![0.0; problem.total_dim()];
        for (k, &c) in self.psd_cols.iter().enumerate() {
            x[c] = rsol.primal[k];
        }
        // Recover the free values by least squares over all original rows
        // rather than back-substituting the transformed pivot rows, whose
        // elimination multipliers would amplify the solver's residual.
        let nf = self.free_cols.len();
        let col_local: std::collections::HashMap<usize, usize> = self
            .free_cols
            .iter()
            .enumerate()
            .map(|(k, &c)| (c, k))
            .collect();
        let mut af = DMatrix::<f64>::zeros(m, nf);
        let mut rhs = DVector::from_column_slice(&problem.equality_rhs);
        for &(r, c, v) in &problem.equality_lhs.triplets {
            if let Some(&k) = col_local.get(&c) {
                af[(r, k)] += v;
            } else {
                rhs[r] -= v * x[c];
            }
        }
        let solved = {
            let qr = af.clone().qr();
            let qt_rhs = qr.q().transpose() * &rhs;
            let r_mat = qr.r();
            r_mat.solve_upper_triangular(&qt_rhs)
        };
        match solved {
            Some(f) => {
                for (k, &c) in self.free_cols.iter().enumerate() {
                    x[c] = f[k];
                }
            }
            None => {
                for (r, &(_, pk)) in self.pivots.iter().enumerate() {
                    let mut f = self.bpiv[r];
                    for k in 0..self.psd_cols.len() {
                        f -= self.apiv[(r, k)] * rsol.primal[k];
                    }
                    x[self.free_cols[pk]] = f;
                }
            }
        }
        // ytilde carries the reduced duals on kept rows and the objective
        // weights on pivot rows; t' maps it back to the original rows.
        let mut ytilde = DVector::<f64>::zeros(m);
        for (r, &row) in self.kept_rows.iter().enumerate() {
            ytilde[row] = rsol.dual[r];
        }
        for &(pi, pk) in &self.pivots {
            ytilde[pi] = problem.objective[self.free_cols[pk]];
        }
        let y = self.t.transpose() * ytilde;
        let y: Vec<f64> = y.iter().cloned().collect();

        let (rp0, _, _) = kkt_residuals(problem, &x, &y);
        if rp0 > settings.tol_primal && rp0 <= 1e-4 {
            polish_primal(problem, &mut x, 20000);
        }
        let (rp, rd, gap) = kkt_residuals(problem, &x, &y);
        let mut status = rsol.status;
        if rp <= settings.tol_primal && rd <= settings.tol_dual && gap <= settings.tol_gap {
            status = SolveStatus::Optimal;
        } else if status == SolveStatus::Optimal
            && (rp > settings.tol_primal.max(1e-7) * 10.0
                || rd > settings.tol_dual.max(1e-7) * 10.0)
        {
            status = SolveStatus::NumericalFailure;
        }
        SdpSolution {
            status,
            objective_value: dot(&problem.objective, &x),
            primal: x,
            dual: y,
            residuals: Residuals {
                primal: rp,
                dual: rd,
                gap,
            },
            iterations: rsol.iterations,
        }
    }
}

/// Alternating-projection polish of a near-feasible primal point between the
/// equality constraints and the PSD cone. Ends on the affine projection, so
/// the equality residual is driven to roundoff while the cone violation stays
/// bounded by the size of the final correction. Returns the largest
/// eigenvalue clipped in the last cone projection.
pub fn polish_primal(p: &SdpProblem, x: &mut [f64], max_rounds: usize) -> f64 {
    let m = p.equality_rhs.len();
    let n = p.total_dim();
    if m == 0 || m > 4000 || n > 40000 {
        return 0.0;
    }
    let mut a = DMatrix::<f64>::zeros(m, n);
    for &(r, c, v) in &p.equality_lhs.triplets {
        a[(r, c)] += v;
    }
    let mut aat = &a * a.transpose();
    let reg = 1e-13 * (1.0 + aat.diagonal().amax());
    for i in 0..m {
        aat[(i, i)] += reg;
    }
    let lu = aat.lu();
    let b = DVector::from_column_slice(&p.equality_rhs);
    let layout = BlockLayout::new(&p.cones);
    let project_affine = |z: &DVector<f64>| -> DVector<f64> {
        let resid = &a * z - &b;
        match lu.solve(&resid) {
            Some(w) => z - a.transpose() * &w,
            None => z.clone(),
        }
    };
    // Clip slightly above zero: the closing affine projection moves each
    // block by about the clip size, so a small lift keeps it PSD.
    let lift = 1e-9;
    let project_cone = |z: &DVector<f64>| -> (DVector<f64>, f64) {
        let mut out = z.clone();
        let mut clip = 0.0f64;
        for &(off, cone) in &layout.blocks {
            if let Cone::Psd(nb) = cone {
                let len = cone.vec_len();
                let mat = smat(&out.as_slice()[off..off + len], nb);
                let eig = mat.symmetric_eigen();
                let mut vals = eig.eigenvalues.clone();
                let mut clipped = false;
                for v in vals.iter_mut() {
                    if *v < lift {
                        clip = clip.max(lift - *v);
                        *v = lift;
                        clipped = true;
                    }
                }
                if clipped {
                    let rebuilt = &eig.eigenvectors
                        * DMatrix::from_diagonal(&vals)
                        * eig.eigenvectors.transpose();
                    let sv = svec(&rebuilt);
                    out.as_mut_slice()[off..off + len].copy_from_slice(&sv);
                }
            }
        }
        (out, clip)
    };
    // Douglas-Rachford iteration; the shadow sequence P_A(z) tends to a point
    // of the intersection, much faster than plain alternating projections
    // when the two sets meet tangentially.
    let mut z = DVector::from_column_slice(x);
    let mut last_clip = 0.0f64;
    // Keep the cone-feasible iterate with the smallest fixed-point step; the
    // remaining equality error is of that order and is left to the free
    // variables below, so the PSD blocks are returned untouched.
    let mut best: Option<(DVector<f64>, f64)> = None;
    let deadline = std::time::Instant::now() + std::time::Duration::from_secs(5);
    for round in 0..max_rounds {
        if round % 64 == 0 && std::time::Instant::now() > deadline {
            break;
        }
        let pa = project_affine(&z);
        let (pk, clip) = project_cone(&(&pa * 2.0 - &z));
        last_clip = clip;
        let delta = &pk - &pa;
        let step = delta.amax();
        if best.as_ref().map_or(true, |(_, s)| step < *s) {
            best = Some((pk, step));
        }
        z += delta;
        if step <= 1e-9 {
            break;
        }
    }
    let mut out = match best {
        Some((pk, _)) => pk,
        None => project_affine(&z),
    };
    let free_cols: Vec<usize> = layout
        .blocks
        .iter()
        .filter_map(|&(off, c)| match c {
            Cone::Free(n) => Some(off..off + n),
            Cone::Psd(_) => None,
        })
        .flatten()
        .collect();
    if !free_cols.is_empty() {
        let af = DMatrix::from_fn(m, free_cols.len(), |r, k| a[(r, free_cols[k])]);
        let r0 = &b - &a * &out;
        let qr = af.qr();
        let qt = qr.q().transpose() * &r0;
        if let Some(df) = qr.r().solve_upper_triangular(&qt) {
            for (k, &c) in free_cols.iter().enumerate() {
                out[c] += df[k];
            }
        }
    }
    x.copy_from_slice(out.as_slice());
    last_clip
}

fn failure_solution(problem: &SdpProblem, _msg: String) -> SdpSolution {
    SdpSolution {
        status: SolveStatus::NumericalFailure,
        primal: vec![0.0; problem.total_dim()],
        dual: vec![0.0; problem.equality_rhs.len()],
        objective_value: f64::NAN,
        residuals: Residuals {
            primal: f64::NAN,
            dual: f64::NAN,
            gap: f64::NAN,
        },
        iterations: 0,
    }
}

/// Relative KKT residuals (primal, dual, gap) for a candidate primal/dual
/// pair. Used both inside the solver and for independent verification.
pub fn kkt_residuals(problem: &SdpProblem, x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let layout = BlockLayout::new(&problem.cones);
    let rows = problem.equality_lhs.rows();
    let m = problem.equality_rhs.len();
    // primal: ||Ax - b||_inf / (1 + ||b||_inf)
    let mut rp: f64 = 0.0;
    for i in 0..m {
        let ax: f64 = rows[i].iter().map(|&(c, v)| v * x[c]).sum();
        rp = rp.max((ax - problem.equality_rhs[i]).abs());
    }
    let bnorm = problem.equality_rhs.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    let rp = rp / (1.0 + bnorm);
    // dual slack z = c - A'y; cone blocks must be PSD, free blocks zero.
    let mut z = problem.objective.to_vec();
    for i in 0..m {
        for &(c, v) in &rows[i] {
            z[c] -= v * y[i];
        }
    }
    let cnorm = problem.objective.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    let mut rd: f64 = 0.0;
    for &(off, cone) in &layout.blocks {
        match cone {
            Cone::Free(len) => {
                for k in 0..len {
                    rd = rd.max(z[off + k].abs());
                }
            }
            Cone::Psd(n) => {
                let zm = smat(&z[off..off + cone.vec_len()], n);
                let lam = min_eigenvalue(&zm).unwrap_or(f64::NEG_INFINITY);
                rd = rd.max((-lam).max(0.0));
            }
        }
    }
    let rd = rd / (1.0 + cnorm);
    let pobj = dot(&problem.objective, x);
    let dobj = dot(&problem.equality_rhs, y);
    let gap = (pobj - dobj).abs() / (1.0 + pobj.abs() + dobj.abs());
    (rp, rd, gap)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// Ruiz-style equilibration. Column scales are uniform within each PSD block so
// the cone is preserved.
struct Scaled {
    row: Vec<f64>,
    col: Vec<f64>,
    obj: f64,
}

impl Scaled {
    fn identity(p: &SdpProblem) -> Self {
        Scaled {
            row: vec![1.0; p.equality_rhs.len()],
            col: vec![1.0; p.total_dim()],
            obj: 1.0,
        }
    }

    fn ruiz(&mut self, p: &SdpProblem, iters: usize) {
        let layout = BlockLayout::new(&p.cones);
        let m = p.equality_rhs.len();
        let n = p.total_dim();
        for _ in 0..iters {
            let mut rmax = vec![0.0f64; m];
            let mut cmax = vec![0.0f64; n];
            for &(r, c, v) in &p.equality_lhs.triplets {
                let s = (v * self.row[r] * self.col[c]).abs();
                rmax[r] = rmax[r].max(s);
                cmax[c] = cmax[c].max(s);
            }
            // Block-uniform column norms for PSD blocks.
            let mut bmax = cmax.clone();
            for &(off, cone) in &layout.blocks {
                if let Cone::Psd(_) = cone {
                    let len = cone.vec_len();
                    let mx = cmax[off..off + len].iter().cloned().fold(0.0f64, f64::max);
                    for v in bmax[off..off + len].iter_mut() {
                        *v = mx;
                    }
                }
            }
            let mut done = true;
            for i in 0..m {
                if rmax[i] > 0.0 {
                    let s = 1.0 / rmax[i].sqrt();
                    if (s - 1.0).abs() > 1e-3 {
                        done = false;
                    }
                    self.row[i] *= s;
                }
            }
            for j in 0..n {
                if bmax[j] > 0.0 {
                    let s = 1.0 / bmax[j].sqrt();
                    if (s - 1.0).abs() > 1e-3 {
                        done = false;
                    }
                    self.col[j] *= s;
                }
            }
            if done {
                break;
            }
        }
        let cmax = p
            .objective
            .iter()
            .zip(&self.col)
            .map(|(&c, &d)| (c * d).abs())
            .fold(0.0f64, f64::max);
        if cmax > 0.0 {
            self.obj = 1.0 / cmax;
        }
    }

    fn apply(&self, p: &SdpProblem) -> SdpProblem {
        let mut a = SparseMatrix::new(p.equality_lhs.nrows, p.equality_lhs.ncols);
        for &(r, c, v) in &p.equality_lhs.triplets {
            a.push(r, c, v * self.row[r] * self.col[c]);
        }
        SdpProblem {
            objective: p
                .objective
                .iter()
                .zip(&self.col)
                .map(|(&c, &d)| c * d * self.obj)
                .collect(),
            equality_lhs: a,
            equality_rhs: p
                .equality_rhs
                .iter()
                .zip(&self.row)
                .map(|(&b, &d)| b * d)
                .collect(),
            cones: p.cones.clone(),
        }
    }

    fn unapply(&self, sol: &mut SdpSolution) {
        for (x, d) in sol.primal.iter_mut().zip(&self.col) {
            *x *= d;
        }
        for (y, d) in sol.dual.iter_mut().zip(&self.row) {
            *y *= d / self.obj;
        }
    }
}

struct IpmState {
    /// Per PSD block: X and S matrices, kept positive definite.
    xs: Vec<DMatrix<f64>>,
    ss: Vec<DMatrix<f64>>,
    xf: DVector<f64>,
    y: DVector<f64>,
}

fn ipm_core(p: &SdpProblem, settings: &SolverSettings) -> SdpSolution {
    let layout = BlockLayout::new(&p.cones);
    let m = p.equality_rhs.len();
    let rows = p.equality_lhs.rows();

    let psd_blocks: Vec<(usize, usize)> = layout
        .blocks
        .iter()
        .filter_map(|&(off, c)| match c {
            Cone::Psd(n) => Some((off, n)),
            Cone::Free(_) => None,
        })
        .collect();
    let free_cols: Vec<usize> = layout
        .blocks
        .iter()
        .flat_map(|&(off, c)| match c {
            Cone::Free(len) => (off..off + len).collect::<Vec<_>>(),
            Cone::Psd(_) => vec![],
        })
        .collect();
    let nf = free_cols.len();
    let free_index: std::collections::HashMap<usize, usize> = free_cols
        .iter()
        .enumerate()
        .map(|(k, &c)| (c, k))
        .collect();
    let total_psd_dim: usize = psd_blocks.iter().map(|&(_, n)| n).sum();

    // Per-row constraint data split into PSD-block matrices and free parts.
    // row_mats[i][k] is A_i restricted to block k as a dense symmetric matrix.
    let mut row_mats: Vec<Vec<DMatrix<f64>>> = Vec::with_capacity(m);
    let mut row_free: Vec<Vec<(usize, f64)>> = Vec::with_capacity(m);
    for row in &rows {
        let mut mats: Vec<DMatrix<f64>> = psd_blocks
            .iter()
            .map(|&(_, n)| DMatrix::zeros(n, n))
            .collect();
        let mut fr = Vec::new();
        for &(c, v) in row {
            let mut placed = false;
            for (k, &(off, n)) in psd_blocks.iter().enumerate() {
                let len = n * (n + 1) / 2;
                if c >= off && c < off + len {
                    let local = c - off;
                    // invert svec index
                    let (i, j) = inv_svec_index(local);
                    if i == j {
                        mats[k][(i, j)] += v;
                    } else {
                        mats[k][(i, j)] += v / SQRT2;
                        mats[k][(j, i)] += v / SQRT2;
                    }
                    placed = true;
                    break;
                }
            }
            if !placed {
                fr.push((free_index[&c], v));
            }
        }
        row_mats.push(mats);
        row_free.push(fr);
    }
    // Objective split.
    let c_mats: Vec<DMatrix<f64>> = psd_blocks
        .iter()
        .map(|&(off, n)| smat(&p.objective[off..off + n * (n + 1) / 2], n))
        .collect();
    let c_free = DVector::from_iterator(nf, free_cols.iter().map(|&c| p.objective[c]));
    let b = DVector::from_column_slice(&p.equality_rhs);

    // Starting point: scaled identity, sized from the data.
    let data_norm = p
        .equality_lhs
        .triplets
        .iter()
        .map(|t| t.2.abs())
        .chain(p.objective.iter().map(|v| v.abs()))
        .chain(p.equality_rhs.iter().map(|v| v.abs()))
        .fold(1.0f64, f64::max);
    let tau = 10.0 * data_norm.sqrt().max(1.0);
    let mut st = IpmState {
        xs: psd_blocks
            .iter()
            .map(|&(_, n)| DMatrix::identity(n, n) * tau)
            .collect(),
        ss: psd_blocks
            .iter()
            .map(|&(_, n)| DMatrix::identity(n, n) * tau)
            .collect(),
        xf: DVector::zeros(nf),
        y: DVector::zeros(m),
    };

    let bnorm = 1.0 + b.amax();
    let cnorm = 1.0
        + c_mats
            .iter()
            .map(|m| m.amax())
            .chain(std::iter::once(c_free.amax()))
            .fold(0.0f64, f64::max);

    let mut status = SolveStatus::MaxIters;
    let mut iters = 0;
    // Best iterate seen so far: late iterations can degrade once the Schur
    // system becomes too ill-conditioned, so the best point is kept.
    let mut best_merit = f64::INFINITY;
    let mut best: Option<(Vec<DMatrix<f64>>, Vec<DMatrix<f64>>, DVector<f64>, DVector<f64>)> = None;
    let mut stall = 0usize;
    let mut mu0 = 0.0f64;
    for it in 0..settings.max_iters {
        iters = it + 1;
        // Residuals.
        let mut rp = b.clone();
        for i in 0..m {
            let mut ax = 0.0;
            for (k, amat) in row_mats[i].iter().enumerate() {
                ax += frob_dot(amat, &st.xs[k]);
            }
            for &(fk, v) in &row_free[i] {
                ax += v * st.xf[fk];
            }
            rp[i] -= ax;
        }
        // Dual residual per block: Rd_k = C_k - S_k - sum_i y_i A_ik
        let mut rd_mats: Vec<DMatrix<f64>> = Vec::with_capacity(psd_blocks.len());
        for k in 0..psd_blocks.len() {
            let mut rdk = c_mats[k].clone() - &st.ss[k];
            for i in 0..m {
                if row_mats[i][k].amax() != 0.0 {
                    rdk -= &row_mats[i][k] * st.y[i];
                }
            }
            rd_mats.push(rdk);
        }
        let mut rd_free = c_free.clone();
        for i in 0..m {
            for &(fk, v) in &row_free[i] {
                rd_free[fk] -= v * st.y[i];
            }
        }

        let mu_num: f64 = (0..psd_blocks.len())
            .map(|k| frob_dot(&st.xs[k], &st.ss[k]))
            .sum();
        let mu = if total_psd_dim > 0 {
            mu_num / total_psd_dim as f64
        } else {
            0.0
        };

        let rp_norm = rp.amax() / bnorm;
        let rd_norm = rd_mats
            .iter()
            .map(|m| m.amax())
            .chain(std::iter::once(rd_free.amax()))
            .fold(0.0f64, f64::max)
            / cnorm;
        let pobj: f64 = (0..psd_blocks.len())
            .map(|k| frob_dot(&c_mats[k], &st.xs[k]))
            .sum::<f64>()
            + c_free.dot(&st.xf);
        let dobj = b.dot(&st.y);
        let gap = (pobj - dobj).abs() / (1.0 + pobj.abs() + dobj.abs());

        if std::env::var_os("RDI_SDP_VERBOSE").is_some() {
            eprintln!(
                "it={:3} mu={:9.2e} rp={:9.2e} rd={:9.2e} gap={:9.2e} pobj={:13.6e}",
                it, mu, rp_norm, rd_norm, gap, pobj
            );
        }
        if it == 0 {
            mu0 = mu.max(1.0);
        }
        // The relative duality gap can dip transiently when the primal and
        // dual objectives cross mid-path, so the merit uses complementarity
        // (mu) instead; it decreases monotonically along a healthy path.
        let merit = rp_norm.max(rd_norm).max(mu / mu0);
        if merit < best_merit * 0.999 {
            best_merit = merit;
            best = Some((st.xs.clone(), st.ss.clone(), st.xf.clone(), st.y.clone()));
            stall = 0;
        } else {
            stall += 1;
        }
        if rp_norm <= settings.tol_primal && rd_norm <= settings.tol_dual && gap <= settings.tol_gap
        {
            status = SolveStatus::Optimal;
            best = Some((st.xs.clone(), st.ss.clone(), st.xf.clone(), st.y.clone()));
            break;
        }
        if stall >= 6 {
            // No progress for several iterations: stop and fall back to the
            // best iterate rather than grinding the conditioning further.
            break;
        }
        // Infeasibility heuristics: diverging dual certificate b'y > 0 with
        // A'y + z ~ 0, or primal ray c'x < 0 with Ax ~ 0.
        let ynorm = st.y.amax();
        if ynorm > 1e7 {
            let cert = rd_mats
                .iter()
                .map(|m| m.amax())
                .chain(std::iter::once(rd_free.amax()))
                .fold(0.0f64, f64::max);
            if dobj > 0.0 && cert / ynorm < 1e-6 {
                status = SolveStatus::Infeasible;
                break;
            }
        }
        let xnorm = st
            .xs
            .iter()
            .map(|m| m.amax())
            .chain(std::iter::once(st.xf.amax()))
            .fold(0.0f64, f64::max);
        if xnorm > 1e9 && pobj < -1e6 && rp.amax() / xnorm < 1e-8 {
            status = SolveStatus::Unbounded;
            break;
        }

        // Factor S blocks and X stays as-is; precompute S^{-1}.
        let mut s_inv: Vec<DMatrix<f64>> = Vec::with_capacity(psd_blocks.len());
        let mut ok = true;
        for k in 0..psd_blocks.len() {
            match st.ss[k].clone().cholesky() {
                Some(ch) => s_inv.push(ch.inverse()),
                None => {
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            status = SolveStatus::NumericalFailure;
            break;
        }

        // Schur complement M_ij = sum_k tr(A_ik X_k A_jk S_k^{-1}), plus the
        // free-variable saddle blocks.
        let dim = m + nf;
        let mut kkt = DMatrix::zeros(dim, dim);
        // Precompute X A_j S^{-1} per (j, k) lazily: store per j as needed.
        // For desk-scale problems a direct double loop is fine.
        let mut xajs: Vec<Vec<DMatrix<f64>>> = Vec::with_capacity(m);
        for j in 0..m {
            let mut per_block = Vec::with_capacity(psd_blocks.len());
            for k in 0..psd_blocks.len() {
                if row_mats[j][k].amax() != 0.0 {
                    per_block.push(&st.xs[k] * &row_mats[j][k] * &s_inv[k]);
                } else {
                    per_block.push(DMatrix::zeros(0, 0));
                }
            }
            xajs.push(per_block);
        }
        for i in 0..m {
            for j in 0..=i {
                let mut acc = 0.0;
                for k in 0..psd_blocks.len() {
                    if row_mats[i][k].amax() != 0.0 && xajs[j][k].nrows() > 0 {
                        acc += frob_dot_general(&row_mats[i][k], &xajs[j][k]);
                    }
                }
                kkt[(i, j)] = acc;
                kkt[(j, i)] = acc;
            }
        }
        for i in 0..m {
            for &(fk, v) in &row_free[i] {
                kkt[(i, m + fk)] = v;
                kkt[(m + fk, i)] = v;
            }
        }
        // Static regularization keeps the saddle system factorable. Scaled by
        // the constraint data, not by the Schur complement itself, which grows
        // like 1/mu near convergence.
        let a_amax = p
            .equality_lhs
            .triplets
            .iter()
            .map(|t| t.2.abs())
            .fold(0.0f64, f64::max);
        let reg = 1e-11 * (1.0 + a_amax);
        for i in 0..m {
            kkt[(i, i)] += reg;
        }
        for k in 0..nf {
            kkt[(m + k, m + k)] -= reg;
        }
        let lu = kkt.clone().lu();
        let kkt_solve = |rhs: &DVector<f64>| -> Option<DVector<f64>> {
            let mut sol = lu.solve(rhs)?;
            // Iterative refinement until the residual stops shrinking; the
            // regularized factorization alone loses accuracy near convergence.
            let mut prev = f64::INFINITY;
            for _ in 0..5 {
                let resid = rhs - &kkt * &sol;
                let rn = resid.amax();
                if rn >= prev * 0.5 {
                    break;
                }
                prev = rn;
                match lu.solve(&resid) {
                    Some(corr) => sol += corr,
                    None => break,
                }
            }
            Some(sol)
        };

        // Helper to solve for a given sigma*mu and corrector term.
        let solve_dir = |sigma_mu: f64,
                         corr: Option<(&Vec<DMatrix<f64>>, &Vec<DMatrix<f64>>)>|
         -> Option<(Vec<DMatrix<f64>>, Vec<DMatrix<f64>>, DVector<f64>, DVector<f64>)> {
            let mut rhs = DVector::zeros(dim);
            for i in 0..m {
                let mut v = rp[i];
                for k in 0..psd_blocks.len() {
                    let amat = &row_mats[i][k];
                    if amat.amax() == 0.0 {
                        continue;
                    }
                    v -= sigma_mu * frob_dot_general(amat, &s_inv[k]);
                    v += frob_dot(amat, &st.xs[k]);
                    // tr(A_i X Rd S^{-1})
                    let t = &st.xs[k] * &rd_mats[k] * &s_inv[k];
                    v += frob_dot_general(amat, &t);
                    if let Some((dxa, dsa)) = corr {
                        let t2 = &dxa[k] * &dsa[k] * &s_inv[k];
                        v += frob_dot_general(amat, &t2);
                    }
                }
                rhs[i] = v;
            }
            for k in 0..nf {
                rhs[m + k] = rd_free[k];
            }
            let sol = kkt_solve(&rhs)?;
            let dy = sol.rows(0, m).into_owned();
            let dxf = sol.rows(m, nf).into_owned();
            // dS_k = Rd_k - sum_i dy_i A_ik
            let mut ds: Vec<DMatrix<f64>> = Vec::with_capacity(psd_blocks.len());
            for k in 0..psd_blocks.len() {
                let mut d = rd_mats[k].clone();
                for i in 0..m {
                    if row_mats[i][k].amax() != 0.0 {
                        d -= &row_mats[i][k] * dy[i];
                    }
                }
                ds.push(d);
            }
            // dX_k = sigma_mu S^{-1} - X - X dS S^{-1} (- dXa dSa S^{-1}), symmetrized
            let mut dx: Vec<DMatrix<f64>> = Vec::with_capacity(psd_blocks.len());
            for k in 0..psd_blocks.len() {
                let mut d = &s_inv[k] * sigma_mu - &st.xs[k] - &st.xs[k] * &ds[k] * &s_inv[k];
                if let Some((dxa, dsa)) = corr {
                    d -= &dxa[k] * &dsa[k] * &s_inv[k];
                }
                let sym = (&d + d.transpose()) * 0.5;
                dx.push(sym);
            }
            Some((dx, ds, dxf, dy))
        };

        // Predictor.
        let Some((dxa, dsa, _, _)) = solve_dir(0.0, None) else {
            status = SolveStatus::NumericalFailure;
            break;
        };
        let ap = max_step(&st.xs, &dxa);
        let ad = max_step(&st.ss, &dsa);
        let mut mu_aff = 0.0;
        for k in 0..psd_blocks.len() {
            let xn = &st.xs[k] + &dxa[k] * ap;
            let sn = &st.ss[k] + &dsa[k] * ad;
            mu_aff += frob_dot(&xn, &sn);
        }
        if total_psd_dim > 0 {
            mu_aff /= total_psd_dim as f64;
        }
        let sigma = if mu > 0.0 {
            (mu_aff / mu).clamp(0.0, 1.0).powi(3)
        } else {
            0.0
        };

        // Corrector.
        let Some((dx, ds, dxf, dy)) = solve_dir(sigma * mu, Some((&dxa, &dsa))) else {
            status = SolveStatus::NumericalFailure;
            break;
        };
        let step_frac = if mu < 1e-5 { 0.995 } else { 0.97 };
        let ap = (step_frac * max_step(&st.xs, &dx)).min(1.0);
        let ad = (step_frac * max_step(&st.ss, &ds)).min(1.0);
        if !ap.is_finite() || !ad.is_finite() || ap < 1e-10 || ad < 1e-10 {
            status = SolveStatus::NumericalFailure;
            break;
        }
        for k in 0..psd_blocks.len() {
            st.xs[k] += &dx[k] * ap;
            st.ss[k] += &ds[k] * ad;
        }
        st.xf += &dxf * ap;
        st.y += &dy * ad;
    }

    if let Some((xs, ss, xf, y)) = best {
        st.xs = xs;
        st.ss = ss;
        st.xf = xf;
        st.y = y;
    }
    // Assemble stacked primal.
    let mut primal = vec![0.0; p.total_dim()];
    for (k, &(off, n)) in psd_blocks.iter().enumerate() {
        let v = svec(&st.xs[k]);
        primal[off..off + n * (n + 1) / 2].copy_from_slice(&v);
    }
    for (k, &c) in free_cols.iter().enumerate() {
        primal[c] = st.xf[k];
    }
    let dual: Vec<f64> = st.y.iter().cloned().collect();
    let objective_value = dot(&p.objective, &primal);
    SdpSolution {
        status,
        primal,
        dual,
        objective_value,
        residuals: Residuals {
            primal: f64::NAN,
            dual: f64::NAN,
            gap: f64::NAN,
        },
        iterations: iters,
    }
}

/// Generate a random feasible SDP with a planted, provably optimal value:
/// primal and dual points are constructed complementary (X* S* = 0), so the
/// planted objective value is exact by weak duality. Returns the problem and
/// its optimal value. Deterministic per seed.
pub fn planted_sdp(seed: u64) -> (SdpProblem, f64) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e3779b9).wrapping_add(1));
    let n: usize = rng.gen_range(2..6);
    let m: usize = rng.gen_range(1..=n);
    let dim = n * (n + 1) / 2;
    // Random orthogonal basis via QR.
    let raw = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0f64));
    let q = raw.qr().q();
    let k = (n / 2).max(1);
    let mut xdiag = DVector::zeros(n);
    let mut sdiag = DVector::zeros(n);
    for i in 0..k {
        xdiag[i] = rng.gen_range(0.5..2.0);
    }
    for i in k..n {
        sdiag[i] = rng.gen_range(0.5..2.0);
    }
    let xstar = &q * DMatrix::from_diagonal(&xdiag) * q.transpose();
    let sstar = &q * DMatrix::from_diagonal(&sdiag) * q.transpose();
    let mut a = SparseMatrix::new(m, dim);
    let mut amats = Vec::new();
    for i in 0..m {
        let raw = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0f64));
        let sym = (&raw + raw.transpose()) * 0.5;
        for (c, &v) in svec(&sym).iter().enumerate() {
            a.push(i, c, v);
        }
        amats.push(sym);
    }
    let b: Vec<f64> = amats.iter().map(|ai| frob_dot(ai, &xstar)).collect();
    let ystar: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut cmat = sstar.clone();
    for i in 0..m {
        cmat += &amats[i] * ystar[i];
    }
    let opt: f64 = b.iter().zip(&ystar).map(|(x, y)| x * y).sum();
    (
        SdpProblem {
            objective: svec(&cmat),
            equality_lhs: a,
            equality_rhs: b,
            cones: vec![Cone::Psd(n)],
        },
        opt,
    )
}

fn inv_svec_index(k: usize) -> (usize, usize) {
    // find j with j(j+1)/2 <= k < (j+1)(j+2)/2
    let mut j = 0usize;
    while (j + 1) * (j + 2) / 2 <= k {
        j += 1;
    }
    (k - j * (j + 1) / 2, j)
}

fn frob_dot(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

// Same as frob_dot but for a symmetric `a` against a possibly nonsymmetric
// product matrix: tr(a * b) = sum_ij a_ij b_ji.
fn frob_dot_general(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            acc += a[(i, j)] * b[(j, i)];
        }
    }
    acc
}

/// Largest alpha in (0, 1] with X + alpha dX still positive definite,
/// computed from the minimum eigenvalue of L^{-1} dX L^{-T}.
fn max_step(xs: &[DMatrix<f64>], dxs: &[DMatrix<f64>]) -> f64 {
    let mut alpha = 1.0f64;
    for (x, dx) in xs.iter().zip(dxs) {
        let Some(ch) = x.clone().cholesky() else {
            return 1e-12;
        };
        let l = ch.l();
        let linv = l
            .clone()
            .try_inverse()
            .unwrap_or_else(|| DMatrix::identity(x.nrows(), x.ncols()));
        let w = &linv * dx * linv.transpose();
        let wmin = min_eigenvalue(&w).unwrap_or(f64::NEG_INFINITY);
        if wmin < 0.0 {
            alpha = alpha.min(-1.0 / wmin);
        }
    }
    alpha
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn toy_psd2() -> SdpProblem {
        // min X11 s.t. X12 = 1, X22 = 1, X psd(2). Optimum 1 at [[1,1],[1,1]].
        let mut a = SparseMatrix::new(2, 3);
        a.push(0, svec_index(0, 1), SQRT2); // sqrt2 * svec entry = 2*X12 -> X12 coefficient
        a.push(1, svec_index(1, 1), 1.0);
        SdpProblem {
            objective: vec![1.0, 0.0, 0.0],
            equality_lhs: a,
            equality_rhs: vec![2.0, 1.0], // 2*X12 = 2, X22 = 1
            cones: vec![Cone::Psd(2)],
        }
    }

    #[test]
    fn toy_psd2_optimal() {
        let sol = solve(&toy_psd2(), &SolverSettings::default());
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert_relative_eq!(sol.objective_value, 1.0, epsilon = 1e-7);
        let x = smat(&sol.primal, 2);
        assert_relative_eq!(x[(0, 0)], 1.0, epsilon = 1e-5);
        assert_relative_eq!(x[(0, 1)], 1.0, epsilon = 1e-5);
        assert_relative_eq!(x[(1, 1)], 1.0, epsilon = 1e-5);
    }

    #[test]
    fn infeasible_negative_diagonal() {
        // min 0 s.t. X11 = -1, X psd(1)
        let mut a = SparseMatrix::new(1, 1);
        a.push(0, 0, 1.0);
        let p = SdpProblem {
            objective: vec![0.0],
            equality_lhs: a,
            equality_rhs: vec![-1.0],
            cones: vec![Cone::Psd(1)],
        };
        let sol = solve(&p, &SolverSettings::default());
        assert_eq!(sol.status, SolveStatus::Infeasible);
    }

    #[test]
    fn min_eigenvalue_basics() {
        assert_relative_eq!(
            min_eigenvalue(&DMatrix::identity(3, 3)).unwrap(),
            1.0,
            epsilon = 1e-12
        );
        let d = DMatrix::from_diagonal(&DVector::from_column_slice(&[2.0, -5.0]));
        assert_relative_eq!(min_eigenvalue(&d).unwrap(), -5.0, epsilon = 1e-12);
        // Lyapunov matrix of the double-integrator case study: the small
        // off-diagonal perturbs the eigenvalue only at second order.
        let p = DMatrix::from_row_slice(2, 2, &[12.6450, -0.005, -0.005, 0.1263]);
        assert!((min_eigenvalue(&p).unwrap() - 0.1263).abs() < 1e-4);
    }

    #[test]
    fn min_eigenvalue_rejects_nonfinite() {
        let m = DMatrix::from_row_slice(1, 1, &[f64::NAN]);
        assert!(min_eigenvalue(&m).is_err());
    }

    #[test]
    fn svec_smat_roundtrip() {
        let m = DMatrix::from_row_slice(3, 3, &[2.0, 1.0, 0.5, 1.0, 3.0, -1.0, 0.5, -1.0, 4.0]);
        let v = svec(&m);
        assert_eq!(v.len(), 6);
        let back = smat(&v, 3);
        assert_relative_eq!((&back - &m).amax(), 0.0, epsilon = 1e-14);
        // inner product preservation
        let v2 = svec(&back);
        let frob: f64 = m.iter().map(|x| x * x).sum();
        let dotted: f64 = v.iter().zip(&v2).map(|(a, b)| a * b).sum();
        assert_relative_eq!(frob, dotted, epsilon = 1e-12);
    }

    #[test]
    fn free_variables_equality() {
        // min u s.t. u + X11 = 2, X11 = 1 -> u = 1
        let mut a = SparseMatrix::new(2, 2);
        a.push(0, 0, 1.0);
        a.push(0, 1, 1.0);
        a.push(1, 0, 1.0);
        let p = SdpProblem {
            objective: vec![0.0, 1.0],
            equality_lhs: a,
            equality_rhs: vec![2.0, 1.0],
            cones: vec![Cone::Psd(1), Cone::Free(1)],
        };
        let sol = solve(&p, &SolverSettings::default());
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert_relative_eq!(sol.primal[1], 1.0, epsilon = 1e-6);
    }

    #[test]
    fn deterministic_output() {
        let p = toy_psd2();
        let s1 = solve(&p, &SolverSettings::default());
        let s2 = solve(&p, &SolverSettings::default());
        assert_eq!(s1.primal, s2.primal);
        assert_eq!(s1.dual, s2.dual);
    }

    #[test]
    fn reported_residuals_match_recomputation() {
        let p = toy_psd2();
        let sol = solve(&p, &SolverSettings::default());
        let (rp, rd, gap) = kkt_residuals(&p, &sol.primal, &sol.dual);
        assert!((sol.residuals.primal - rp).abs() < 1e-12);
        assert!((sol.residuals.dual - rd).abs() < 1e-12);
        assert!((sol.residuals.gap - gap).abs() < 1e-12);
    }

    #[test]
    fn random_planted_optima() {
        for trial in 0..20 {
            let (p, opt) = planted_sdp(trial);
            let sol = solve(&p, &SolverSettings::default());
            assert_eq!(sol.status, SolveStatus::Optimal, "trial {}", trial);
            let rel = (sol.objective_value - opt).abs() / (1.0 + opt.abs());
            assert!(rel < 1e-6, "trial {}: got {}, planted {}", trial, sol.objective_value, opt);
            let (rp, rd, gap) = kkt_residuals(&p, &sol.primal, &sol.dual);
            assert!(rp < 1e-6 && rd < 1e-6 && gap < 1e-5, "trial {trial}: {rp} {rd} {gap}");
        }
    }
}
