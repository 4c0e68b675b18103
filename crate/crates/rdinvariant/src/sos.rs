//! Sum-of-squares program compiler.
//!
//! An [`SosProgram`] carries unknown polynomial coefficients (decision
//! variables), a linear objective over them, and constraints of the form
//! "expression is a sum of squares", where each expression is affine in the
//! decisions. Compilation introduces one Gram matrix per SOS constraint and
//! equates coefficients, producing an [`SdpProblem`] over PSD blocks plus one
//! free block holding the decision coefficients.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::DMatrix;
use thiserror::Error;

use crate::poly::{monomials_up_to, Monomial, PolyError, Polynomial};
use crate::sdp::{
    self, Cone, SdpProblem, SdpSolution, SolveStatus, SolverSettings, SparseMatrix, SQRT2,
};

#[derive(Debug, Error)]
pub enum SosError {
    #[error("polynomial error: {0}")]
    Poly(#[from] PolyError),
    #[error("sdp error: {0}")]
    Sdp(#[from] sdp::SdpError),
    #[error("variable lists differ across expressions: [{0}] vs [{1}]")]
    VarMismatch(String, String),
    #[error("empty support for SOS constraint")]
    EmptySupport,
    #[error("basis/expression variable mismatch")]
    BasisMismatch,
    #[error("solver returned {0:?}")]
    SolveFailed(SolveStatus),
}

/// A polynomial whose coefficients are decision variables, with a fixed
/// monomial support (template).
#[derive(Debug, Clone)]
pub struct DecisionPoly {
    pub vars: Vec<String>,
    pub template: Vec<Monomial>,
    /// One globally unique decision id per template monomial.
    pub coeff_ids: Vec<usize>,
}

impl DecisionPoly {
    /// Instantiate the polynomial from solved decision values.
    pub fn instantiate(&self, values: &[f64]) -> Polynomial {
        let refs: Vec<&str> = self.vars.iter().map(|s| s.as_str()).collect();
        Polynomial::from_terms(
            &refs,
            self.template
                .iter()
                .zip(&self.coeff_ids)
                .map(|(m, &id)| (m.0.clone(), values[id]))
                .collect(),
        )
    }
}

/// Polynomial expression affine in the decision coefficients: a constant part
/// plus, per decision id, the polynomial it multiplies.
#[derive(Debug, Clone)]
pub struct AffineExpr {
    pub constant: Polynomial,
    pub linear: BTreeMap<usize, Polynomial>,
}

impl AffineExpr {
    pub fn from_poly(p: Polynomial) -> Self {
        AffineExpr {
            constant: p,
            linear: BTreeMap::new(),
        }
    }

    pub fn from_decision(d: &DecisionPoly) -> Self {
        let refs: Vec<&str> = d.vars.iter().map(|s| s.as_str()).collect();
        let mut linear = BTreeMap::new();
        for (m, &id) in d.template.iter().zip(&d.coeff_ids) {
            linear.insert(id, Polynomial::from_terms(&refs, vec![(m.0.clone(), 1.0)]));
        }
        AffineExpr {
            constant: Polynomial::zero(&refs),
            linear,
        }
    }

    pub fn add(&self, other: &AffineExpr) -> Result<AffineExpr, PolyError> {
        let mut out = self.clone();
        out.constant = out.constant.add(&other.constant)?;
        for (&id, p) in &other.linear {
            match out.linear.get_mut(&id) {
                Some(q) => *q = q.add(p)?,
                None => {
                    out.linear.insert(id, p.clone());
                }
            }
        }
        out.prune();
        Ok(out)
    }

    pub fn sub(&self, other: &AffineExpr) -> Result<AffineExpr, PolyError> {
        self.add(&other.scale(-1.0))
    }

    pub fn scale(&self, k: f64) -> AffineExpr {
        AffineExpr {
            constant: self.constant.scale(k),
            linear: self
                .linear
                .iter()
                .map(|(&id, p)| (id, p.scale(k)))
                .collect(),
        }
    }

    /// Multiply by a fixed polynomial (stays affine in the decisions).
    pub fn mul_poly(&self, p: &Polynomial) -> Result<AffineExpr, PolyError> {
        let mut out = AffineExpr {
            constant: self.constant.mul(p)?,
            linear: BTreeMap::new(),
        };
        for (&id, q) in &self.linear {
            out.linear.insert(id, q.mul(p)?);
        }
        out.prune();
        Ok(out)
    }

    fn prune(&mut self) {
        self.linear.retain(|_, p| !p.is_zero());
    }

    /// Monomials that can appear for any decision values.
    pub fn support(&self) -> Vec<Monomial> {
        let mut set: BTreeSet<Monomial> = self.constant.terms().map(|(m, _)| m.clone()).collect();
        for p in self.linear.values() {
            set.extend(p.terms().map(|(m, _)| m.clone()));
        }
        set.into_iter().collect()
    }

    pub fn instantiate(&self, values: &[f64]) -> Result<Polynomial, PolyError> {
        let mut out = self.constant.clone();
        for (&id, p) in &self.linear {
            out = out.add(&p.scale(values[id]))?;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Default)]
pub struct SosProgram {
    pub decisions: Vec<DecisionPoly>,
    next_id: usize,
    /// Linear objective over decision ids, to MAXIMIZE.
    pub objective: Vec<(usize, f64)>,
    pub sos_constraints: Vec<AffineExpr>,
    /// Extra equalities: sum of (id, coeff) pairs == rhs.
    pub linear_constraints: Vec<(Vec<(usize, f64)>, f64)>,
    /// Newton-polytope-style basis pruning (default on).
    pub prune_basis: bool,
}

impl SosProgram {
    pub fn new() -> Self {
        SosProgram {
            prune_basis: true,
            ..Default::default()
        }
    }

    pub fn n_decisions(&self) -> usize {
        self.next_id
    }

    /// Register a decision polynomial over `vars` with all monomials of total
    /// degree <= max_degree (only even total degrees when `even_parity`).
    pub fn make_decision_poly(
        &mut self,
        vars: &[&str],
        max_degree: u32,
        even_parity: bool,
    ) -> DecisionPoly {
        let template = monomials_up_to(vars.len(), max_degree, even_parity);
        let ids: Vec<usize> = (self.next_id..self.next_id + template.len()).collect();
        self.next_id += template.len();
        let d = DecisionPoly {
            vars: vars.iter().map(|s| s.to_string()).collect(),
            template,
            coeff_ids: ids,
        };
        self.decisions.push(d.clone());
        d
    }

    /// Register a decision polynomial with an explicit monomial template over
    /// `vars` (used to restrict a decision to a variable subset of a larger
    /// ambient ring).
    pub fn make_decision_poly_on(&mut self, vars: &[&str], template: Vec<Monomial>) -> DecisionPoly {
        let ids: Vec<usize> = (self.next_id..self.next_id + template.len()).collect();
        self.next_id += template.len();
        let d = DecisionPoly {
            vars: vars.iter().map(|s| s.to_string()).collect(),
            template,
            coeff_ids: ids,
        };
        self.decisions.push(d.clone());
        d
    }

    /// Register a single scalar decision (a degree-0 polynomial).
    pub fn make_scalar(&mut self, vars: &[&str]) -> DecisionPoly {
        self.make_decision_poly(vars, 0, false)
    }

    pub fn add_sos(&mut self, expr: AffineExpr) {
        self.sos_constraints.push(expr);
    }

    pub fn set_objective(&mut self, terms: Vec<(usize, f64)>) {
        self.objective = terms;
    }
}

/// Monomial basis for the Gram parameterization of an SOS constraint with the
/// given support: all monomials of degree <= ceil(d/2) in the variables that
/// actually appear, where d is the max total degree of the support.
pub fn gram_basis(expr_support: &[Monomial]) -> Result<Vec<Monomial>, SosError> {
    if expr_support.is_empty() {
        return Err(SosError::EmptySupport);
    }
    let nvars = expr_support[0].0.len();
    let d = expr_support.iter().map(|m| m.total_degree()).max().unwrap();
    let half = d.div_ceil(2);
    let mut used = vec![false; nvars];
    for m in expr_support {
        for (i, &e) in m.0.iter().enumerate() {
            if e > 0 {
                used[i] = true;
            }
        }
    }
    let active: Vec<usize> = (0..nvars).filter(|&i| used[i]).collect();
    let reduced = monomials_up_to(active.len(), half, false);
    let mut out = Vec::with_capacity(reduced.len());
    for rm in reduced {
        let mut exps = vec![0u32; nvars];
        for (k, &i) in active.iter().enumerate() {
            exps[i] = rm.0[k];
        }
        out.push(Monomial::new(exps));
    }
    out.sort();
    Ok(out)
}

/// Prune a Gram basis against the support: first a Newton-polytope box/degree
/// hull test on doubled exponents, then the iterative diagonal-consistency
/// reduction (a basis monomial whose square can only be matched by its own
/// diagonal entry, with no support monomial there, forces a zero row).
pub fn prune_gram_basis(basis: Vec<Monomial>, support: &[Monomial]) -> Vec<Monomial> {
    if support.is_empty() {
        return basis;
    }
    let nvars = support[0].0.len();
    let mut lo = vec![u32::MAX; nvars];
    let mut hi = vec![0u32; nvars];
    let mut dlo = u32::MAX;
    let mut dhi = 0u32;
    for m in support {
        for i in 0..nvars {
            lo[i] = lo[i].min(m.0[i]);
            hi[i] = hi[i].max(m.0[i]);
        }
        dlo = dlo.min(m.total_degree());
        dhi = dhi.max(m.total_degree());
    }
    let mut kept: Vec<Monomial> = basis
        .into_iter()
        .filter(|m| {
            let dbl = m.total_degree() * 2;
            dbl >= dlo
                && dbl <= dhi
                && m.0
                    .iter()
                    .enumerate()
                    .all(|(i, &e)| 2 * e >= lo[i] && 2 * e <= hi[i])
        })
        .collect();
    let support_set: BTreeSet<&Monomial> = support.iter().collect();
    loop {
        let sums: BTreeSet<Monomial> = kept
            .iter()
            .enumerate()
            .flat_map(|(i, a)| {
                kept.iter()
                    .enumerate()
                    .filter(move |&(j, _)| j != i)
                    .map(move |(_, b)| a.mul(b))
            })
            .collect();
        let before = kept.len();
        kept.retain(|m| {
            let sq = m.mul(m);
            support_set.contains(&sq) || sums.contains(&sq)
        });
        if kept.len() == before {
            break;
        }
    }
    kept
}

/// Where each piece of a compiled program lives in the SDP decision vector.
#[derive(Debug, Clone)]
pub struct SosIndexMap {
    /// Per SOS constraint: (svec offset, Gram basis).
    pub gram_blocks: Vec<(usize, Vec<Monomial>)>,
    /// Offset of the free decision-coefficient block.
    pub decision_offset: usize,
    pub n_decisions: usize,
}

impl SosIndexMap {
    pub fn decision_values(&self, solution: &SdpSolution) -> Vec<f64> {
        solution.primal[self.decision_offset..self.decision_offset + self.n_decisions].to_vec()
    }

    pub fn gram_matrix(&self, solution: &SdpSolution, constraint: usize) -> DMatrix<f64> {
        let (off, basis) = &self.gram_blocks[constraint];
        let n = basis.len();
        sdp::smat(&solution.primal[*off..*off + n * (n + 1) / 2], n)
    }

    pub fn certificate(&self, solution: &SdpSolution, constraint: usize) -> GramCertificate {
        let (_, basis) = &self.gram_blocks[constraint];
        GramCertificate {
            basis: basis.clone(),
            gram: self.gram_matrix(solution, constraint),
        }
    }
}

/// Compile an SOS program into a conic SDP: one PSD block per SOS constraint
/// (the Gram matrix), one free block for the decision coefficients, and one
/// equality row per matched monomial coefficient.
pub fn compile(program: &SosProgram) -> Result<(SdpProblem, SosIndexMap), SosError> {
    // All SOS expressions must share an ambient variable list.
    let mut ambient: Option<Vec<String>> = None;
    for e in &program.sos_constraints {
        let v = e.constant.vars().to_vec();
        match &ambient {
            None => ambient = Some(v),
            Some(a) => {
                if *a != v {
                    return Err(SosError::VarMismatch(a.join(","), v.join(",")));
                }
            }
        }
    }

    let mut cones = Vec::new();
    let mut gram_blocks = Vec::new();
    let mut offset = 0;
    for expr in &program.sos_constraints {
        let support = expr.support();
        let mut basis = gram_basis(&support)?;
        if program.prune_basis {
            basis = prune_gram_basis(basis, &support);
        }
        if basis.is_empty() {
            // Expression must be identically zero; keep a 1x1 block on the
            // constant monomial so the equality rows still exist.
            basis = vec![Monomial::constant(support[0].0.len())];
        }
        cones.push(Cone::Psd(basis.len()));
        gram_blocks.push((offset, basis.clone()));
        offset += basis.len() * (basis.len() + 1) / 2;
    }
    let n_dec = program.n_decisions();
    let decision_offset = offset;
    cones.push(Cone::Free(n_dec.max(1)));
    let total = offset + n_dec.max(1);

    let mut a = SparseMatrix::new(0, total);
    let mut b = Vec::new();
    let mut row = 0;
    for (k, expr) in program.sos_constraints.iter().enumerate() {
        let (goff, basis) = &gram_blocks[k];
        // Monomials that must match: expression support plus all pairwise
        // basis products.
        let mut monos: BTreeSet<Monomial> = expr.support().into_iter().collect();
        let mut pair_map: BTreeMap<Monomial, Vec<(usize, f64)>> = BTreeMap::new();
        for j in 0..basis.len() {
            for i in 0..=j {
                let prod = basis[i].mul(&basis[j]);
                let sv = goff + sdp::svec_index(i, j);
                let coeff = if i == j { 1.0 } else { SQRT2 };
                pair_map.entry(prod).or_default().push((sv, coeff));
            }
        }
        monos.extend(pair_map.keys().cloned());
        for mono in &monos {
            // sum of Gram contributions - linear(u) = constant coeff
            if let Some(entries) = pair_map.get(mono) {
                for &(col, coeff) in entries {
                    a.push(row, col, coeff);
                }
            }
            for (&id, p) in &expr.linear {
                let c = p.coeff(mono);
                if c != 0.0 {
                    a.push(row, decision_offset + id, -c);
                }
            }
            b.push(expr.constant.coeff(mono));
            row += 1;
        }
    }
    for (terms, rhs) in &program.linear_constraints {
        for &(id, c) in terms {
            a.push(row, decision_offset + id, c);
        }
        b.push(*rhs);
        row += 1;
    }
    a.nrows = row;

    // Minimize the negated objective.
    let mut c = vec![0.0; total];
    for &(id, w) in &program.objective {
        c[decision_offset + id] -= w;
    }
    Ok((
        SdpProblem {
            objective: c,
            equality_lhs: a,
            equality_rhs: b,
            cones,
        },
        SosIndexMap {
            gram_blocks,
            decision_offset,
            n_decisions: n_dec,
        },
    ))
}

/// Result of compiling and solving an SOS program.
#[derive(Debug, Clone)]
pub struct SosSolution {
    pub status: SolveStatus,
    /// Program objective value (the maximized functional).
    pub objective: f64,
    pub decision_values: Vec<f64>,
    pub certificates: Vec<GramCertificate>,
    pub sdp: SdpSolution,
}

/// Compile, solve, and extract certificates in one go.
pub fn solve(program: &SosProgram, settings: &SolverSettings) -> Result<SosSolution, SosError> {
    let (problem, map) = compile(program)?;
    let sol = sdp::solve(&problem, settings);
    let decision_values = map.decision_values(&sol);
    let objective = program
        .objective
        .iter()
        .map(|&(id, w)| w * decision_values[id])
        .sum();
    let certificates = (0..program.sos_constraints.len())
        .map(|k| map.certificate(&sol, k))
        .collect();
    Ok(SosSolution {
        status: sol.status,
        objective,
        decision_values,
        certificates,
        sdp: sol,
    })
}

/// A Gram-matrix certificate: `expr = z' G z` with `G` PSD.
#[derive(Debug, Clone)]
pub struct GramCertificate {
    pub basis: Vec<Monomial>,
    pub gram: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct CertificateReport {
    pub max_mismatch: f64,
    pub min_eigenvalue: f64,
    pub pass: bool,
}

/// Recompute `z' G z` and compare against the expression coefficient-wise;
/// check the Gram matrix is PSD up to tolerance. This is the independent
/// numerical verification of a returned certificate.
pub fn check_certificate(
    expr: &Polynomial,
    cert: &GramCertificate,
    tol_match: f64,
    tol_psd: f64,
) -> Result<CertificateReport, SosError> {
    let nvars = expr.nvars();
    if cert.basis.iter().any(|m| m.0.len() != nvars) {
        return Err(SosError::BasisMismatch);
    }
    let n = cert.basis.len();
    if cert.gram.nrows() != n || cert.gram.ncols() != n {
        return Err(SosError::BasisMismatch);
    }
    let mut recomputed: BTreeMap<Monomial, f64> = BTreeMap::new();
    for j in 0..n {
        for i in 0..n {
            let prod = cert.basis[i].mul(&cert.basis[j]);
            *recomputed.entry(prod).or_insert(0.0) += cert.gram[(i, j)];
        }
    }
    let mut max_mismatch = 0.0f64;
    let mut seen: BTreeSet<Monomial> = BTreeSet::new();
    for (m, c) in expr.terms() {
        let r = recomputed.get(m).copied().unwrap_or(0.0);
        max_mismatch = max_mismatch.max((r - c).abs());
        seen.insert(m.clone());
    }
    for (m, &r) in &recomputed {
        if !seen.contains(m) {
            max_mismatch = max_mismatch.max(r.abs());
        }
    }
    let min_eigenvalue = sdp::min_eigenvalue(&cert.gram)?;
    Ok(CertificateReport {
        max_mismatch,
        min_eigenvalue,
        pass: max_mismatch <= tol_match && min_eigenvalue >= -tol_psd,
    })
}

// ---------------------------------------------------------------------------
// Certificate text format: basis monomial list + dense symmetric matrix per
// constraint. Round-trippable.
// ---------------------------------------------------------------------------

pub fn dump_certificates(certs: &[GramCertificate], vars: &[String]) -> String {
    let mut s = String::new();
    s.push_str(&format!("vars {}\n", vars.join(" ")));
    for cert in certs {
        s.push_str(&format!("certificate {}\n", cert.basis.len()));
        for m in &cert.basis {
            let exps: Vec<String> = m.0.iter().map(|e| e.to_string()).collect();
            s.push_str(&format!("basis {}\n", exps.join(" ")));
        }
        for i in 0..cert.basis.len() {
            let row: Vec<String> = (0..cert.basis.len())
                .map(|j| format!("{:.17e}", cert.gram[(i, j)]))
                .collect();
            s.push_str(&format!("gram {}\n", row.join(" ")));
        }
    }
    s
}

pub fn parse_certificates(input: &str) -> Result<(Vec<String>, Vec<GramCertificate>), SosError> {
    let mut vars: Vec<String> = Vec::new();
    let mut certs = Vec::new();
    let mut lines = input.lines().peekable();
    let parse_err = |msg: &str| SosError::Poly(PolyError::Parse {
        pos: 0,
        msg: msg.to_string(),
    });
    while let Some(line) = lines.next() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(rest) = line.strip_prefix("vars ") {
            vars = rest.split_whitespace().map(|s| s.to_string()).collect();
        } else if let Some(rest) = line.strip_prefix("certificate ") {
            let n: usize = rest
                .trim()
                .parse()
                .map_err(|_| parse_err("bad certificate size"))?;
            let mut basis = Vec::with_capacity(n);
            for _ in 0..n {
                let l = lines.next().ok_or_else(|| parse_err("truncated basis"))?;
                let rest = l
                    .trim()
                    .strip_prefix("basis ")
                    .ok_or_else(|| parse_err("expected basis line"))?;
                let exps: Result<Vec<u32>, _> =
                    rest.split_whitespace().map(|t| t.parse()).collect();
                basis.push(Monomial::new(exps.map_err(|_| parse_err("bad exponent"))?));
            }
            let mut gram = DMatrix::zeros(n, n);
            for i in 0..n {
                let l = lines.next().ok_or_else(|| parse_err("truncated gram"))?;
                let rest = l
                    .trim()
                    .strip_prefix("gram ")
                    .ok_or_else(|| parse_err("expected gram line"))?;
                let row: Result<Vec<f64>, _> = rest.split_whitespace().map(|t| t.parse()).collect();
                let row = row.map_err(|_| parse_err("bad gram entry"))?;
                if row.len() != n {
                    return Err(parse_err("gram row length"));
                }
                for j in 0..n {
                    gram[(i, j)] = row[j];
                }
            }
            certs.push(GramCertificate { basis, gram });
        } else {
            return Err(parse_err("unknown line in certificate file"));
        }
    }
    Ok((vars, certs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::poly::parse_polynomial;
    use approx::assert_relative_eq;

    fn maximize_lower_bound(p_str: &str, vars: &[&str]) -> f64 {
        // max gamma s.t. p - gamma in Sigma
        let mut prog = SosProgram::new();
        let gamma = prog.make_scalar(vars);
        let p = parse_polynomial(p_str, vars).unwrap();
        let expr = AffineExpr::from_poly(p)
            .sub(&AffineExpr::from_decision(&gamma))
            .unwrap();
        prog.add_sos(expr);
        prog.set_objective(vec![(gamma.coeff_ids[0], 1.0)]);
        let sol = solve(&prog, &SolverSettings::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        sol.objective
    }

    #[test]
    fn lower_bound_shifted_square() {
        assert_relative_eq!(
            maximize_lower_bound("x^2 + 1", &["x"]),
            1.0,
            epsilon = 1e-6
        );
    }

    #[test]
    fn lower_bound_parabola_vertex() {
        assert_relative_eq!(
            maximize_lower_bound("x^2 - 2*x + 2", &["x"]),
            1.0,
            epsilon = 1e-6
        );
    }

    #[test]
    fn lower_bound_quartic() {
        // min over x of x^4 - 2x^2 + 1.5 is 0.5 at x^2 = 1
        assert_relative_eq!(
            maximize_lower_bound("x^4 - 2*x^2 + 1.5", &["x"]),
            0.5,
            epsilon = 1e-6
        );
    }

    #[test]
    fn feasibility_perfect_square() {
        // is x^2 + 2x + 1 SOS? Gram over {1, x} is [[1,1],[1,1]].
        let vars = &["x"];
        let mut prog = SosProgram::new();
        let p = parse_polynomial("x^2 + 2*x + 1", vars).unwrap();
        prog.add_sos(AffineExpr::from_poly(p.clone()));
        let sol = solve(&prog, &SolverSettings::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        let cert = &sol.certificates[0];
        assert_eq!(cert.basis.len(), 2);
        for i in 0..2 {
            for j in 0..2 {
                assert!((cert.gram[(i, j)] - 1.0).abs() < 1e-5, "{:?}", cert.gram);
            }
        }
        let report = check_certificate(&p, cert, 1e-6, 1e-7).unwrap();
        assert!(report.pass, "{:?}", report);
    }

    #[test]
    fn make_decision_poly_counts() {
        let mut prog = SosProgram::new();
        let d1 = prog.make_decision_poly(&["r"], 2, false);
        assert_eq!(d1.template.len(), 3);
        let d2 = prog.make_decision_poly(&["x1", "x2"], 1, false);
        assert_eq!(d2.template.len(), 3);
        let d3 = prog.make_decision_poly(&["x", "r"], 4, false);
        assert_eq!(d3.template.len(), 15);
        // ids globally unique
        assert_eq!(prog.n_decisions(), 21);
        let all: BTreeSet<usize> = d1
            .coeff_ids
            .iter()
            .chain(&d2.coeff_ids)
            .chain(&d3.coeff_ids)
            .cloned()
            .collect();
        assert_eq!(all.len(), 21);
    }

    #[test]
    fn gram_basis_degrees() {
        let vars1 = parse_polynomial("x^2 + 2*x + 1", &["x"]).unwrap();
        let support: Vec<Monomial> = vars1.terms().map(|(m, _)| m.clone()).collect();
        let basis = gram_basis(&support).unwrap();
        assert_eq!(basis.len(), 2); // {1, x}

        let quartic = parse_polynomial("x^4", &["x"]).unwrap();
        let support: Vec<Monomial> = quartic.terms().map(|(m, _)| m.clone()).collect();
        let basis = gram_basis(&support).unwrap();
        assert_eq!(basis.len(), 3); // {1, x, x^2}

        // degree-6 support in 3 variables -> basis degree 3, C(6,3) = 20
        let expr = parse_polynomial("x1^2*x2^2*r^2 + x1^6 + 1", &["x1", "x2", "r"]).unwrap();
        let support: Vec<Monomial> = expr.terms().map(|(m, _)| m.clone()).collect();
        let basis = gram_basis(&support).unwrap();
        assert_eq!(basis.len(), 20);
    }

    #[test]
    fn pruning_keeps_needed_monomials() {
        // x^4 + 1: basis {1, x, x^2}; pruning drops x only if unnecessary --
        // x^2 (for x^4) and 1 (for 1) must stay, and x may be dropped since
        // x^2 appears only from x*x... 2*(1) = x^2 pairs (1, x^2) exist, so x
        // is removable by diagonal consistency.
        let quartic = parse_polynomial("x^4 + 1", &["x"]).unwrap();
        let support: Vec<Monomial> = quartic.terms().map(|(m, _)| m.clone()).collect();
        let basis = prune_gram_basis(gram_basis(&support).unwrap(), &support);
        assert!(basis.contains(&Monomial::new(vec![0])));
        assert!(basis.contains(&Monomial::new(vec![2])));
    }

    #[test]
    fn certificate_fails_for_nonpsd_or_mismatch() {
        let vars = &["x"];
        let p = parse_polynomial("x^2 - 1", vars).unwrap();
        // Any PSD Gram cannot match x^2 - 1 (negative at 0): the constant
        // coefficient of z'Gz with basis {1, x} is G00 >= 0 != -1.
        let cert = GramCertificate {
            basis: vec![Monomial::new(vec![0]), Monomial::new(vec![1])],
            gram: DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0]),
        };
        let report = check_certificate(&p, &cert, 1e-6, 1e-7).unwrap();
        assert!(!report.pass);
    }

    #[test]
    fn certificate_dump_roundtrip() {
        let cert = GramCertificate {
            basis: vec![Monomial::new(vec![0, 1]), Monomial::new(vec![1, 0])],
            gram: DMatrix::from_row_slice(2, 2, &[1.5, -0.25, -0.25, 2.0]),
        };
        let vars = vec!["x".to_string(), "y".to_string()];
        let text = dump_certificates(&[cert.clone()], &vars);
        let (pvars, pcerts) = parse_certificates(&text).unwrap();
        assert_eq!(pvars, vars);
        assert_eq!(pcerts.len(), 1);
        assert_eq!(pcerts[0].basis, cert.basis);
        assert_relative_eq!((&pcerts[0].gram - &cert.gram).amax(), 0.0);
    }

    #[test]
    fn roundtrip_random_psd_gram_is_feasible() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            // random PSD G over basis {1, x, x^2}
            let l = DMatrix::from_fn(3, 3, |i, j| {
                if i >= j {
                    rng.gen_range(-1.0..1.0)
                } else {
                    0.0
                }
            });
            let g = &l * l.transpose();
            let basis = vec![
                Monomial::new(vec![0]),
                Monomial::new(vec![1]),
                Monomial::new(vec![2]),
            ];
            // p = z'Gz
            let mut terms: BTreeMap<Monomial, f64> = BTreeMap::new();
            for i in 0..3 {
                for j in 0..3 {
                    *terms.entry(basis[i].mul(&basis[j])).or_insert(0.0) += g[(i, j)];
                }
            }
            let p = Polynomial::from_terms(
                &["x"],
                terms.into_iter().map(|(m, c)| (m.0, c)).collect(),
            );
            let mut prog = SosProgram::new();
            prog.add_sos(AffineExpr::from_poly(p.clone()));
            let sol = solve(&prog, &SolverSettings::default()).unwrap();
            assert_eq!(sol.status, SolveStatus::Optimal);
            let report = check_certificate(&p, &sol.certificates[0], 1e-6, 1e-7).unwrap();
            assert!(report.pass, "{:?}", report);
        }
    }

    #[test]
    fn univariate_exactness_matches_sampling() {
        use rand::{Rng, SeedableRng};
        // SOS bound equals the true global minimum for univariate
        // polynomials; dense sampling plus local refinement is the oracle.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for trial in 0..10 {
            let deg = 2 * rng.gen_range(1..4usize);
            let mut coeffs: Vec<f64> = (0..deg).map(|_| rng.gen_range(-2.0..2.0)).collect();
            coeffs.push(rng.gen_range(0.5..2.0)); // positive leading coeff
            let p = Polynomial::from_terms(
                &["x"],
                coeffs
                    .iter()
                    .enumerate()
                    .map(|(e, &c)| (vec![e as u32], c))
                    .collect(),
            );
            let truth = univariate_min(&p, 8.0);
            let bound = maximize_lower_bound(&p.to_string(), &["x"]);
            assert!(
                (bound - truth).abs() / (1.0 + truth.abs()) < 1e-6,
                "trial {}: p = {}, sos {} vs sampled {}",
                trial,
                p,
                bound,
                truth
            );
        }
    }

    // Dense scan plus golden-section refinement; independent of the SOS path.
    pub fn univariate_min(p: &Polynomial, half_width: f64) -> f64 {
        let n = 20000;
        let mut best = f64::INFINITY;
        let mut best_x = 0.0;
        for i in 0..=n {
            let x = -half_width + 2.0 * half_width * i as f64 / n as f64;
            let v = p.evaluate(&[x]).unwrap();
            if v < best {
                best = v;
                best_x = x;
            }
        }
        let (mut a, mut b) = (best_x - 2.0 * half_width / n as f64, best_x + 2.0 * half_width / n as f64);
        for _ in 0..200 {
            let m1 = a + (b - a) * 0.381966;
            let m2 = b - (b - a) * 0.381966;
            if p.evaluate(&[m1]).unwrap() < p.evaluate(&[m2]).unwrap() {
                b = m2;
            } else {
                a = m1;
            }
        }
        p.evaluate(&[(a + b) / 2.0]).unwrap().min(best)
    }
}
