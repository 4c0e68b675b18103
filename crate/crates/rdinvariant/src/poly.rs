//! Sparse multivariate polynomial arithmetic over f64 coefficients.
//!
//! Representation: terms stored as a map from exponent tuples to coefficients,
//! keyed in graded lexicographic order. Every polynomial carries its ambient
//! variable list; operations between polynomials require identical lists.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

/// Coefficients with absolute value below this are dropped after arithmetic.
pub const COEFF_EPS: f64 = 1e-14;

/// Simplices with volume below this fraction of the bounding-box volume are
/// rejected as degenerate.
pub const SIMPLEX_DEGENERACY_TOL: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum PolyError {
    #[error("variable lists differ: [{0}] vs [{1}]")]
    VarMismatch(String, String),
    #[error("unknown variable `{0}`")]
    UnknownVariable(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("degenerate region: {0}")]
    DegenerateRegion(String),
    #[error("empty point list")]
    EmptyPointList,
    #[error("parse error at position {pos}: {msg}")]
    Parse { pos: usize, msg: String },
}

/// Exponent tuple, one entry per ambient variable. Ordered graded-lex.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Monomial(pub Vec<u32>);

impl Monomial {
    pub fn new(exps: Vec<u32>) -> Self {
        Monomial(exps)
    }

    pub fn constant(nvars: usize) -> Self {
        Monomial(vec![0; nvars])
    }

    pub fn total_degree(&self) -> u32 {
        self.0.iter().sum()
    }

    pub fn mul(&self, other: &Monomial) -> Monomial {
        Monomial(
            self.0
                .iter()
                .zip(&other.0)
                .map(|(a, b)| a + b)
                .collect(),
        )
    }

    pub fn eval(&self, point: &[f64]) -> f64 {
        self.0
            .iter()
            .zip(point)
            .map(|(&e, &x)| x.powi(e as i32))
            .product()
    }
}

impl PartialOrd for Monomial {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Monomial {
    fn cmp(&self, other: &Self) -> Ordering {
        self.total_degree()
            .cmp(&other.total_degree())
            .then_with(|| self.0.cmp(&other.0))
    }
}

/// Sparse multivariate polynomial with a fixed ambient variable list.
#[derive(Debug, Clone, PartialEq)]
pub struct Polynomial {
    vars: Vec<String>,
    terms: BTreeMap<Monomial, f64>,
}

impl Polynomial {
    pub fn zero(vars: &[&str]) -> Self {
        Polynomial {
            vars: vars.iter().map(|s| s.to_string()).collect(),
            terms: BTreeMap::new(),
        }
    }

    pub fn zero_owned(vars: Vec<String>) -> Self {
        Polynomial {
            vars,
            terms: BTreeMap::new(),
        }
    }

    pub fn constant(vars: &[&str], c: f64) -> Self {
        let mut p = Self::zero(vars);
        if c.abs() >= COEFF_EPS {
            p.terms.insert(Monomial::constant(vars.len()), c);
        }
        p
    }

    /// The polynomial `name` as an element of the ambient ring.
    pub fn var(vars: &[&str], name: &str) -> Result<Self, PolyError> {
        let idx = vars
            .iter()
            .position(|v| *v == name)
            .ok_or_else(|| PolyError::UnknownVariable(name.to_string()))?;
        let mut exps = vec![0u32; vars.len()];
        exps[idx] = 1;
        let mut p = Self::zero(vars);
        p.terms.insert(Monomial(exps), 1.0);
        Ok(p)
    }

    pub fn from_terms(vars: &[&str], terms: Vec<(Vec<u32>, f64)>) -> Self {
        let mut p = Self::zero(vars);
        for (exps, c) in terms {
            assert_eq!(exps.len(), vars.len());
            *p.terms.entry(Monomial(exps)).or_insert(0.0) += c;
        }
        p.normalize();
        p
    }

    pub fn vars(&self) -> &[String] {
        &self.vars
    }

    pub fn nvars(&self) -> usize {
        self.vars.len()
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Monomial, f64)> {
        self.terms.iter().map(|(m, &c)| (m, c))
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn coeff(&self, m: &Monomial) -> f64 {
        self.terms.get(m).copied().unwrap_or(0.0)
    }

    pub fn set_coeff(&mut self, m: Monomial, c: f64) {
        if c.abs() < COEFF_EPS {
            self.terms.remove(&m);
        } else {
            self.terms.insert(m, c);
        }
    }

    /// Max total degree over stored terms; 0 for the zero polynomial.
    pub fn degree(&self) -> u32 {
        self.terms
            .keys()
            .map(|m| m.total_degree())
            .max()
            .unwrap_or(0)
    }

    /// Max exponent of a single variable over stored terms.
    pub fn degree_in(&self, var_idx: usize) -> u32 {
        self.terms.keys().map(|m| m.0[var_idx]).max().unwrap_or(0)
    }

    fn normalize(&mut self) {
        self.terms.retain(|_, c| c.abs() >= COEFF_EPS);
    }

    fn check_vars(&self, other: &Polynomial) -> Result<(), PolyError> {
        if self.vars != other.vars {
            return Err(PolyError::VarMismatch(
                self.vars.join(","),
                other.vars.join(","),
            ));
        }
        Ok(())
    }

    pub fn add(&self, other: &Polynomial) -> Result<Polynomial, PolyError> {
        self.check_vars(other)?;
        let mut out = self.clone();
        for (m, &c) in &other.terms {
            *out.terms.entry(m.clone()).or_insert(0.0) += c;
        }
        out.normalize();
        Ok(out)
    }

    pub fn sub(&self, other: &Polynomial) -> Result<Polynomial, PolyError> {
        self.add(&other.neg())
    }

    pub fn neg(&self) -> Polynomial {
        let mut out = self.clone();
        for c in out.terms.values_mut() {
            *c = -*c;
        }
        out
    }

    pub fn scale(&self, k: f64) -> Polynomial {
        let mut out = self.clone();
        for c in out.terms.values_mut() {
            *c *= k;
        }
        out.normalize();
        out
    }

    pub fn mul(&self, other: &Polynomial) -> Result<Polynomial, PolyError> {
        self.check_vars(other)?;
        let mut out = Self::zero_owned(self.vars.clone());
        for (ma, &ca) in &self.terms {
            for (mb, &cb) in &other.terms {
                *out.terms.entry(ma.mul(mb)).or_insert(0.0) += ca * cb;
            }
        }
        out.normalize();
        Ok(out)
    }

    pub fn pow(&self, k: u32) -> Result<Polynomial, PolyError> {
        let mut out = Self::constant_owned(self.vars.clone(), 1.0);
        for _ in 0..k {
            out = out.mul(self)?;
        }
        Ok(out)
    }

    fn constant_owned(vars: Vec<String>, c: f64) -> Self {
        let n = vars.len();
        let mut p = Self::zero_owned(vars);
        if c.abs() >= COEFF_EPS {
            p.terms.insert(Monomial::constant(n), c);
        }
        p
    }

    pub fn evaluate(&self, point: &[f64]) -> Result<f64, PolyError> {
        if point.len() != self.vars.len() {
            return Err(PolyError::DimensionMismatch {
                expected: self.vars.len(),
                got: point.len(),
            });
        }
        Ok(self
            .terms
            .iter()
            .map(|(m, &c)| c * m.eval(point))
            .sum())
    }

    /// Polynomial composition. Bound variables are replaced by the given
    /// polynomials (which must live in the target ambient ring); unbound
    /// variables pass through as themselves in the target ring.
    ///
    /// All substituted polynomials must share one variable list, which becomes
    /// the variable list of the result. Unbound variables of `self` must exist
    /// in the target list.
    pub fn substitute(
        &self,
        bindings: &BTreeMap<String, Polynomial>,
    ) -> Result<Polynomial, PolyError> {
        for name in bindings.keys() {
            if !self.vars.contains(name) {
                return Err(PolyError::UnknownVariable(name.clone()));
            }
        }
        let target_vars: Vec<String> = match bindings.values().next() {
            Some(p) => p.vars.clone(),
            None => return Ok(self.clone()),
        };
        for p in bindings.values() {
            if p.vars != target_vars {
                return Err(PolyError::VarMismatch(
                    target_vars.join(","),
                    p.vars.join(","),
                ));
            }
        }
        // Per-variable images in the target ring.
        let mut images: Vec<Polynomial> = Vec::with_capacity(self.vars.len());
        for v in &self.vars {
            match bindings.get(v) {
                Some(p) => images.push(p.clone()),
                None => {
                    let refs: Vec<&str> = target_vars.iter().map(|s| s.as_str()).collect();
                    images.push(Polynomial::var(&refs, v)?);
                }
            }
        }
        let mut out = Polynomial::zero_owned(target_vars.clone());
        for (m, &c) in &self.terms {
            let mut term = Polynomial::constant_owned(target_vars.clone(), c);
            for (i, &e) in m.0.iter().enumerate() {
                if e > 0 {
                    term = term.mul(&images[i].pow(e)?)?;
                }
            }
            out = out.add(&term)?;
        }
        Ok(out)
    }

    /// Formal partial derivative with respect to one ambient variable.
    pub fn differentiate(&self, var: &str) -> Result<Polynomial, PolyError> {
        let idx = self
            .vars
            .iter()
            .position(|v| v == var)
            .ok_or_else(|| PolyError::UnknownVariable(var.to_string()))?;
        let mut out = Polynomial::zero_owned(self.vars.clone());
        for (m, &c) in &self.terms {
            let e = m.0[idx];
            if e > 0 {
                let mut exps = m.0.clone();
                exps[idx] = e - 1;
                *out.terms.entry(Monomial(exps)).or_insert(0.0) += c * e as f64;
            }
        }
        out.normalize();
        Ok(out)
    }

    /// Exact definite integral over a region of the same dimension.
    pub fn integrate(&self, region: &Region) -> Result<f64, PolyError> {
        region.check_nondegenerate()?;
        if region.dim() != self.vars.len() {
            return Err(PolyError::DimensionMismatch {
                expected: self.vars.len(),
                got: region.dim(),
            });
        }
        let mut total = 0.0;
        for (m, &c) in &self.terms {
            total += c * region.monomial_integral(m)?;
        }
        Ok(total)
    }
}

impl fmt::Display for Polynomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        // Highest-degree terms first, matching the usual hand-written order.
        let mut first = true;
        for (m, &c) in self.terms.iter().rev() {
            let mag = c.abs();
            if first {
                if c < 0.0 {
                    write!(f, "-")?;
                }
                first = false;
            } else if c < 0.0 {
                write!(f, " - ")?;
            } else {
                write!(f, " + ")?;
            }
            let is_const = m.total_degree() == 0;
            let coeff_shown = (mag - 1.0).abs() >= COEFF_EPS || is_const;
            if coeff_shown {
                write!(f, "{}", fmt_f64(mag))?;
            }
            let mut printed_var = false;
            for (i, &e) in m.0.iter().enumerate() {
                if e == 0 {
                    continue;
                }
                if coeff_shown || printed_var {
                    write!(f, "*")?;
                }
                write!(f, "{}", self.vars[i])?;
                if e > 1 {
                    write!(f, "^{}", e)?;
                }
                printed_var = true;
            }
        }
        Ok(())
    }
}

fn fmt_f64(v: f64) -> String {
    // Shortest representation that round-trips.
    let s = format!("{}", v);
    if s.parse::<f64>() == Ok(v) {
        s
    } else {
        format!("{:.17e}", v)
    }
}

/// Integration / tessellation region.
#[derive(Debug, Clone, PartialEq)]
pub enum Region {
    Box {
        lower: Vec<f64>,
        upper: Vec<f64>,
    },
    Simplex {
        /// p+1 vertices in R^p.
        vertices: Vec<Vec<f64>>,
    },
}

impl Region {
    pub fn interval(lo: f64, hi: f64) -> Region {
        Region::Box {
            lower: vec![lo],
            upper: vec![hi],
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Region::Box { lower, .. } => lower.len(),
            Region::Simplex { vertices } => vertices.len().saturating_sub(1),
        }
    }

    pub fn check_nondegenerate(&self) -> Result<(), PolyError> {
        match self {
            Region::Box { lower, upper } => {
                if lower.len() != upper.len() || lower.is_empty() {
                    return Err(PolyError::DegenerateRegion("empty box".into()));
                }
                for (l, u) in lower.iter().zip(upper) {
                    if !(l <= u) {
                        return Err(PolyError::DegenerateRegion(format!(
                            "box bound {} > {}",
                            l, u
                        )));
                    }
                }
                Ok(())
            }
            Region::Simplex { vertices } => {
                let p = self.dim();
                if vertices.len() != p + 1 || p == 0 {
                    return Err(PolyError::DegenerateRegion(
                        "simplex needs p+1 vertices in R^p".into(),
                    ));
                }
                let vol = self.volume();
                let bb = self.bounding_box_volume();
                if vol <= SIMPLEX_DEGENERACY_TOL * bb.max(f64::MIN_POSITIVE) {
                    return Err(PolyError::DegenerateRegion(format!(
                        "simplex volume {} below degeneracy tolerance",
                        vol
                    )));
                }
                Ok(())
            }
        }
    }

    pub fn volume(&self) -> f64 {
        match self {
            Region::Box { lower, upper } => {
                lower.iter().zip(upper).map(|(l, u)| u - l).product()
            }
            Region::Simplex { vertices } => {
                let p = self.dim();
                let mut det = nalgebra::DMatrix::zeros(p, p);
                for j in 0..p {
                    for i in 0..p {
                        det[(i, j)] = vertices[j + 1][i] - vertices[0][i];
                    }
                }
                det.determinant().abs() / factorial(p as u32)
            }
        }
    }

    fn bounding_box_volume(&self) -> f64 {
        match self {
            Region::Box { .. } => self.volume(),
            Region::Simplex { vertices } => {
                let p = self.dim();
                (0..p)
                    .map(|i| {
                        let lo = vertices.iter().map(|v| v[i]).fold(f64::INFINITY, f64::min);
                        let hi = vertices
                            .iter()
                            .map(|v| v[i])
                            .fold(f64::NEG_INFINITY, f64::max);
                        hi - lo
                    })
                    .product()
            }
        }
    }

    pub fn contains(&self, point: &[f64], tol: f64) -> bool {
        match self {
            Region::Box { lower, upper } => point
                .iter()
                .zip(lower.iter().zip(upper))
                .all(|(&x, (&l, &u))| x >= l - tol && x <= u + tol),
            Region::Simplex { vertices } => {
                // Barycentric coordinates via the affine system.
                let p = self.dim();
                let mut mat = nalgebra::DMatrix::zeros(p, p);
                let mut rhs = nalgebra::DVector::zeros(p);
                for j in 0..p {
                    for i in 0..p {
                        mat[(i, j)] = vertices[j + 1][i] - vertices[0][i];
                    }
                }
                for i in 0..p {
                    rhs[i] = point[i] - vertices[0][i];
                }
                match mat.lu().solve(&rhs) {
                    Some(t) => {
                        let sum: f64 = t.iter().sum();
                        t.iter().all(|&ti| ti >= -tol) && sum <= 1.0 + tol
                    }
                    None => false,
                }
            }
        }
    }

    pub fn center(&self) -> Vec<f64> {
        match self {
            Region::Box { lower, upper } => lower
                .iter()
                .zip(upper)
                .map(|(l, u)| 0.5 * (l + u))
                .collect(),
            Region::Simplex { vertices } => {
                let p = self.dim();
                let n = vertices.len() as f64;
                (0..p)
                    .map(|i| vertices.iter().map(|v| v[i]).sum::<f64>() / n)
                    .collect()
            }
        }
    }

    /// Exact integral of a single monomial over the region.
    ///
    /// Boxes use the per-axis power rule. Simplices map affinely onto the unit
    /// simplex and use the closed-form Dirichlet integral
    /// `int t^b dt = prod(b_i!) / (p + sum b_i)!`.
    pub fn monomial_integral(&self, m: &Monomial) -> Result<f64, PolyError> {
        match self {
            Region::Box { lower, upper } => {
                let mut v = 1.0;
                for ((&e, &l), &u) in m.0.iter().zip(lower).zip(upper) {
                    let k = e as i32 + 1;
                    v *= (u.powi(k) - l.powi(k)) / k as f64;
                }
                Ok(v)
            }
            Region::Simplex { vertices } => {
                let p = self.dim();
                // Work in fresh variables t1..tp over the unit simplex.
                let tnames: Vec<String> = (1..=p).map(|i| format!("t{}", i)).collect();
                let trefs: Vec<&str> = tnames.iter().map(|s| s.as_str()).collect();
                // x_i = v0_i + sum_j (vj_i - v0_i) t_j
                let mut images = Vec::with_capacity(p);
                for i in 0..p {
                    let mut img = Polynomial::constant(&trefs, vertices[0][i]);
                    for j in 0..p {
                        let mut exps = vec![0u32; p];
                        exps[j] = 1;
                        img = img.add(&Polynomial::from_terms(
                            &trefs,
                            vec![(exps, vertices[j + 1][i] - vertices[0][i])],
                        ))?;
                    }
                    images.push(img);
                }
                let mut composed = Polynomial::constant(&trefs, 1.0);
                for (i, &e) in m.0.iter().enumerate() {
                    if e > 0 {
                        composed = composed.mul(&images[i].pow(e)?)?;
                    }
                }
                let jac = {
                    let mut det = nalgebra::DMatrix::zeros(p, p);
                    for j in 0..p {
                        for i in 0..p {
                            det[(i, j)] = vertices[j + 1][i] - vertices[0][i];
                        }
                    }
                    det.determinant().abs()
                };
                let mut total = 0.0;
                for (tm, c) in composed.terms() {
                    let sum: u32 = tm.total_degree();
                    let mut val = 1.0 / factorial(sum + p as u32);
                    for &b in &tm.0 {
                        val *= factorial(b);
                    }
                    total += c * val;
                }
                Ok(total * jac)
            }
        }
    }
}

fn factorial(n: u32) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// Exact definite integrals of a list of monomials, as a vector. The objective
/// of the set-size maximization becomes this vector dotted with the unknown
/// coefficients.
pub fn moments(basis: &[Monomial], region: &Region) -> Result<Vec<f64>, PolyError> {
    region.check_nondegenerate()?;
    basis.iter().map(|m| region.monomial_integral(m)).collect()
}

/// Averaged monomial evaluations over sample points (the sampled objective).
pub fn sample_objective(points: &[Vec<f64>], basis: &[Monomial]) -> Result<Vec<f64>, PolyError> {
    if points.is_empty() {
        return Err(PolyError::EmptyPointList);
    }
    let n = points.len() as f64;
    Ok(basis
        .iter()
        .map(|m| points.iter().map(|p| m.eval(p)).sum::<f64>() / n)
        .collect())
}

/// All monomials in `nvars` variables of total degree <= max_degree, in graded
/// lexicographic order. `even_only` keeps only even total degrees.
pub fn monomials_up_to(nvars: usize, max_degree: u32, even_only: bool) -> Vec<Monomial> {
    let mut out = Vec::new();
    let mut current = vec![0u32; nvars];
    gen_monomials(&mut current, 0, max_degree, &mut out);
    if even_only {
        out.retain(|m| m.total_degree() % 2 == 0);
    }
    out.sort();
    out
}

fn gen_monomials(current: &mut Vec<u32>, idx: usize, budget: u32, out: &mut Vec<Monomial>) {
    if idx == current.len() {
        out.push(Monomial(current.clone()));
        return;
    }
    for e in 0..=budget {
        current[idx] = e;
        gen_monomials(current, idx + 1, budget - e, out);
    }
    current[idx] = 0;
}

// ---------------------------------------------------------------------------
// Text format: sum of terms like `x2 - x1^3 + 3*x1^2 + 10`.
// ---------------------------------------------------------------------------

/// Parse a polynomial in the human-readable sum-of-terms format against a
/// declared variable order. Supports `+ - * ^`, parentheses, and float
/// literals. Round-trips with the Display implementation.
pub fn parse_polynomial(input: &str, vars: &[&str]) -> Result<Polynomial, PolyError> {
    let mut parser = Parser {
        chars: input.char_indices().collect(),
        pos: 0,
        vars,
    };
    let p = parser.parse_expr()?;
    parser.skip_ws();
    if parser.pos < parser.chars.len() {
        return Err(PolyError::Parse {
            pos: parser.chars[parser.pos].0,
            msg: format!("unexpected `{}`", parser.chars[parser.pos].1),
        });
    }
    Ok(p)
}

struct Parser<'a> {
    chars: Vec<(usize, char)>,
    pos: usize,
    vars: &'a [&'a str],
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).map(|&(_, c)| c)
    }

    fn skip_ws(&mut self) {
        while matches!(self.peek(), Some(c) if c.is_whitespace()) {
            self.pos += 1;
        }
    }

    fn err(&self, msg: &str) -> PolyError {
        let pos = self
            .chars
            .get(self.pos)
            .map(|&(i, _)| i)
            .unwrap_or_else(|| self.chars.last().map(|&(i, _)| i + 1).unwrap_or(0));
        PolyError::Parse {
            pos,
            msg: msg.to_string(),
        }
    }

    // expr := term (('+' | '-') term)*
    fn parse_expr(&mut self) -> Result<Polynomial, PolyError> {
        self.skip_ws();
        let mut neg = false;
        if let Some(c) = self.peek() {
            if c == '-' {
                neg = true;
                self.pos += 1;
            } else if c == '+' {
                self.pos += 1;
            }
        }
        let mut acc = self.parse_term()?;
        if neg {
            acc = acc.neg();
        }
        loop {
            self.skip_ws();
            match self.peek() {
                Some('+') => {
                    self.pos += 1;
                    let t = self.parse_term()?;
                    acc = acc.add(&t)?;
                }
                Some('-') => {
                    self.pos += 1;
                    let t = self.parse_term()?;
                    acc = acc.sub(&t)?;
                }
                _ => break,
            }
        }
        Ok(acc)
    }

    // term := factor ('*' factor | factor)*   (juxtaposition not supported; '*' required)
    fn parse_term(&mut self) -> Result<Polynomial, PolyError> {
        let mut acc = self.parse_factor()?;
        loop {
            self.skip_ws();
            if self.peek() == Some('*') {
                self.pos += 1;
                let f = self.parse_factor()?;
                acc = acc.mul(&f)?;
            } else {
                break;
            }
        }
        Ok(acc)
    }

    // factor := atom ('^' uint)?
    fn parse_factor(&mut self) -> Result<Polynomial, PolyError> {
        let base = self.parse_atom()?;
        self.skip_ws();
        if self.peek() == Some('^') {
            self.pos += 1;
            self.skip_ws();
            let start = self.pos;
            while matches!(self.peek(), Some(c) if c.is_ascii_digit()) {
                self.pos += 1;
            }
            if self.pos == start {
                return Err(self.err("expected integer exponent"));
            }
            let digits: String = self.chars[start..self.pos].iter().map(|&(_, c)| c).collect();
            let e: u32 = digits
                .parse()
                .map_err(|_| self.err("exponent out of range"))?;
            return base.pow(e);
        }
        Ok(base)
    }

    fn parse_atom(&mut self) -> Result<Polynomial, PolyError> {
        self.skip_ws();
        match self.peek() {
            Some('(') => {
                self.pos += 1;
                let inner = self.parse_expr()?;
                self.skip_ws();
                if self.peek() != Some(')') {
                    return Err(self.err("expected `)`"));
                }
                self.pos += 1;
                Ok(inner)
            }
            Some(c) if c.is_ascii_digit() || c == '.' => {
                let start = self.pos;
                while matches!(self.peek(), Some(c) if c.is_ascii_digit() || c == '.' ) {
                    self.pos += 1;
                }
                // scientific notation
                if matches!(self.peek(), Some('e') | Some('E')) {
                    let save = self.pos;
                    self.pos += 1;
                    if matches!(self.peek(), Some('+') | Some('-')) {
                        self.pos += 1;
                    }
                    if matches!(self.peek(), Some(c) if c.is_ascii_digit()) {
                        while matches!(self.peek(), Some(c) if c.is_ascii_digit()) {
                            self.pos += 1;
                        }
                    } else {
                        self.pos = save;
                    }
                }
                let lit: String = self.chars[start..self.pos].iter().map(|&(_, c)| c).collect();
                let v: f64 = lit.parse().map_err(|_| self.err("bad number literal"))?;
                Ok(Polynomial::constant(self.vars, v))
            }
            Some(c) if c.is_alphabetic() || c == '_' => {
                let start = self.pos;
                while matches!(self.peek(), Some(c) if c.is_alphanumeric() || c == '_') {
                    self.pos += 1;
                }
                let name: String = self.chars[start..self.pos].iter().map(|&(_, c)| c).collect();
                Polynomial::var(self.vars, &name)
            }
            _ => Err(self.err("expected number, variable, or `(`")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn p(s: &str, vars: &[&str]) -> Polynomial {
        parse_polynomial(s, vars).unwrap()
    }

    #[test]
    fn add_cancellation() {
        let vars = &["x"];
        let a = p("x^2 + 1", vars);
        let b = p("-x^2 + x", vars);
        assert_eq!(a.add(&b).unwrap(), p("x + 1", vars));
    }

    #[test]
    fn add_identity() {
        let vars = &["x1", "x2"];
        let a = p("x2 - x1^3 + 3*x1^2 + 10", vars);
        let z = Polynomial::zero(vars);
        assert_eq!(a.add(&z).unwrap(), a);
    }

    #[test]
    fn mul_difference_of_squares() {
        let vars = &["x"];
        assert_eq!(
            p("x+1", vars).mul(&p("x-1", vars)).unwrap(),
            p("x^2-1", vars)
        );
    }

    #[test]
    fn mul_identity() {
        let vars = &["x", "y"];
        let a = p("3*x^2*y - y + 2", vars);
        let one = Polynomial::constant(vars, 1.0);
        assert_eq!(one.mul(&a).unwrap(), a);
    }

    #[test]
    fn cbar_squared_expansion() {
        // cbar(r) = -r^3 + 3r^2 + 10, squared; expansion checked against the
        // hand-derived closed form.
        let vars = &["r"];
        let cbar = p("-r^3 + 3*r^2 + 10", vars);
        let sq = cbar.mul(&cbar).unwrap();
        let expect = p("r^6 - 6*r^5 + 9*r^4 - 20*r^3 + 60*r^2 + 100", vars);
        let diff = sq.sub(&expect).unwrap();
        assert!(diff.is_zero(), "diff = {}", diff);
    }

    #[test]
    fn var_mismatch_errors() {
        let a = p("x", &["x"]);
        let b = p("y", &["y"]);
        assert!(matches!(a.add(&b), Err(PolyError::VarMismatch(_, _))));
    }

    #[test]
    fn evaluate_constraint_near_boundary() {
        // The admissible-reference boundary of the double-integrator case:
        // cbar(3.721) should be within 1e-2 of zero.
        let vars = &["x1", "x2"];
        let c = p("x2 - x1^3 + 3*x1^2 + 10", vars);
        // The exact root is 3.72189...; the quoted 3.721 is a truncation.
        let v = c.evaluate(&[3.721, 0.0]).unwrap();
        assert!(v.abs() < 2e-2, "c(3.721, 0) = {}", v);
    }

    #[test]
    fn evaluate_at_zero_gives_constant_term() {
        let vars = &["x", "y"];
        let a = p("x^3*y - 2*x + 7.5", vars);
        assert_relative_eq!(a.evaluate(&[0.0, 0.0]).unwrap(), 7.5);
    }

    #[test]
    fn evaluate_dimension_mismatch() {
        let a = p("x", &["x"]);
        assert!(matches!(
            a.evaluate(&[1.0, 2.0]),
            Err(PolyError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn substitute_steady_state() {
        // c(xbar_r, r): substitute x1 -> r, x2 -> 0 into the double-integrator
        // constraint and get cbar(r) = -r^3 + 3r^2 + 10.
        let vars = &["x1", "x2"];
        let c = p("x2 - x1^3 + 3*x1^2 + 10", vars);
        let rvars = &["r"];
        let mut b = BTreeMap::new();
        b.insert("x1".to_string(), p("r", rvars));
        b.insert("x2".to_string(), Polynomial::zero(rvars));
        assert_eq!(c.substitute(&b).unwrap(), p("-r^3 + 3*r^2 + 10", rvars));
    }

    #[test]
    fn substitute_empty_is_identity() {
        let a = p("x^2 - y", &["x", "y"]);
        assert_eq!(a.substitute(&BTreeMap::new()).unwrap(), a);
    }

    #[test]
    fn substitute_bowtie_projection() {
        let vars = &["x1", "x2", "x3", "x4"];
        let c = p("x1^4 + x3^4 - 10*x1^2 + x3^2 - 0.1", vars);
        let vnames = &["v1", "v2"];
        let mut b = BTreeMap::new();
        b.insert("x1".to_string(), p("v1", vnames));
        b.insert("x3".to_string(), p("v2", vnames));
        b.insert("x2".to_string(), Polynomial::zero(vnames));
        b.insert("x4".to_string(), Polynomial::zero(vnames));
        assert_eq!(
            c.substitute(&b).unwrap(),
            p("v1^4 + v2^4 - 10*v1^2 + v2^2 - 0.1", vnames)
        );
    }

    #[test]
    fn substitute_unknown_var_errors() {
        let a = p("x", &["x"]);
        let mut b = BTreeMap::new();
        b.insert("z".to_string(), p("x", &["x"]));
        assert!(matches!(
            a.substitute(&b),
            Err(PolyError::UnknownVariable(_))
        ));
    }

    #[test]
    fn differentiate_power_and_constant() {
        let vars = &["x"];
        assert_eq!(p("x^2", vars).differentiate("x").unwrap(), p("2*x", vars));
        assert!(p("5", vars).differentiate("x").unwrap().is_zero());
    }

    #[test]
    fn gradient_of_quadratic_vanishes_at_center() {
        // V = (x - xbar_r)' P (x - xbar_r) has zero gradient at x = xbar_r.
        let vars = &["x1", "x2", "r"];
        let v = p(
            "12.645*(x1-r)^2 + 0.01*(x1-r)*x2 + 0.1263*x2^2",
            vars,
        );
        for var in ["x1", "x2"] {
            let g = v.differentiate(var).unwrap();
            let val = g.evaluate(&[1.3, 0.0, 1.3]).unwrap();
            assert!(val.abs() < 1e-12, "d/d{} = {}", var, val);
        }
    }

    #[test]
    fn moments_box_symmetric() {
        let basis = vec![
            Monomial::new(vec![0]),
            Monomial::new(vec![1]),
            Monomial::new(vec![2]),
        ];
        let m = moments(&basis, &Region::interval(-1.0, 1.0)).unwrap();
        assert_relative_eq!(m[0], 2.0, epsilon = 1e-12);
        assert_relative_eq!(m[1], 0.0, epsilon = 1e-12);
        assert_relative_eq!(m[2], 2.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn moments_unit_simplex_area() {
        let simplex = Region::Simplex {
            vertices: vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]],
        };
        let m = moments(&[Monomial::new(vec![0, 0])], &simplex).unwrap();
        assert_relative_eq!(m[0], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn moments_domain_interval() {
        // int r dr over [-1.5, 3.721] = (3.721^2 - 1.5^2)/2
        let m = moments(
            &[Monomial::new(vec![1])],
            &Region::interval(-1.5, 3.721),
        )
        .unwrap();
        assert_relative_eq!(m[0], (3.721f64.powi(2) - 1.5f64.powi(2)) / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn moments_degenerate_region_errors() {
        let simplex = Region::Simplex {
            vertices: vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![2.0, 0.0]],
        };
        assert!(matches!(
            moments(&[Monomial::new(vec![0, 0])], &simplex),
            Err(PolyError::DegenerateRegion(_))
        ));
    }

    #[test]
    fn sample_objective_basic() {
        let basis = vec![Monomial::new(vec![0]), Monomial::new(vec![1])];
        let got = sample_objective(&[vec![0.0]], &basis).unwrap();
        assert_eq!(got, vec![1.0, 0.0]);

        let sq = sample_objective(&[vec![-1.0], vec![1.0]], &[Monomial::new(vec![2])]).unwrap();
        assert_relative_eq!(sq[0], 1.0);
    }

    #[test]
    fn sample_objective_empty_errors() {
        assert!(matches!(
            sample_objective(&[], &[Monomial::new(vec![0])]),
            Err(PolyError::EmptyPointList)
        ));
    }

    #[test]
    fn sample_objective_monte_carlo_mean() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let points: Vec<Vec<f64>> = (0..10_000)
            .map(|_| vec![rng.gen_range(-1.5..3.721)])
            .collect();
        let got = sample_objective(&points, &[Monomial::new(vec![1])]).unwrap();
        // exact mean of r over [-1.5, 3.721] is 1.1105
        assert!((got[0] - 1.1105).abs() < 0.05, "mean = {}", got[0]);
    }

    #[test]
    fn monomials_up_to_counts() {
        assert_eq!(monomials_up_to(1, 2, false).len(), 3);
        assert_eq!(monomials_up_to(2, 1, false).len(), 3);
        // C(6,2) = 15 monomials of degree <= 4 in 2 vars
        assert_eq!(monomials_up_to(2, 4, false).len(), 15);
        // C(6,3) = 20 monomials of degree <= 3 in 3 vars
        assert_eq!(monomials_up_to(3, 3, false).len(), 20);
    }

    #[test]
    fn parse_print_roundtrip() {
        let vars = &["x1", "x2", "r"];
        let a = p("x2 - x1^3 + 3*x1^2 + 10 - 0.5*r*x1", vars);
        let b = p(&a.to_string(), vars);
        assert_eq!(a, b);
    }

    #[test]
    fn parse_reports_position() {
        match parse_polynomial("x + @", &["x"]) {
            Err(PolyError::Parse { pos, .. }) => assert_eq!(pos, 4),
            other => panic!("expected parse error, got {:?}", other),
        }
    }

    #[test]
    fn degree_of_product() {
        let vars = &["x", "y"];
        let a = p("x^2*y + 1", vars);
        let b = p("y^3 - x", vars);
        assert_eq!(a.mul(&b).unwrap().degree(), a.degree() + b.degree());
    }
}
