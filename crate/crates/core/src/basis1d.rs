//! One-dimensional expansion bases: Lagrange-GLL nodal, standard Jacobi
//! modal, and the simultaneously diagonalized minimum-energy variants.
//!
//! Index convention for every basis of order `P`: index 0 is the vertex mode
//! at ξ = −1, index 1 the vertex mode at ξ = +1, indices `2..=P` are internal
//! (bubble) modes vanishing at both endpoints.

use std::fmt;
use std::ops::RangeInclusive;
use std::str::FromStr;

use thiserror::Error;

use crate::densela::{self, cond2_spd, spd_solve, sym_eig, DenseMatrix, LinAlgError};
use crate::quadrature::{gauss_rule, QuadratureError, QuadratureRule};

#[derive(Debug, Error)]
pub enum BasisError {
    #[error("{tag} basis needs order >= {min}, got {order}")]
    OrderTooLow {
        tag: BasisTag,
        order: usize,
        min: usize,
    },
    #[error("invalid basis parameter: {0}")]
    InvalidParameter(String),
    #[error("Lagrange nodes must be {expected} strictly ascending values, got {got:?}")]
    BadNodes { expected: usize, got: Vec<f64> },
    #[error("unknown basis kind '{0}'")]
    UnknownKind(String),
    #[error(transparent)]
    LinAlg(#[from] LinAlgError),
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
}

pub type Result<T> = std::result::Result<T, BasisError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BasisTag {
    LagrangeGll,
    ModalJacobi,
    SdmeM,
    SdmeK,
    SdmeH,
}

impl BasisTag {
    pub const ALL: [BasisTag; 5] = [
        BasisTag::LagrangeGll,
        BasisTag::ModalJacobi,
        BasisTag::SdmeM,
        BasisTag::SdmeK,
        BasisTag::SdmeH,
    ];

    /// Short label used in reports and configuration files.
    pub fn label(self) -> &'static str {
        match self {
            BasisTag::LagrangeGll => "LAGRANGE",
            BasisTag::ModalJacobi => "ST",
            BasisTag::SdmeM => "SDME_M",
            BasisTag::SdmeK => "SDME_K",
            BasisTag::SdmeH => "SDME_H",
        }
    }

    pub fn is_sdme(self) -> bool {
        matches!(self, BasisTag::SdmeM | BasisTag::SdmeK | BasisTag::SdmeH)
    }
}

impl fmt::Display for BasisTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for BasisTag {
    type Err = BasisError;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s
            .chars()
            .filter(|c| !matches!(c, '-' | '_' | ' '))
            .collect::<String>()
            .to_ascii_uppercase();
        match norm.as_str() {
            "LAGRANGE" | "LAGRANGEGLL" | "NODAL" => Ok(BasisTag::LagrangeGll),
            "ST" | "MODAL" | "MODALJACOBI" | "STANDARD" => Ok(BasisTag::ModalJacobi),
            "SDMEM" => Ok(BasisTag::SdmeM),
            "SDMEK" => Ok(BasisTag::SdmeK),
            "SDMEH" => Ok(BasisTag::SdmeH),
            _ => Err(BasisError::UnknownKind(s.to_string())),
        }
    }
}

pub const DEFAULT_JACOBI_WEIGHT: f64 = 1.0;
pub const DEFAULT_K: f64 = 0.5;
pub const DEFAULT_LAMBDA: f64 = 100.0;

/// Basis family plus its construction parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BasisKind {
    pub tag: BasisTag,
    pub jacobi_alpha: f64,
    pub jacobi_beta: f64,
    /// Exponent splitting the diagonal between mass (Λ^-k) and stiffness (Λ^(1-k)).
    pub k: f64,
    /// Helmholtz weight for SDME-H, which extends against K + λM.
    pub lambda: f64,
}

impl BasisKind {
    pub fn new(tag: BasisTag) -> Self {
        BasisKind {
            tag,
            jacobi_alpha: DEFAULT_JACOBI_WEIGHT,
            jacobi_beta: DEFAULT_JACOBI_WEIGHT,
            k: DEFAULT_K,
            lambda: DEFAULT_LAMBDA,
        }
    }

    pub fn with_k(mut self, k: f64) -> Self {
        self.k = k;
        self
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn with_jacobi(mut self, alpha: f64, beta: f64) -> Self {
        self.jacobi_alpha = alpha;
        self.jacobi_beta = beta;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.k) {
            return Err(BasisError::InvalidParameter(format!(
                "k must lie in [0, 1], got {}",
                self.k
            )));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(BasisError::InvalidParameter(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        if !(self.jacobi_alpha > -1.0 && self.jacobi_beta > -1.0) {
            return Err(BasisError::InvalidParameter(format!(
                "Jacobi weights must exceed -1, got ({}, {})",
                self.jacobi_alpha, self.jacobi_beta
            )));
        }
        Ok(())
    }

    fn symmetric_weights(&self) -> bool {
        self.jacobi_alpha == self.jacobi_beta
    }
}

/// Jacobi polynomial value by the three-term recurrence.
pub fn jacobi_eval(n: usize, alpha: f64, beta: f64, x: f64) -> f64 {
    if n == 0 {
        return 1.0;
    }
    let ab = alpha + beta;
    let mut p0 = 1.0;
    let mut p1 = (alpha + 1.0) + 0.5 * (ab + 2.0) * (x - 1.0);
    for k in 2..=n {
        let kf = k as f64;
        let c = 2.0 * kf + ab;
        let a1 = 2.0 * kf * (kf + ab) * (c - 2.0);
        let a2 = (c - 1.0) * (alpha * alpha - beta * beta);
        let a3 = (c - 2.0) * (c - 1.0) * c;
        let a4 = 2.0 * (kf + alpha - 1.0) * (kf + beta - 1.0) * c;
        let p2 = ((a2 + a3 * x) * p1 - a4 * p0) / a1;
        p0 = p1;
        p1 = p2;
    }
    p1
}

/// Derivative of the Jacobi polynomial.
pub fn jacobi_deriv(n: usize, alpha: f64, beta: f64, x: f64) -> f64 {
    if n == 0 {
        return 0.0;
    }
    0.5 * (n as f64 + alpha + beta + 1.0) * jacobi_eval(n - 1, alpha + 1.0, beta + 1.0, x)
}

/// Values and derivatives of the standard modal functions of order `p` at `x`.
pub fn modal_values(p: usize, alpha: f64, beta: f64, x: f64) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; p + 1];
    let mut d = vec![0.0; p + 1];
    v[0] = 0.5 * (1.0 - x);
    d[0] = -0.5;
    if p >= 1 {
        v[1] = 0.5 * (1.0 + x);
        d[1] = 0.5;
    }
    let bubble = 0.25 * (1.0 - x * x);
    let dbubble = -0.5 * x;
    for i in 2..=p {
        let j = jacobi_eval(i - 2, alpha, beta, x);
        let dj = jacobi_deriv(i - 2, alpha, beta, x);
        v[i] = bubble * j;
        d[i] = dbubble * j + bubble * dj;
    }
    (v, d)
}

fn lagrange_values(nodes: &[f64], x: f64) -> (Vec<f64>, Vec<f64>) {
    let n = nodes.len();
    let mut v = vec![0.0; n];
    let mut d = vec![0.0; n];
    for a in 0..n {
        let mut prod = 1.0;
        for b in 0..n {
            if b != a {
                prod *= (x - nodes[b]) / (nodes[a] - nodes[b]);
            }
        }
        v[a] = prod;
        let mut sum = 0.0;
        for m in 0..n {
            if m == a {
                continue;
            }
            let mut term = 1.0 / (nodes[a] - nodes[m]);
            for b in 0..n {
                if b != a && b != m {
                    term *= (x - nodes[b]) / (nodes[a] - nodes[b]);
                }
            }
            sum += term;
        }
        d[a] = sum;
    }
    (v, d)
}

/// Function values and derivatives at the points of a rule; row = function,
/// column = point.
#[derive(Debug, Clone)]
pub struct Tabulation {
    pub values: DenseMatrix,
    pub derivs: DenseMatrix,
}

#[derive(Debug, Clone)]
pub struct Basis1D {
    order: usize,
    kind: BasisKind,
    /// Row `a` holds the standard-modal coefficients of function `a`.
    transform: DenseMatrix,
    /// Lagrange nodes in basis-index order; evaluated by the product formula.
    nodes: Option<Vec<f64>>,
    /// Diagonalizing eigenvalues of the internal blocks (SDME kinds only).
    sd_eigenvalues: Vec<f64>,
}

impl Basis1D {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn kind(&self) -> &BasisKind {
        &self.kind
    }

    pub fn len(&self) -> usize {
        self.order + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn transform(&self) -> &DenseMatrix {
        &self.transform
    }

    pub fn sd_eigenvalues(&self) -> &[f64] {
        &self.sd_eigenvalues
    }

    pub fn boundary_index(&self) -> [usize; 2] {
        [0, 1]
    }

    pub fn internal_index(&self) -> RangeInclusive<usize> {
        2..=self.order
    }

    pub fn is_internal(idx: usize) -> bool {
        idx >= 2
    }

    /// Values and derivatives of all functions at `x`.
    pub fn eval(&self, x: f64) -> (Vec<f64>, Vec<f64>) {
        if let Some(nodes) = &self.nodes {
            return lagrange_values(nodes, x);
        }
        let (sv, sd) = modal_values(self.order, self.kind.jacobi_alpha, self.kind.jacobi_beta, x);
        if self.kind.tag == BasisTag::ModalJacobi {
            return (sv, sd);
        }
        (self.transform.matvec(&sv), self.transform.matvec(&sd))
    }

    pub fn tabulate(&self, points: &[f64]) -> Tabulation {
        let n = self.len();
        let q = points.len();
        let mut values = DenseMatrix::zeros(n, q);
        let mut derivs = DenseMatrix::zeros(n, q);
        for (c, &x) in points.iter().enumerate() {
            let (v, d) = self.eval(x);
            for a in 0..n {
                values[(a, c)] = v[a];
                derivs[(a, c)] = d[a];
            }
        }
        Tabulation { values, derivs }
    }

    /// Reflection map: `φ_a(−ξ) = sign · φ_{target}(ξ)` for each index `a`.
    ///
    /// Returns `None` when the basis has no such structure (unequal Jacobi
    /// weights for a modal-family basis).
    pub fn reversal(&self) -> Option<Vec<(usize, f64)>> {
        let p = self.order;
        let mut map = Vec::with_capacity(p + 1);
        map.push((1, 1.0));
        map.push((0, 1.0));
        if self.nodes.is_some() {
            for a in 2..=p {
                map.push((p + 2 - a, 1.0));
            }
            return Some(map);
        }
        if !self.kind.symmetric_weights() {
            return None;
        }
        for a in 2..=p {
            map.push((a, if a % 2 == 0 { 1.0 } else { -1.0 }));
        }
        Some(map)
    }
}

/// Standard modal basis of order `p`.
pub fn modal_basis(p: usize, alpha: f64, beta: f64) -> Result<Basis1D> {
    let kind = BasisKind::new(BasisTag::ModalJacobi).with_jacobi(alpha, beta);
    kind.validate()?;
    if p < 1 {
        return Err(BasisError::OrderTooLow {
            tag: kind.tag,
            order: p,
            min: 1,
        });
    }
    Ok(Basis1D {
        order: p,
        kind,
        transform: DenseMatrix::identity(p + 1),
        nodes: None,
        sd_eigenvalues: Vec::new(),
    })
}

/// Lagrange basis on ascending nodes (first and last at ∓1). The transform
/// is expressed against the standard modal basis with weights `(alpha, beta)`.
pub fn lagrange_basis(p: usize, ascending_nodes: &[f64], alpha: f64, beta: f64) -> Result<Basis1D> {
    let kind = BasisKind::new(BasisTag::LagrangeGll).with_jacobi(alpha, beta);
    kind.validate()?;
    if p < 1 {
        return Err(BasisError::OrderTooLow {
            tag: kind.tag,
            order: p,
            min: 1,
        });
    }
    let ok = ascending_nodes.len() == p + 1
        && ascending_nodes.windows(2).all(|w| w[0] < w[1])
        && ascending_nodes.iter().all(|x| x.is_finite());
    if !ok {
        return Err(BasisError::BadNodes {
            expected: p + 1,
            got: ascending_nodes.to_vec(),
        });
    }
    let mut nodes = Vec::with_capacity(p + 1);
    nodes.push(ascending_nodes[0]);
    nodes.push(ascending_nodes[p]);
    nodes.extend_from_slice(&ascending_nodes[1..p]);
    // Modal values at the nodes: psi[b][c] = ψ_b(node_c). Lagrange functions
    // satisfy T·psi = I.
    let mut psi = DenseMatrix::zeros(p + 1, p + 1);
    for (c, &x) in nodes.iter().enumerate() {
        let (v, _) = modal_values(p, alpha, beta, x);
        for b in 0..=p {
            psi[(b, c)] = v[b];
        }
    }
    let transform = densela::inverse(&psi)?;
    Ok(Basis1D {
        order: p,
        kind,
        transform,
        nodes: Some(nodes),
        sd_eigenvalues: Vec::new(),
    })
}

/// 1D mass, stiffness and effective stiffness `K + λM`.
#[derive(Debug, Clone)]
pub struct Matrices1D {
    pub mass: DenseMatrix,
    pub stiffness: DenseMatrix,
    pub effective: DenseMatrix,
}

pub fn matrices_1d(basis: &Basis1D, rule: &QuadratureRule, lambda: f64) -> Matrices1D {
    if rule.exactness() < 2 * basis.order() {
        log::warn!(
            "{}-point rule integrates degree {} exactly; order {} mass needs {}",
            rule.len(),
            rule.exactness(),
            basis.order(),
            2 * basis.order()
        );
    }
    let tab = basis.tabulate(&rule.points);
    let n = basis.len();
    let mut mass = DenseMatrix::zeros(n, n);
    let mut stiffness = DenseMatrix::zeros(n, n);
    for a in 0..n {
        for b in a..n {
            let mut m = 0.0;
            let mut k = 0.0;
            for (c, w) in rule.weights.iter().enumerate() {
                m += w * tab.values[(a, c)] * tab.values[(b, c)];
                k += w * tab.derivs[(a, c)] * tab.derivs[(b, c)];
            }
            mass[(a, b)] = m;
            mass[(b, a)] = m;
            stiffness[(a, b)] = k;
            stiffness[(b, a)] = k;
        }
    }
    let mut effective = stiffness.clone();
    effective.add_scaled(lambda, &mass);
    Matrices1D {
        mass,
        stiffness,
        effective,
    }
}

/// Simultaneous diagonalization of SPD internal blocks.
///
/// Returns `Y` (rows = new modes in terms of the old internal modes) and the
/// eigenvalues `Λ_S` with `Y M Yᵀ = Λ_S^{-k}` and `Y K Yᵀ = Λ_S^{1-k}`.
pub fn simultaneous_diagonalize(
    m_ii: &DenseMatrix,
    k_ii: &DenseMatrix,
    k: f64,
) -> Result<(DenseMatrix, Vec<f64>)> {
    let n = m_ii.rows();
    if k_ii.rows() != n || !m_ii.is_square() || !k_ii.is_square() {
        return Err(LinAlgError::DimensionMismatch(format!(
            "internal blocks {}x{} and {}x{}",
            m_ii.rows(),
            m_ii.cols(),
            k_ii.rows(),
            k_ii.cols()
        ))
        .into());
    }
    let em = sym_eig(m_ii)?;
    if let Some((i, &v)) = em.values.iter().enumerate().find(|(_, v)| **v <= 0.0) {
        return Err(LinAlgError::NotSpd { pivot: i, value: v }.into());
    }
    // B = X Λ_M^{-1/2}
    let mut b = em.vectors.clone();
    for j in 0..n {
        let s = 1.0 / em.values[j].sqrt();
        for i in 0..n {
            b[(i, j)] *= s;
        }
    }
    let mut l = b.tr_matmul(&k_ii.matmul(&b));
    l.symmetrize();
    let es = sym_eig(&l)?;
    if let Some((i, &v)) = es.values.iter().enumerate().find(|(_, v)| **v <= 0.0) {
        return Err(LinAlgError::NotSpd { pivot: i, value: v }.into());
    }
    let mut bz = b.matmul(&es.vectors);
    for j in 0..n {
        let s = es.values[j].powf(-0.5 * k);
        for i in 0..n {
            bz[(i, j)] *= s;
        }
    }
    Ok((bz.transpose(), es.values))
}

/// Simultaneous diagonalization performed separately on the even and odd
/// internal slots, so each new mode keeps the reflection parity of its slot.
/// Internal slot `j` corresponds to 1D index `j + 2`.
pub fn simultaneous_diagonalize_parity(
    m_ii: &DenseMatrix,
    k_ii: &DenseMatrix,
    k: f64,
) -> Result<(DenseMatrix, Vec<f64>)> {
    let n = m_ii.rows();
    let mut y = DenseMatrix::zeros(n, n);
    let mut lambda = vec![0.0; n];
    for parity in 0..2 {
        let idx: Vec<usize> = (0..n).filter(|j| j % 2 == parity).collect();
        if idx.is_empty() {
            continue;
        }
        let (ys, ls) = simultaneous_diagonalize(
            &m_ii.select(&idx, &idx),
            &k_ii.select(&idx, &idx),
            k,
        )?;
        for (r, &slot) in idx.iter().enumerate() {
            lambda[slot] = ls[r];
            for (c, &col) in idx.iter().enumerate() {
                y[(slot, col)] = ys[(r, c)];
            }
        }
    }
    Ok((y, lambda))
}

/// Minimum-energy coefficients `coupling · internal⁻¹`.
pub fn minimum_energy_coeffs(coupling: &DenseMatrix, internal: &DenseMatrix) -> Result<DenseMatrix> {
    let x = spd_solve(internal, &coupling.transpose())?;
    Ok(x.transpose())
}

/// Builds a basis of the requested kind; standard matrices needed by the
/// SDME kinds are integrated with `rule`.
pub fn build_basis(p: usize, kind: BasisKind, rule: &QuadratureRule) -> Result<Basis1D> {
    kind.validate()?;
    match kind.tag {
        BasisTag::ModalJacobi => {
            let mut b = modal_basis(p, kind.jacobi_alpha, kind.jacobi_beta)?;
            b.kind = kind;
            Ok(b)
        }
        BasisTag::LagrangeGll => {
            if p < 1 {
                return Err(BasisError::OrderTooLow {
                    tag: kind.tag,
                    order: p,
                    min: 1,
                });
            }
            let gll = crate::quadrature::gll_rule(p + 1)?;
            let mut b = lagrange_basis(p, &gll.points, kind.jacobi_alpha, kind.jacobi_beta)?;
            b.kind = kind;
            Ok(b)
        }
        BasisTag::SdmeM | BasisTag::SdmeK | BasisTag::SdmeH => build_sdme(p, kind, rule),
    }
}

/// Builds a basis using the default `(P+2)`-point Gauss rule.
pub fn basis(p: usize, kind: BasisKind) -> Result<Basis1D> {
    build_basis(p, kind, &gauss_rule(p + 2)?)
}

fn build_sdme(p: usize, kind: BasisKind, rule: &QuadratureRule) -> Result<Basis1D> {
    if p < 2 {
        return Err(BasisError::OrderTooLow {
            tag: kind.tag,
            order: p,
            min: 2,
        });
    }
    let std = modal_basis(p, kind.jacobi_alpha, kind.jacobi_beta)?;
    let mats = matrices_1d(&std, rule, 0.0);
    let vert = [0usize, 1];
    let int: Vec<usize> = (2..=p).collect();
    let m_ii = mats.mass.select(&int, &int);
    let k_ii = mats.stiffness.select(&int, &int);
    let (y, lambda_s) = if kind.symmetric_weights() {
        simultaneous_diagonalize_parity(&m_ii, &k_ii, kind.k)?
    } else {
        simultaneous_diagonalize(&m_ii, &k_ii, kind.k)?
    };
    let norm = match kind.tag {
        BasisTag::SdmeM => mats.mass.clone(),
        BasisTag::SdmeK => mats.stiffness.clone(),
        _ => {
            let mut h = mats.stiffness.clone();
            h.add_scaled(kind.lambda, &mats.mass);
            h
        }
    };
    // Extension in the diagonalized internal coordinates.
    let a_vi = norm.select(&vert, &int).matmul_tr(&y);
    let mut a_ii = y.matmul(&norm.select(&int, &int)).matmul_tr(&y);
    a_ii.symmetrize();
    let alpha = minimum_energy_coeffs(&a_vi, &a_ii)?;

    let n = p + 1;
    let ni = p - 1;
    let mut t = DenseMatrix::zeros(n, n);
    for j in 0..ni {
        for l in 0..ni {
            t[(2 + j, 2 + l)] = y[(j, l)];
        }
    }
    for v in 0..2 {
        t[(v, v)] = 1.0;
        for j in 0..ni {
            let a = alpha[(v, j)];
            for l in 0..ni {
                t[(v, 2 + l)] -= a * y[(j, l)];
            }
        }
    }
    Ok(Basis1D {
        order: p,
        kind,
        transform: t,
        nodes: None,
        sd_eigenvalues: lambda_s,
    })
}

/// One row of the conditioning study.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningRow {
    pub tag: BasisTag,
    pub order: usize,
    pub cond_m: f64,
    /// Condition number of the internal stiffness block (the full 1D
    /// stiffness is singular).
    pub cond_k: f64,
    pub cond_khat: f64,
    pub cond_m_ii: f64,
}

pub fn conditioning_report(
    tags: &[BasisTag],
    orders: RangeInclusive<usize>,
    k: f64,
    lambda: f64,
) -> Result<Vec<ConditioningRow>> {
    let mut rows = Vec::new();
    for &tag in tags {
        for p in orders.clone() {
            if tag.is_sdme() && p < 2 {
                continue;
            }
            let kind = BasisKind::new(tag).with_k(k).with_lambda(lambda);
            let rule = gauss_rule(p + 2)?;
            let b = build_basis(p, kind, &rule)?;
            let m = matrices_1d(&b, &rule, lambda);
            let (cond_k, cond_m_ii) = if p >= 2 {
                let int: Vec<usize> = (2..=p).collect();
                (
                    cond2_spd(&m.stiffness.select(&int, &int))?,
                    cond2_spd(&m.mass.select(&int, &int))?,
                )
            } else {
                (f64::NAN, f64::NAN)
            };
            rows.push(ConditioningRow {
                tag,
                order: p,
                cond_m: cond2_spd(&m.mass)?,
                cond_k,
                cond_khat: cond2_spd(&m.effective)?,
                cond_m_ii,
            });
        }
    }
    Ok(rows)
}

pub fn conditioning_csv(rows: &[ConditioningRow]) -> String {
    let mut s = String::from("basis,P,cond_M,cond_K,cond_Khat\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{:.5e},{:.5e},{:.5e}\n",
            r.tag, r.order, r.cond_m, r.cond_k, r.cond_khat
        ));
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparsityRow {
    pub tag: BasisTag,
    pub order: usize,
    pub matrix: &'static str,
    pub nnz: usize,
}

fn count_nnz(a: &DenseMatrix) -> usize {
    let tol = 1e-12 * a.max_abs();
    a.as_slice().iter().filter(|v| v.abs() > tol).count()
}

pub fn sparsity_report(
    tags: &[BasisTag],
    orders: RangeInclusive<usize>,
    k: f64,
    lambda: f64,
) -> Result<Vec<SparsityRow>> {
    let mut rows = Vec::new();
    for &tag in tags {
        for p in orders.clone() {
            if tag.is_sdme() && p < 2 {
                continue;
            }
            let kind = BasisKind::new(tag).with_k(k).with_lambda(lambda);
            let rule = gauss_rule(p + 2)?;
            let b = build_basis(p, kind, &rule)?;
            let m = matrices_1d(&b, &rule, lambda);
            for (name, mat) in [("M", &m.mass), ("K", &m.stiffness), ("Khat", &m.effective)] {
                rows.push(SparsityRow {
                    tag,
                    order: p,
                    matrix: name,
                    nnz: count_nnz(mat),
                });
            }
        }
    }
    Ok(rows)
}

pub fn sparsity_csv(rows: &[SparsityRow]) -> String {
    let mut s = String::from("basis,P,matrix,nnz\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.tag, r.order, r.matrix, r.nnz));
    }
    s
}
