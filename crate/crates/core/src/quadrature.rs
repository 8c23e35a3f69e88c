//! Gauss-Legendre and Gauss-Lobatto-Legendre rules on [−1, 1].

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuadratureError {
    #[error("Gauss-Legendre rule needs at least 1 point, got {0}")]
    TooFewGauss(usize),
    #[error("Gauss-Lobatto-Legendre rule needs at least 2 points, got {0}")]
    TooFewLobatto(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RuleKind {
    GaussLegendre,
    GaussLobattoLegendre,
}

/// A 1D quadrature rule with ascending points.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    pub kind: RuleKind,
    pub points: Vec<f64>,
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Highest polynomial degree integrated exactly.
    pub fn exactness(&self) -> usize {
        let n = self.points.len();
        match self.kind {
            RuleKind::GaussLegendre => 2 * n - 1,
            RuleKind::GaussLobattoLegendre => 2 * n - 3,
        }
    }

    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.points
            .iter()
            .zip(&self.weights)
            .map(|(x, w)| w * f(*x))
            .sum()
    }
}

/// Legendre polynomial `P_n(x)` and its derivative by the three-term recurrence.
pub fn legendre(n: usize, x: f64) -> (f64, f64) {
    if n == 0 {
        return (1.0, 0.0);
    }
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    // P_n' from the standard identity; at |x| = 1 use the closed form.
    let nf = n as f64;
    let dp = if (1.0 - x * x).abs() < 1e-14 {
        0.5 * nf * (nf + 1.0) * x.signum().powi(n as i32 + 1)
    } else {
        nf * (x * p1 - p0) / (x * x - 1.0)
    };
    (p1, dp)
}

/// Second derivative of `P_n` from the Legendre differential equation.
fn legendre_d2(n: usize, x: f64) -> f64 {
    let (p, dp) = legendre(n, x);
    let nf = n as f64;
    (2.0 * x * dp - nf * (nf + 1.0) * p) / (1.0 - x * x)
}

const NEWTON_TOL: f64 = 1e-15;
const NEWTON_MAX: usize = 100;

/// Newton from an initial guess; falls back to bisection on `[lo, hi]` if
/// Newton leaves the bracket or stalls.
fn find_root(f: impl Fn(f64) -> (f64, f64), guess: f64, lo: f64, hi: f64) -> f64 {
    let mut x = guess;
    for _ in 0..NEWTON_MAX {
        let (v, d) = f(x);
        if d == 0.0 {
            break;
        }
        let dx = v / d;
        x -= dx;
        if !(lo..=hi).contains(&x) {
            break;
        }
        if dx.abs() <= NEWTON_TOL * x.abs().max(1.0) {
            return x;
        }
    }
    let (mut a, mut b) = (lo, hi);
    let mut fa = f(a).0;
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        let fm = f(m).0;
        if fm == 0.0 || (b - a) < 1e-16 {
            return m;
        }
        if (fa < 0.0) == (fm < 0.0) {
            a = m;
            fa = fm;
        } else {
            b = m;
        }
    }
    0.5 * (a + b)
}

fn symmetrize(points: &mut [f64], weights: &mut [f64]) {
    let n = points.len();
    for i in 0..n / 2 {
        let j = n - 1 - i;
        let x = 0.5 * (points[j] - points[i]);
        points[i] = -x;
        points[j] = x;
        let w = 0.5 * (weights[i] + weights[j]);
        weights[i] = w;
        weights[j] = w;
    }
    if n % 2 == 1 {
        points[n / 2] = 0.0;
    }
}

/// `n`-point Gauss-Legendre rule, exact for degree `2n − 1`.
pub fn gauss_rule(n: usize) -> Result<QuadratureRule, QuadratureError> {
    if n == 0 {
        return Err(QuadratureError::TooFewGauss(n));
    }
    let mut points = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    // Bruns' bounds bracket each root: x_i = −cos(φ_i) with
    // φ_i ∈ ((i+1/2)π/(n+1/2), (i+1)π/(n+1/2)).
    let h = std::f64::consts::PI / (n as f64 + 0.5);
    for i in 0..n {
        let fi = i as f64;
        let lo = -((fi + 0.5) * h).cos();
        let hi = -((fi + 1.0) * h).cos();
        let guess = -((fi + 0.75) * h).cos();
        let x = find_root(|x| legendre(n, x), guess, lo, hi);
        let (_, dp) = legendre(n, x);
        points.push(x);
        weights.push(2.0 / ((1.0 - x * x) * dp * dp));
    }
    symmetrize(&mut points, &mut weights);
    Ok(QuadratureRule {
        kind: RuleKind::GaussLegendre,
        points,
        weights,
    })
}

/// `n`-point Gauss-Lobatto-Legendre rule (endpoints included), exact for
/// degree `2n − 3`.
pub fn gll_rule(n: usize) -> Result<QuadratureRule, QuadratureError> {
    if n < 2 {
        return Err(QuadratureError::TooFewLobatto(n));
    }
    let deg = n - 1;
    let mut points = vec![-1.0];
    // Interior points are the roots of P'_{n−1}, interlaced with the Gauss
    // points of order n−1.
    if n > 2 {
        let g = gauss_rule(deg)?;
        for i in 0..deg - 1 {
            let lo = g.points[i];
            let hi = g.points[i + 1];
            let guess = -(std::f64::consts::PI * (i as f64 + 1.0) / deg as f64).cos();
            let guess = guess.clamp(lo, hi);
            let x = find_root(
                |x| {
                    let (_, dp) = legendre(deg, x);
                    (dp, legendre_d2(deg, x))
                },
                guess,
                lo,
                hi,
            );
            points.push(x);
        }
    }
    points.push(1.0);
    let nf = deg as f64;
    let mut weights: Vec<f64> = points
        .iter()
        .map(|&x| {
            let (p, _) = legendre(deg, x);
            2.0 / (nf * (nf + 1.0) * p * p)
        })
        .collect();
    symmetrize(&mut points, &mut weights);
    Ok(QuadratureRule {
        kind: RuleKind::GaussLobattoLegendre,
        points,
        weights,
    })
}

/// Tensor-product points and weights of a 1D rule in `dim` dimensions, with
/// the first coordinate varying fastest.
pub fn tensor_points(rule: &QuadratureRule, dim: usize) -> Vec<([f64; 3], f64)> {
    let q = rule.len();
    let count = q.pow(dim as u32);
    let mut out = Vec::with_capacity(count);
    for idx in 0..count {
        let mut xi = [0.0; 3];
        let mut w = 1.0;
        let mut rem = idx;
        for d in 0..dim {
            let k = rem % q;
            rem /= q;
            xi[d] = rule.points[k];
            w *= rule.weights[k];
        }
        out.push((xi, w));
    }
    out
}
