//! Activations and expectations of activation products under a bivariate
//! zero-mean Gaussian.
//!
//! Linear and ReLU use closed forms (the ReLU ones are the degree-1 and
//! degree-0 arc-cosine kernels). Everything else goes through tensor-product
//! Gauss–Hermite quadrature, which also serves as the independent check for
//! the closed forms.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex, OnceLock};

use crate::error::{Error, Result};

/// Relative slack allowed when checking `hxy^2 <= hxx * hyy`.
const PSD_SLACK: f64 = 1e-12;

/// Quadrature order used wherever no closed form exists.
pub const DEFAULT_QUADRATURE_ORDER: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Linear,
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn value(self, x: f64) -> f64 {
        match self {
            Activation::Linear => x,
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Linear => "linear",
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "linear" | "identity" => Ok(Activation::Linear),
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::Config(format!("unknown activation '{other}'"))),
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// 2x2 covariance of a zero-mean Gaussian pair `(h, h')`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairCovariance {
    pub hxx: f64,
    pub hxy: f64,
    pub hyy: f64,
}

impl PairCovariance {
    pub fn new(hxx: f64, hxy: f64, hyy: f64) -> Result<Self> {
        let c = Self { hxx, hxy, hyy };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let Self { hxx, hxy, hyy } = *self;
        if !(hxx.is_finite() && hxy.is_finite() && hyy.is_finite()) {
            return Err(Error::Precondition(format!(
                "non-finite covariance {self:?}"
            )));
        }
        if hxx < 0.0 || hyy < 0.0 {
            return Err(Error::Precondition(format!("negative variance {self:?}")));
        }
        let bound = hxx * hyy;
        if hxy * hxy > bound * (1.0 + PSD_SLACK) + f64::MIN_POSITIVE {
            return Err(Error::Precondition(format!("covariance not PSD {self:?}")));
        }
        Ok(())
    }

    /// Correlation coefficient clamped to [-1, 1]; `None` when degenerate.
    pub fn correlation(&self) -> Option<f64> {
        let denom = (self.hxx * self.hyy).sqrt();
        if denom == 0.0 {
            None
        } else {
            Some((self.hxy / denom).clamp(-1.0, 1.0))
        }
    }
}

/// `E[phi(h) phi(h')]`.
pub fn phi_pair_mean(act: Activation, cov: PairCovariance) -> Result<f64> {
    cov.validate()?;
    match act {
        Activation::Linear => Ok(cov.hxy),
        Activation::Relu => Ok(match cov.correlation() {
            None => 0.0,
            Some(rho) => {
                let s = (cov.hxx * cov.hyy).sqrt();
                s * ((1.0 - rho * rho).max(0.0).sqrt() + rho * (PI - rho.acos())) / (2.0 * PI)
            }
        }),
        Activation::Tanh => {
            if cov.hxx * cov.hyy == 0.0 {
                return Ok(0.0);
            }
            gauss_hermite_pair(|a, b| a.tanh() * b.tanh(), cov, DEFAULT_QUADRATURE_ORDER)
        }
    }
}

/// `E[phi'(h) phi'(h')]`.
pub fn dphi_pair_mean(act: Activation, cov: PairCovariance) -> Result<f64> {
    cov.validate()?;
    match act {
        Activation::Linear => Ok(1.0),
        Activation::Relu => Ok(match cov.correlation() {
            None => 0.0,
            Some(rho) => (PI - rho.acos()) / (2.0 * PI),
        }),
        Activation::Tanh => {
            if cov.hxx * cov.hyy == 0.0 {
                return Ok(0.0);
            }
            gauss_hermite_pair(
                |a, b| {
                    let (ta, tb) = (a.tanh(), b.tanh());
                    (1.0 - ta * ta) * (1.0 - tb * tb)
                },
                cov,
                DEFAULT_QUADRATURE_ORDER,
            )
        }
    }
}

/// Gauss–Hermite nodes and weights for the standard normal measure:
/// `E[f(z)] ≈ Σ w_i f(z_i)`, `z ~ N(0,1)`.
#[derive(Debug, Clone)]
pub struct HermiteRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

static RULES: OnceLock<Mutex<HashMap<usize, Arc<HermiteRule>>>> = OnceLock::new();

/// Cached rule of the given order (2..=200).
pub fn hermite_rule(order: usize) -> Result<Arc<HermiteRule>> {
    if !(2..=200).contains(&order) {
        return Err(Error::Precondition(format!(
            "quadrature order {order} outside [2, 200]"
        )));
    }
    let cache = RULES.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().expect("hermite cache poisoned");
    Ok(guard
        .entry(order)
        .or_insert_with(|| Arc::new(compute_hermite_rule(order)))
        .clone())
}

/// Golub–Welsch: nodes are the eigenvalues of the Jacobi matrix of the
/// probabilists' Hermite recurrence (zero diagonal, off-diagonal `sqrt(k)`),
/// weights the squared first components of the normalized eigenvectors.
fn compute_hermite_rule(n: usize) -> HermiteRule {
    let diag = vec![0.0; n];
    let off: Vec<f64> = (1..n).map(|k| (k as f64).sqrt()).collect();
    let (mut nodes, first) = symmetric_tridiagonal_eigen(diag, off);
    let mut weights: Vec<f64> = first.iter().map(|v| v * v).collect();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| nodes[a].total_cmp(&nodes[b]));
    nodes = idx.iter().map(|&i| nodes[i]).collect();
    weights = idx.iter().map(|&i| weights[i]).collect();
    // symmetrize to kill rounding asymmetry
    for i in 0..n / 2 {
        let j = n - 1 - i;
        let x = 0.5 * (nodes[j] - nodes[i]);
        nodes[i] = -x;
        nodes[j] = x;
        let w = 0.5 * (weights[i] + weights[j]);
        weights[i] = w;
        weights[j] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    HermiteRule { nodes, weights }
}

/// Eigenvalues of a symmetric tridiagonal matrix and the first component of
/// each normalized eigenvector (implicit QL with Wilkinson shifts).
fn symmetric_tridiagonal_eigen(mut d: Vec<f64>, off: Vec<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = d.len();
    let mut e = off;
    e.push(0.0);
    // only the first row of the eigenvector matrix is tracked
    let mut z = vec![0.0; n];
    z[0] = 1.0;
    for l in 0..n {
        let mut iter = 0;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iter += 1;
            assert!(iter < 200, "tridiagonal QL failed to converge");
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            g = d[m] - d[l] + e[l] / (g + r.copysign(g));
            let (mut s, mut c, mut p) = (1.0, 1.0, 0.0);
            let mut i = m;
            let mut early = false;
            while i > l {
                i -= 1;
                let f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    early = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
                let fz = z[i + 1];
                z[i + 1] = s * z[i] + c * fz;
                z[i] = c * z[i] - s * fz;
            }
            if early {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
    (d, z)
}

/// Tensor-product Gauss–Hermite estimate of `E[f(h, h')]`.
///
/// Independent standard normal nodes are correlated with the 2x2 Cholesky
/// factor of `cov`; when `hxx = 0` the roles of the two coordinates are
/// swapped so the pivot is the non-degenerate one.
pub fn gauss_hermite_pair(
    f: impl Fn(f64, f64) -> f64,
    cov: PairCovariance,
    order: usize,
) -> Result<f64> {
    cov.validate()?;
    let rule = hermite_rule(order)?;
    let swapped = cov.hxx == 0.0 && cov.hyy > 0.0;
    let (a, b) = if swapped {
        (cov.hyy, cov.hxx)
    } else {
        (cov.hxx, cov.hyy)
    };
    let l11 = a.sqrt();
    let (l21, l22) = if l11 > 0.0 {
        let l21 = cov.hxy / l11;
        (l21, (b - l21 * l21).max(0.0).sqrt())
    } else {
        (0.0, b.max(0.0).sqrt())
    };
    let mut acc = 0.0;
    for (zi, wi) in rule.nodes.iter().zip(&rule.weights) {
        let u = l11 * zi;
        let base = l21 * zi;
        let mut inner = 0.0;
        for (zj, wj) in rule.nodes.iter().zip(&rule.weights) {
            let v = base + l22 * zj;
            inner += wj * if swapped { f(v, u) } else { f(u, v) };
        }
        acc += wi * inner;
    }
    Ok(acc)
}

/// Second oracle for pair expectations with kinks on the coordinate axes
/// (ReLU, step functions), where tensor Gauss–Hermite only converges
/// algebraically.
///
/// Writes `(h, h') = L (r cos t, r sin t)` with `L` the Cholesky factor,
/// substitutes `s = r^2 / 2` so the radial weight becomes `e^{-s}`
/// (Gauss–Laguerre), and splits the angle at every direction where `h` or `h'`
/// changes sign (Gauss–Legendre per arc). Exact for ReLU-type integrands
/// that are polynomial in `r^2` along each ray.
pub fn polar_pair_quadrature(
    f: impl Fn(f64, f64) -> f64,
    cov: PairCovariance,
    order: usize,
) -> Result<f64> {
    cov.validate()?;
    if !(2..=200).contains(&order) {
        return Err(Error::Precondition(format!(
            "quadrature order {order} outside [2, 200]"
        )));
    }
    let l11 = cov.hxx.sqrt();
    let (l21, l22) = if l11 > 0.0 {
        let l21 = cov.hxy / l11;
        (l21, (cov.hyy - l21 * l21).max(0.0).sqrt())
    } else {
        (0.0, cov.hyy.sqrt())
    };
    let two_pi = 2.0 * PI;
    let wrap = |t: f64| t.rem_euclid(two_pi);
    let mut cuts = vec![0.0, PI / 2.0, PI, 1.5 * PI];
    if l21 != 0.0 || l22 != 0.0 {
        let t = (-l21).atan2(l22);
        cuts.push(wrap(t));
        cuts.push(wrap(t + PI));
    }
    cuts.sort_by(f64::total_cmp);
    cuts.dedup_by(|a, b| (*a - *b).abs() < 1e-15);
    cuts.push(two_pi);

    let legendre = jacobi_rule(RuleKind::Legendre, order);
    let laguerre = jacobi_rule(RuleKind::Laguerre, order);
    let mut acc = 0.0;
    for seg in cuts.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        if b - a <= 0.0 {
            continue;
        }
        let (mid, half) = (0.5 * (a + b), 0.5 * (b - a));
        for (x, wx) in legendre.nodes.iter().zip(&legendre.weights) {
            let t = mid + half * x;
            let (c, s) = (t.cos(), t.sin());
            let (u, v) = (l11 * c, l21 * c + l22 * s);
            let mut radial = 0.0;
            for (sv, ws) in laguerre.nodes.iter().zip(&laguerre.weights) {
                let r = (2.0 * sv).sqrt();
                radial += ws * f(r * u, r * v);
            }
            acc += half * wx * radial;
        }
    }
    Ok(acc / two_pi)
}

#[derive(Clone, Copy)]
enum RuleKind {
    Legendre,
    Laguerre,
}

/// Gauss–Legendre on [-1, 1] or Gauss–Laguerre on [0, inf) via Golub–Welsch.
fn jacobi_rule(kind: RuleKind, n: usize) -> HermiteRule {
    let (diag, off, mass): (Vec<f64>, Vec<f64>, f64) = match kind {
        RuleKind::Legendre => (
            vec![0.0; n],
            (1..n)
                .map(|k| {
                    let k = k as f64;
                    k / (4.0 * k * k - 1.0).sqrt()
                })
                .collect(),
            2.0,
        ),
        RuleKind::Laguerre => (
            (0..n).map(|k| 2.0 * k as f64 + 1.0).collect(),
            (1..n).map(|k| k as f64).collect(),
            1.0,
        ),
    };
    let (nodes, first) = symmetric_tridiagonal_eigen(diag, off);
    let weights = first.iter().map(|v| mass * v * v).collect();
    HermiteRule { nodes, weights }
}
