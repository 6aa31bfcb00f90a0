//! Scalar numerics shared by both market makers: standard-normal functions,
//! bracketing root finding and Gaussian-weighted quadrature.
//!
//! Everything here is a pure function and safe to call from any thread.

use std::collections::HashMap;
use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::sync::{Arc, OnceLock, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// 1/√(2π)
pub const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Below this the hazard is evaluated directly from φ and the upper tail;
/// above it the Laplace continued fraction converges in a handful of terms.
const HAZARD_CF_THRESHOLD: f64 = 5.0;
const HAZARD_CF_TERMS: u32 = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("root is not bracketed: f({lo}) = {f_lo}, f({hi}) = {f_hi}")]
    NoBracket {
        lo: f64,
        hi: f64,
        f_lo: f64,
        f_hi: f64,
    },
    #[error("invalid tolerance {0}")]
    InvalidTolerance(f64),
}

/// Standard normal density.
pub fn std_normal_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Standard normal distribution function. Accepts ±∞.
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

/// Upper tail `1 − Φ(x)`, accurate in relative terms far into the tail.
pub fn std_normal_sf(x: f64) -> f64 {
    0.5 * libm::erfc(x * FRAC_1_SQRT_2)
}

/// `Φ(hi) − Φ(lo)` without cancellation when both bounds sit in the same tail.
pub fn std_normal_interval(lo: f64, hi: f64) -> f64 {
    if lo >= hi {
        return 0.0;
    }
    if lo > 0.0 {
        std_normal_sf(lo) - std_normal_sf(hi)
    } else if hi < 0.0 {
        std_normal_cdf(hi) - std_normal_cdf(lo)
    } else {
        1.0 - std_normal_cdf(lo) - std_normal_sf(hi)
    }
}

/// Hazard (inverse Mills ratio) `φ(z)/(1 − Φ(z))`.
///
/// The direct quotient is used while the tail is comfortably representable;
/// further out the Laplace continued fraction `z + 1/(z + 2/(z + 3/…))` is
/// evaluated backwards, which never forms the 0/0 of the direct form.
pub fn hazard(z: f64) -> f64 {
    if z < HAZARD_CF_THRESHOLD {
        std_normal_pdf(z) / std_normal_sf(z)
    } else {
        let mut t = z;
        for k in (1..=HAZARD_CF_TERMS).rev() {
            t = z + f64::from(k) / t;
        }
        t
    }
}

/// Bisection on a sign-changing function.
///
/// Returns the midpoint of a final bracket no wider than `tol`. A root hit
/// exactly on a bracket end is returned as is.
pub fn find_root<F>(f: F, lo: f64, hi: f64, tol: f64) -> Result<f64, NumericsError>
where
    F: Fn(f64) -> f64,
{
    if !(tol > 0.0) {
        return Err(NumericsError::InvalidTolerance(tol));
    }
    let (mut lo, mut hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
    let mut f_lo = f(lo);
    let f_hi = f(hi);
    if f_lo == 0.0 {
        return Ok(lo);
    }
    if f_hi == 0.0 {
        return Ok(hi);
    }
    if f_lo.signum() == f_hi.signum() || f_lo.is_nan() || f_hi.is_nan() {
        return Err(NumericsError::NoBracket { lo, hi, f_lo, f_hi });
    }
    // 2^-1100 shrinks any finite bracket below any positive tolerance
    for _ in 0..1100 {
        if hi - lo <= tol {
            break;
        }
        let mid = lo + 0.5 * (hi - lo);
        if mid <= lo || mid >= hi {
            break;
        }
        let f_mid = f(mid);
        if f_mid == 0.0 {
            return Ok(mid);
        }
        if f_mid.signum() == f_lo.signum() {
            lo = mid;
            f_lo = f_mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo + 0.5 * (hi - lo))
}

/// Resolution of [`integrate_gaussian_weighted`].
///
/// `node_count` Gauss–Legendre nodes are laid out as equal panels of
/// [`PANEL_ORDER`] nodes across `center ± half_width_sigmas·scale`; every
/// panel is then bisected until its estimate agrees with the refined one to
/// a relative tolerance of [`QUADRATURE_REL_TOL`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadratureSpec {
    pub node_count: usize,
    pub half_width_sigmas: f64,
}

/// Gauss–Legendre order of a single panel.
pub const PANEL_ORDER: usize = 8;
pub const QUADRATURE_REL_TOL: f64 = 1e-11;
/// Relative agreement at which a panel is accepted regardless of depth.
const PANEL_NOISE_FLOOR: f64 = 1e-12;
const MAX_PANEL_DEPTH: u32 = 30;

impl Default for QuadratureSpec {
    fn default() -> Self {
        Self {
            node_count: 64,
            half_width_sigmas: 8.0,
        }
    }
}

impl QuadratureSpec {
    pub fn new(node_count: usize, half_width_sigmas: f64) -> Result<Self, String> {
        let spec = Self {
            node_count,
            half_width_sigmas,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.node_count < 16 {
            return Err(format!("node_count must be >= 16, got {}", self.node_count));
        }
        if !(self.half_width_sigmas >= 6.0) || !self.half_width_sigmas.is_finite() {
            return Err(format!(
                "half_width_sigmas must be a finite value >= 6, got {}",
                self.half_width_sigmas
            ));
        }
        Ok(())
    }

    fn panels(&self) -> usize {
        (self.node_count / PANEL_ORDER).max(2)
    }
}

/// Gauss–Legendre nodes and weights on [-1, 1].
#[derive(Debug)]
struct GaussLegendre {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussLegendre {
    fn compute(n: usize) -> Self {
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let m = n.div_ceil(2);
        let nf = n as f64;
        for i in 0..m {
            let mut x = (PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (mut p0, mut p1) = (1.0, x);
                for k in 2..=n {
                    let kf = k as f64;
                    let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                    p0 = p1;
                    p1 = p2;
                }
                let pn = if n == 1 { x } else { p1 };
                let pn1 = if n == 1 { 1.0 } else { p0 };
                dp = nf * (x * pn - pn1) / (x * x - 1.0);
                let dx = pn / dp;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        Self { nodes, weights }
    }

    fn shared(n: usize) -> Arc<GaussLegendre> {
        static CACHE: OnceLock<RwLock<HashMap<usize, Arc<GaussLegendre>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(|| RwLock::new(HashMap::new()));
        if let Some(rule) = cache.read().expect("quadrature cache poisoned").get(&n) {
            return Arc::clone(rule);
        }
        let rule = Arc::new(Self::compute(n));
        cache
            .write()
            .expect("quadrature cache poisoned")
            .entry(n)
            .or_insert(rule)
            .clone()
    }

    fn integrate<F: Fn(f64) -> f64>(&self, f: &F, a: f64, b: f64) -> f64 {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(x, w)| w * f(mid + half * x))
            .sum::<f64>()
            * half
    }
}

fn refine_panel<F: Fn(f64) -> f64>(
    rule: &GaussLegendre,
    f: &F,
    a: f64,
    b: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let mid = 0.5 * (a + b);
    let left = rule.integrate(f, a, mid);
    let right = rule.integrate(f, mid, b);
    let split = left + right;
    // halving tol per level eventually asks for more than the integrand's
    // own evaluation noise (erfc differences carry ~1e-13 relative error)
    let floor = PANEL_NOISE_FLOOR * (left.abs() + right.abs());
    if (split - whole).abs() <= tol.max(floor) || depth >= MAX_PANEL_DEPTH {
        return split;
    }
    refine_panel(rule, f, a, mid, left, 0.5 * tol, depth + 1)
        + refine_panel(rule, f, mid, b, right, 0.5 * tol, depth + 1)
}

/// `∫ N(v; center, scale)·g(v) dv` over `center ± half_width_sigmas·scale`.
pub fn integrate_gaussian_weighted<G>(g: G, center: f64, scale: f64, spec: QuadratureSpec) -> f64
where
    G: Fn(f64) -> f64,
{
    assert!(scale > 0.0, "quadrature scale must be positive, got {scale}");
    let rule = GaussLegendre::shared(PANEL_ORDER);
    // standardized variable u = (v - center)/scale
    let integrand = |u: f64| std_normal_pdf(u) * g(center + scale * u);
    let h = spec.half_width_sigmas;
    let panels = spec.panels();
    let width = 2.0 * h / panels as f64;
    let bounds: Vec<(f64, f64)> = (0..panels)
        .map(|i| (-h + width * i as f64, -h + width * (i + 1) as f64))
        .collect();
    let coarse: Vec<f64> = bounds
        .iter()
        .map(|&(a, b)| rule.integrate(&integrand, a, b))
        .collect();
    let total: f64 = coarse.iter().sum();
    if total == 0.0 {
        return 0.0;
    }
    let tol = (QUADRATURE_REL_TOL * total.abs()).max(f64::MIN_POSITIVE) / panels as f64;
    bounds
        .iter()
        .zip(&coarse)
        .map(|(&(a, b), &whole)| refine_panel(&rule, &integrand, a, b, whole, tol, 0))
        .sum()
}
