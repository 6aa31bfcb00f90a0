//! Bayesian market maker.
//!
//! The market maker holds a Gaussian belief `N(μ, σ²)` over the security's
//! value. Traders see a private signal `s ~ N(v, σ_ε²)`. Quotes are set so
//! that a fill carries zero expected profit, multi-share orders are priced
//! as a ladder of fictitious mini-orders, and every trader action narrows
//! the range known to contain `s`. The belief is then replaced by the
//! Gaussian with the same mean and variance as the exact posterior.
//!
//! When recent trades are more probable under a wider belief than under
//! the current one (consistency index `C > 0`), σ is multiplied (doubled by
//! default) so the mean can move quickly after a shock.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{
    find_root, hazard, integrate_gaussian_weighted, std_normal_interval, std_normal_pdf, QuadratureSpec,
};
use crate::Side;

/// Posterior normalizers below this are treated as impossible observations.
pub const DEGENERATE_MASS: f64 = 1e-300;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BmmError {
    #[error("observation ({lower:?}, {upper:?}) has negligible probability {mass:e} under the belief")]
    DegenerateObservation {
        lower: Option<f64>,
        upper: Option<f64>,
        mass: f64,
    },
    #[error("invalid market maker configuration: {0}")]
    InvalidConfig(String),
}

/// Interval known to contain a trader's signal. `None` is an unbounded end.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangeObservation {
    pub lower: Option<f64>,
    pub upper: Option<f64>,
}

impl RangeObservation {
    pub const UNBOUNDED: RangeObservation = RangeObservation {
        lower: None,
        upper: None,
    };

    pub fn new(lower: Option<f64>, upper: Option<f64>) -> Self {
        Self { lower, upper }
    }

    pub fn above(lower: f64) -> Self {
        Self {
            lower: Some(lower),
            upper: None,
        }
    }

    pub fn below(upper: f64) -> Self {
        Self {
            lower: None,
            upper: Some(upper),
        }
    }

    pub fn between(lower: f64, upper: f64) -> Self {
        Self {
            lower: Some(lower),
            upper: Some(upper),
        }
    }

    fn lower_or_inf(&self) -> f64 {
        self.lower.unwrap_or(f64::NEG_INFINITY)
    }

    fn upper_or_inf(&self) -> f64 {
        self.upper.unwrap_or(f64::INFINITY)
    }

    /// Probability of the observation given the true value `v`.
    pub fn likelihood(&self, v: f64, sigma_eps: f64) -> f64 {
        std_normal_interval(
            (self.lower_or_inf() - v) / sigma_eps,
            (self.upper_or_inf() - v) / sigma_eps,
        )
    }
}

/// Zero-profit quote offset in units of `σ_ε·√(1+ρ²)`.
///
/// With `τ² = σ² + σ_ε²` the signal is `N(μ, τ²)` and
/// `E[v | s > ask] = μ + (σ²/τ)·hazard((ask − μ)/τ)`, so the zero-profit ask
/// sits at `μ + τ·z` where `z = ρ²/(1+ρ²)·hazard(z)`. The root is unique and
/// lies in `[0, max(ρ, 1) + 1]` because `hazard(z) < z + 1/z`.
pub fn q_function(rho: f64) -> f64 {
    assert!(rho >= 0.0, "information disadvantage must be non-negative, got {rho}");
    if rho == 0.0 {
        return 0.0;
    }
    let k = rho * rho / (1.0 + rho * rho);
    let hi = rho.max(1.0) + 1.0;
    find_root(|z| z - k * hazard(z), 0.0, hi, 1e-13).expect("zero-profit fixed point is always bracketed")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BmmBelief {
    pub mu: f64,
    pub sigma: f64,
    pub sigma_eps: f64,
    pub sigma_cap: f64,
}

/// First two standardized moments of a unit normal truncated to `(a, b)`:
/// returns `(Z, (φ(a) − φ(b))/Z, (aφ(a) − bφ(b))/Z)`.
fn truncated_moments(a: f64, b: f64) -> (f64, f64, f64) {
    if a > 0.0 {
        upper_tail_moments(a, b)
    } else if b < 0.0 {
        let (z, m1, m2) = upper_tail_moments(-b, -a);
        (z, -m1, m2)
    } else {
        let z = std_normal_interval(a, b);
        let pa = std_normal_pdf(a);
        let pb = std_normal_pdf(b);
        let apa = if a.is_finite() { a * pa } else { 0.0 };
        let bpb = if b.is_finite() { b * pb } else { 0.0 };
        (z, (pa - pb) / z, (apa - bpb) / z)
    }
}

/// `0 < a < b ≤ ∞`, written in terms of the hazard so that nothing
/// underflows before the ratio is formed.
fn upper_tail_moments(a: f64, b: f64) -> (f64, f64, f64) {
    let z = std_normal_interval(a, b);
    let ha = hazard(a);
    if b.is_infinite() {
        return (z, ha, a * ha);
    }
    let r = (-0.5 * (b - a) * (b + a)).exp();
    let hb = hazard(b);
    let den = 1.0 / ha - r / hb;
    (z, (1.0 - r) / den, (a - b * r) / den)
}

impl BmmBelief {
    pub fn new(mu: f64, sigma: f64, sigma_eps: f64, sigma_cap: f64) -> Result<Self, BmmError> {
        let belief = Self {
            mu,
            sigma,
            sigma_eps,
            sigma_cap,
        };
        belief.validate()?;
        Ok(belief)
    }

    pub fn validate(&self) -> Result<(), BmmError> {
        if !self.mu.is_finite() {
            return Err(BmmError::InvalidConfig(format!("mu must be finite, got {}", self.mu)));
        }
        if !(self.sigma > 0.0 && self.sigma_eps > 0.0 && self.sigma_cap > 0.0) {
            return Err(BmmError::InvalidConfig(
                "sigma, sigma_eps and sigma_cap must be positive".into(),
            ));
        }
        if self.sigma > self.sigma_cap {
            return Err(BmmError::InvalidConfig(format!(
                "sigma {} exceeds cap {}",
                self.sigma, self.sigma_cap
            )));
        }
        Ok(())
    }

    /// Information disadvantage σ/σ_ε.
    pub fn rho(&self) -> f64 {
        self.sigma / self.sigma_eps
    }

    /// Distance from μ to either zero-profit quote.
    pub fn half_spread(&self) -> f64 {
        let rho = self.rho();
        self.sigma_eps * q_function(rho) * (1.0 + rho * rho).sqrt()
    }

    pub fn ask_price(&self) -> f64 {
        self.mu + self.half_spread()
    }

    pub fn bid_price(&self) -> f64 {
        self.mu - self.half_spread()
    }

    pub fn quote(&self, side: Side) -> f64 {
        match side {
            Side::Buy => self.ask_price(),
            Side::Sell => self.bid_price(),
        }
    }

    /// Gaussian projection of the posterior after learning that the
    /// trader's signal lies in `obs`.
    pub fn range_update(&self, obs: &RangeObservation) -> Result<BmmBelief, BmmError> {
        let var = self.sigma * self.sigma;
        let noise = self.sigma_eps * self.sigma_eps;
        let tau2 = var + noise;
        let tau = tau2.sqrt();
        let a = (obs.lower_or_inf() - self.mu) / tau;
        let b = (obs.upper_or_inf() - self.mu) / tau;
        let (mass, m1, m2) = if a < b { truncated_moments(a, b) } else { (0.0, 0.0, 0.0) };
        if !(mass >= DEGENERATE_MASS) {
            return Err(BmmError::DegenerateObservation {
                lower: obs.lower,
                upper: obs.upper,
                mass,
            });
        }
        let k = var / tau2;
        let mu = self.mu + k * tau * m1;
        let signal_var = tau2 * (1.0 + m2 - m1 * m1).max(0.0);
        let new_var = k * k * signal_var + var * noise / tau2;
        Ok(BmmBelief {
            mu,
            // projection never widens the belief; min() absorbs round-off
            sigma: new_var.sqrt().min(self.sigma),
            ..*self
        })
    }
}

/// Fictitious mini-order execution used to price a multi-share order.
#[derive(Debug, Clone, PartialEq)]
pub struct Ladder {
    pub price: f64,
    /// `(size, price)` of each mini-order, in execution order.
    pub rungs: Vec<(f64, f64)>,
    /// Belief after all mini-orders were (fictitiously) filled.
    pub terminal: BmmBelief,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BmmConfig {
    pub mu0: f64,
    pub sigma0: f64,
    pub sigma_eps: f64,
    pub sigma_cap: f64,
    pub window: usize,
    pub alpha: f64,
    pub adaptive: bool,
    pub multiplier: f64,
    /// Commit the ladder's terminal belief on acceptance instead of a
    /// single range update on the VWAP.
    pub commit_ladder: bool,
    pub price_floor: f64,
    pub price_ceiling: f64,
    pub quadrature: QuadratureSpec,
}

impl Default for BmmConfig {
    fn default() -> Self {
        Self {
            mu0: 50.0,
            sigma0: 12.0,
            sigma_eps: 5.0,
            sigma_cap: 50.0,
            window: 5,
            alpha: 1.0,
            adaptive: true,
            multiplier: 2.0,
            commit_ladder: false,
            price_floor: 0.01,
            price_ceiling: 99.99,
            quadrature: QuadratureSpec::default(),
        }
    }
}

impl BmmConfig {
    /// Non-adaptive zero-profit baseline.
    pub fn zero_profit() -> Self {
        Self {
            adaptive: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), BmmError> {
        BmmBelief::new(self.mu0, self.sigma0, self.sigma_eps, self.sigma_cap)?;
        if self.window == 0 {
            return Err(BmmError::InvalidConfig("window must be at least 1".into()));
        }
        if !(self.alpha > 0.0) {
            return Err(BmmError::InvalidConfig("alpha must be positive".into()));
        }
        if !(self.multiplier > 1.0) {
            return Err(BmmError::InvalidConfig("variance multiplier must exceed 1".into()));
        }
        if !(self.price_floor < self.price_ceiling) {
            return Err(BmmError::InvalidConfig("price floor must be below ceiling".into()));
        }
        self.quadrature.validate().map_err(BmmError::InvalidConfig)
    }
}

/// What [`BmmState::confirm`] did.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConfirmReport {
    pub observation: Option<RangeObservation>,
    pub skipped: Option<BmmError>,
    pub doubled: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BmmState {
    pub belief: BmmBelief,
    pub window: VecDeque<RangeObservation>,
    pub config: BmmConfig,
}

impl BmmState {
    pub fn new(config: BmmConfig) -> Result<Self, BmmError> {
        config.validate()?;
        Ok(Self {
            belief: BmmBelief {
                mu: config.mu0,
                sigma: config.sigma0,
                sigma_eps: config.sigma_eps,
                sigma_cap: config.sigma_cap,
            },
            window: VecDeque::with_capacity(config.window),
            config,
        })
    }

    pub fn spot_price(&self) -> f64 {
        self.belief.mu
    }

    /// Price `qty` shares as `⌈qty/α⌉` fictitious mini-orders.
    pub fn quote_ladder(&self, side: Side, qty: f64) -> Ladder {
        assert!(qty > 0.0, "quote quantity must be positive, got {qty}");
        let alpha = self.config.alpha;
        let count = (qty / alpha).ceil().max(1.0) as usize;
        let mut belief = self.belief;
        let mut rungs = Vec::with_capacity(count);
        let mut notional = 0.0;
        for i in 0..count {
            let size = if i + 1 == count { qty - alpha * (count - 1) as f64 } else { alpha };
            let price = belief.quote(side);
            rungs.push((size, price));
            notional += size * price;
            let obs = match side {
                Side::Buy => RangeObservation::above(price),
                Side::Sell => RangeObservation::below(price),
            };
            if let Ok(next) = belief.range_update(&obs) {
                belief = next;
            }
        }
        Ladder {
            price: notional / qty,
            rungs,
            terminal: belief,
        }
    }

    pub fn quote_vwap(&self, side: Side, qty: f64) -> (f64, Vec<(f64, f64)>) {
        let ladder = self.quote_ladder(side, qty);
        (ladder.price, ladder.rungs)
    }

    /// Learn from the trader's response to a quote.
    pub fn confirm(
        &mut self,
        side: Side,
        qty: f64,
        quoted_price: f64,
        spot_at_quote: f64,
        accepted: bool,
    ) -> ConfirmReport {
        let obs = match (side, accepted) {
            (Side::Buy, true) => RangeObservation::above(quoted_price),
            (Side::Buy, false) => RangeObservation::between(spot_at_quote, quoted_price),
            (Side::Sell, true) => RangeObservation::below(quoted_price),
            (Side::Sell, false) => RangeObservation::between(quoted_price, spot_at_quote),
        };
        let mut report = ConfirmReport {
            observation: Some(obs),
            ..ConfirmReport::default()
        };
        if accepted && self.config.commit_ladder {
            self.belief = self.quote_ladder(side, qty).terminal;
        } else {
            match self.belief.range_update(&obs) {
                Ok(next) => self.belief = next,
                Err(e) => report.skipped = Some(e),
            }
        }
        if self.window.len() == self.config.window {
            self.window.pop_front();
        }
        self.window.push_back(obs);
        if self.config.adaptive {
            report.doubled = self.consistency_check();
        }
        report
    }

    /// Consistency index `L(μ, mσ) − L(μ, σ)` over the current window.
    pub fn consistency_index(&self) -> Option<f64> {
        if self.window.is_empty() {
            return None;
        }
        let spec = self.config.quadrature;
        let wide = window_likelihood(&self.belief, self.window.iter(), self.config.multiplier, spec);
        let narrow = window_likelihood(&self.belief, self.window.iter(), 1.0, spec);
        Some(wide - narrow)
    }

    /// Widen σ once when the full window is more likely under a wider
    /// belief. Returns whether σ changed.
    pub fn consistency_check(&mut self) -> bool {
        if self.window.len() < self.config.window {
            return false;
        }
        match self.consistency_index() {
            Some(c) if c > 0.0 => {
                let widened = (self.belief.sigma * self.config.multiplier).min(self.belief.sigma_cap);
                let changed = widened != self.belief.sigma;
                self.belief.sigma = widened;
                changed
            }
            _ => false,
        }
    }
}

/// Probability of a window of range observations with the belief's
/// standard deviation scaled by `sigma_multiplier`.
pub fn window_likelihood<'a, I>(
    belief: &BmmBelief,
    window: I,
    sigma_multiplier: f64,
    spec: QuadratureSpec,
) -> f64
where
    I: IntoIterator<Item = &'a RangeObservation>,
{
    let obs: Vec<RangeObservation> = window.into_iter().copied().collect();
    assert!(!obs.is_empty(), "likelihood of an empty window");
    if obs.iter().all(|o| o.lower.is_none() && o.upper.is_none()) {
        return 1.0;
    }
    let sigma_eps = belief.sigma_eps;
    let integrand = |v: f64| obs.iter().map(|o| o.likelihood(v, sigma_eps)).product::<f64>();
    integrate_gaussian_weighted(integrand, belief.mu, sigma_multiplier * belief.sigma, spec).clamp(0.0, 1.0)
}
