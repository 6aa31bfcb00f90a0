//! Two-dimensional gambler's-ruin walk.
//!
//! The horizontal (LR) and vertical (TB) coordinates are independent
//! bounded walks on `[-S, S]`. When a coordinate reaches an edge the edge's
//! counter is bumped and that coordinate alone restarts at `x0` (or `y0`).
//! Positive `y` points down, so `p_tb` is the probability of a down step
//! and the TB market pays on the bottom edge.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WalkError {
    #[error("invalid walk configuration: {0}")]
    InvalidConfig(String),
    #[error("no {0} edge hits observed yet")]
    NoHits(&'static str),
}

/// Probability that a walk started at `x0` reaches `+S` before `−S` when
/// each step goes right with probability `p`.
///
/// Written as `λ^(S−x0)·expm1((S+x0)·ln λ)/expm1(2S·ln λ)` with
/// `λ = p/(1−p)`, which is continuous through `p = 1/2`.
pub fn analytic_value(p: f64, s: u32, x0: i32) -> f64 {
    assert!(p > 0.0 && p < 1.0, "step probability must lie in (0, 1), got {p}");
    let s_i = s as i32;
    assert!(x0.abs() < s_i, "restart coordinate {x0} outside (-{s}, {s})");
    let ln_lambda = p.ln() - (-p).ln_1p();
    let up = f64::from(s_i + x0);
    let full = 2.0 * f64::from(s);
    if ln_lambda == 0.0 {
        return up / full;
    }
    // for λ > 1 rewrite in terms of 1/λ so nothing overflows for large S
    if ln_lambda > 0.0 {
        let l = -ln_lambda;
        // V = (1 − λ^-(S+x0)) / (1 − λ^-2S)
        return (up * l).exp_m1() / (full * l).exp_m1();
    }
    (f64::from(s_i - x0) * ln_lambda).exp() * (up * ln_lambda).exp_m1() / (full * ln_lambda).exp_m1()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Axis {
    /// Horizontal walk, LR market.
    Lr,
    /// Vertical walk, TB market.
    Tb,
}

/// Replacement parameters applied by a shock. `None` keeps the current value.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct WalkChange {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_lr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_tb: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<i32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y0: Option<i32>,
}

/// When a scheduled shock fires.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ShockTiming {
    At { at_ms: u64 },
    /// With probability `probability`, fire at a uniform time in `[from_ms, to_ms]`.
    Random { from_ms: u64, to_ms: u64, probability: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduledShock {
    pub timing: ShockTiming,
    pub change: WalkChange,
}

impl ScheduledShock {
    pub fn at(at_ms: u64, change: WalkChange) -> Self {
        Self {
            timing: ShockTiming::At { at_ms },
            change,
        }
    }

    /// Draw the concrete firing time, or `None` if the shock does not happen.
    pub fn resolve<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<u64> {
        match self.timing {
            ShockTiming::At { at_ms } => Some(at_ms),
            ShockTiming::Random {
                from_ms,
                to_ms,
                probability,
            } => {
                if rng.random::<f64>() < probability {
                    Some(rng.random_range(from_ms..=to_ms.max(from_ms)))
                } else {
                    None
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WalkConfig {
    pub p_lr: f64,
    pub p_tb: f64,
    pub s: u32,
    pub x0: i32,
    pub y0: i32,
    #[serde(default = "default_step_interval")]
    pub step_interval_ms: u64,
    #[serde(default)]
    pub shocks: Vec<ScheduledShock>,
}

fn default_step_interval() -> u64 {
    100
}

impl WalkConfig {
    /// Same `p` and restart coordinate on both axes.
    pub fn symmetric(p: f64, s: u32, z: i32) -> Self {
        Self {
            p_lr: p,
            p_tb: p,
            s,
            x0: z,
            y0: z,
            step_interval_ms: default_step_interval(),
            shocks: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), WalkError> {
        for (name, p) in [("p_lr", self.p_lr), ("p_tb", self.p_tb)] {
            if !(p > 0.0 && p < 1.0) {
                return Err(WalkError::InvalidConfig(format!("{name} must lie in (0, 1), got {p}")));
            }
        }
        if self.s == 0 {
            return Err(WalkError::InvalidConfig("S must be positive".into()));
        }
        let s = self.s as i32;
        if self.x0.abs() >= s || self.y0.abs() >= s {
            return Err(WalkError::InvalidConfig(format!(
                "restart point ({}, {}) must lie strictly inside (-{s}, {s})",
                self.x0, self.y0
            )));
        }
        if self.step_interval_ms == 0 {
            return Err(WalkError::InvalidConfig("step interval must be positive".into()));
        }
        Ok(())
    }

    /// Config with a shock's replacements applied.
    pub fn apply_shock(&self, change: &WalkChange) -> Result<Self, WalkError> {
        let next = Self {
            p_lr: change.p_lr.unwrap_or(self.p_lr),
            p_tb: change.p_tb.unwrap_or(self.p_tb),
            s: change.s.unwrap_or(self.s),
            x0: change.x0.unwrap_or(self.x0),
            y0: change.y0.unwrap_or(self.y0),
            step_interval_ms: self.step_interval_ms,
            shocks: self.shocks.clone(),
        };
        next.validate()?;
        Ok(next)
    }

    /// Analytic value of the LR and TB markets, in probability units.
    pub fn values(&self) -> (f64, f64) {
        (
            analytic_value(self.p_lr, self.s, self.x0),
            analytic_value(self.p_tb, self.s, self.y0),
        )
    }

    pub fn value(&self, axis: Axis) -> f64 {
        match axis {
            Axis::Lr => analytic_value(self.p_lr, self.s, self.x0),
            Axis::Tb => analytic_value(self.p_tb, self.s, self.y0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EdgeHits {
    pub left: u64,
    pub right: u64,
    pub top: u64,
    pub bottom: u64,
}

impl EdgeHits {
    /// Empirical `(right/(right+left), bottom/(bottom+top))`.
    pub fn observed_ratio(&self) -> Result<(f64, f64), WalkError> {
        let h = self.left + self.right;
        if h == 0 {
            return Err(WalkError::NoHits("horizontal"));
        }
        let v = self.top + self.bottom;
        if v == 0 {
            return Err(WalkError::NoHits("vertical"));
        }
        Ok((self.right as f64 / h as f64, self.bottom as f64 / v as f64))
    }

    pub fn observed(&self, axis: Axis) -> Result<f64, WalkError> {
        match axis {
            Axis::Lr if self.left + self.right == 0 => Err(WalkError::NoHits("horizontal")),
            Axis::Lr => Ok(self.right as f64 / (self.left + self.right) as f64),
            Axis::Tb if self.top + self.bottom == 0 => Err(WalkError::NoHits("vertical")),
            Axis::Tb => Ok(self.bottom as f64 / (self.top + self.bottom) as f64),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct WalkState {
    pub x: i32,
    pub y: i32,
    pub hits: EdgeHits,
    pub elapsed_steps: u64,
}

impl WalkState {
    pub fn start(config: &WalkConfig) -> Self {
        Self {
            x: config.x0,
            y: config.y0,
            ..Self::default()
        }
    }

    /// One tick: both coordinates move, then each is checked against the
    /// edges independently.
    pub fn step<R: Rng + ?Sized>(&self, config: &WalkConfig, rng: &mut R) -> WalkState {
        let s = config.s as i32;
        let mut next = *self;
        next.x += if rng.random::<f64>() < config.p_lr { 1 } else { -1 };
        next.y += if rng.random::<f64>() < config.p_tb { 1 } else { -1 };
        if next.x >= s {
            next.hits.right += 1;
            next.x = config.x0;
        } else if next.x <= -s {
            next.hits.left += 1;
            next.x = config.x0;
        }
        if next.y >= s {
            next.hits.bottom += 1;
            next.y = config.y0;
        } else if next.y <= -s {
            next.hits.top += 1;
            next.y = config.y0;
        }
        next.elapsed_steps += 1;
        next
    }

    /// Keep the position across a shock, pulling a coordinate back to its
    /// restart point if a smaller grid left it on or past an edge.
    pub fn after_shock(&self, config: &WalkConfig) -> WalkState {
        let s = config.s as i32;
        let mut next = *self;
        if next.x.abs() >= s {
            next.x = config.x0;
        }
        if next.y.abs() >= s {
            next.y = config.y0;
        }
        next
    }
}
