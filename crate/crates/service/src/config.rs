//! Session configuration as posted by an operator.

use dealer_core::engine::{Endowment, MarketSpec, OpenConfig};
use dealer_core::walk::{Axis, WalkConfig};
use dealer_core::MarketMakerConfig;
use serde::{Deserialize, Serialize};

use crate::error::ServiceError;

pub const LR: &str = "LR";
pub const TB: &str = "TB";
pub const MARKETS: [&str; 2] = [LR, TB];

pub fn axis_of(market: &str) -> Option<Axis> {
    match market {
        LR => Some(Axis::Lr),
        TB => Some(Axis::Tb),
        _ => None,
    }
}

/// Which market maker runs each market. Swapping the two fields flips the
/// assignment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketAssignment {
    #[serde(rename = "LR")]
    pub lr: MarketMakerConfig,
    #[serde(rename = "TB")]
    pub tb: MarketMakerConfig,
}

/// What shares pay at settlement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayoffMode {
    /// 100 times the gambler's-ruin probability under the walk parameters
    /// in force at the end.
    #[default]
    Analytic,
    /// 100 times the fraction of edge hits observed during the session.
    Realized,
}

/// What each trader sees of the walk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum InfoMode {
    /// One walk, shown to everyone.
    #[default]
    Shared,
    /// Every trader watches an independent realization.
    PerTrader,
    /// Independent realizations, shown only for the first `view_ms`.
    Limited { view_ms: u64 },
}

impl InfoMode {
    pub fn per_trader(self) -> bool {
        !matches!(self, InfoMode::Shared)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionConfig {
    /// Generated when absent.
    #[serde(default)]
    pub id: Option<String>,
    pub duration_ms: u64,
    pub markets: MarketAssignment,
    pub walk: WalkConfig,
    #[serde(default = "default_endowment")]
    pub endowment: Endowment,
    #[serde(default)]
    pub payoff: PayoffMode,
    #[serde(default)]
    pub info: InfoMode,
    /// Drives the walks and random shock times. Generated when absent.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_ttl")]
    pub quote_ttl_ms: u64,
}

fn default_endowment() -> Endowment {
    Endowment {
        cash: 100_000.0,
        shares: 0.0,
        short_allowed: true,
    }
}

fn default_ttl() -> u64 {
    10_000
}

pub fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

impl SessionConfig {
    pub fn new(duration_ms: u64, markets: MarketAssignment, walk: WalkConfig) -> Self {
        Self {
            id: None,
            duration_ms,
            markets,
            walk,
            endowment: default_endowment(),
            payoff: PayoffMode::default(),
            info: InfoMode::default(),
            seed: None,
            quote_ttl_ms: default_ttl(),
        }
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        let bad = |m: String| Err(ServiceError::Validation(m));
        if self.duration_ms == 0 {
            return bad("duration_ms must be positive".into());
        }
        if let Some(id) = &self.id {
            if !valid_id(id) {
                return bad(format!("session id `{id}` must be 1-64 characters of [A-Za-z0-9_-]"));
            }
        }
        for (name, mm) in [(LR, &self.markets.lr), (TB, &self.markets.tb)] {
            mm.validate().map_err(|e| ServiceError::Validation(format!("market {name}: {e}")))?;
        }
        self.walk.validate().map_err(|e| ServiceError::Validation(e.to_string()))?;
        let mut probe = self.walk.clone();
        for shock in &self.walk.shocks {
            probe = probe
                .apply_shock(&shock.change)
                .map_err(|e| ServiceError::Validation(format!("scheduled shock: {e}")))?;
        }
        let e = &self.endowment;
        if !(e.cash.is_finite() && e.shares.is_finite() && e.cash >= 0.0 && e.shares >= 0.0) {
            return bad("endowment cash and shares must be finite and non-negative".into());
        }
        if let InfoMode::Limited { view_ms: 0 } = self.info {
            return bad("view_ms must be positive".into());
        }
        Ok(())
    }

    pub fn open_config(&self) -> OpenConfig {
        OpenConfig {
            markets: vec![
                MarketSpec {
                    id: LR.into(),
                    mm: self.markets.lr,
                },
                MarketSpec {
                    id: TB.into(),
                    mm: self.markets.tb,
                },
            ],
            quote_ttl_ms: self.quote_ttl_ms,
        }
    }
}
