//! Common quoting interface over the two market makers.

use serde::{Deserialize, Serialize};

use crate::bmm::{BmmConfig, BmmError, BmmState, ConfirmReport};
use crate::lmsr::{LmsrState, DEFAULT_SCALE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Buy,
    Sell,
}

impl Side {
    /// +1 for buys, −1 for sells.
    pub fn sign(self) -> f64 {
        match self {
            Side::Buy => 1.0,
            Side::Sell => -1.0,
        }
    }
}

impl std::fmt::Display for Side {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Side::Buy => "buy",
            Side::Sell => "sell",
        })
    }
}

impl std::str::FromStr for Side {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "buy" => Ok(Side::Buy),
            "sell" => Ok(Side::Sell),
            other => Err(format!("unknown side `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum MarketMakerConfig {
    Lmsr {
        b: f64,
        #[serde(default = "default_scale")]
        scale: f64,
    },
    Bmm(BmmConfig),
}

fn default_scale() -> f64 {
    DEFAULT_SCALE
}

impl MarketMakerConfig {
    pub fn lmsr(b: f64) -> Self {
        MarketMakerConfig::Lmsr {
            b,
            scale: DEFAULT_SCALE,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            MarketMakerConfig::Lmsr { .. } => "lmsr",
            MarketMakerConfig::Bmm(c) if c.adaptive => "bmm",
            MarketMakerConfig::Bmm(_) => "zp",
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        match self {
            MarketMakerConfig::Lmsr { b, scale } => {
                if !(*b > 0.0 && b.is_finite()) {
                    return Err(format!("LMSR b must be positive, got {b}"));
                }
                if !(*scale > 0.0 && scale.is_finite()) {
                    return Err(format!("LMSR scale must be positive, got {scale}"));
                }
                Ok(())
            }
            MarketMakerConfig::Bmm(c) => c.validate().map_err(|e| e.to_string()),
        }
    }
}

/// Effect of a resolved quote on the market maker.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Resolution {
    pub skipped: Option<BmmError>,
    pub doubled: bool,
}

impl From<ConfirmReport> for Resolution {
    fn from(r: ConfirmReport) -> Self {
        Resolution {
            skipped: r.skipped,
            doubled: r.doubled,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MarketMakerState {
    Lmsr(LmsrState),
    Bmm(BmmState),
}

impl MarketMakerState {
    pub fn from_config(config: &MarketMakerConfig) -> Result<Self, String> {
        config.validate()?;
        Ok(match config {
            MarketMakerConfig::Lmsr { b, scale } => MarketMakerState::Lmsr(LmsrState::new(*b, *scale)),
            MarketMakerConfig::Bmm(c) => MarketMakerState::Bmm(BmmState::new(*c).map_err(|e| e.to_string())?),
        })
    }

    /// Infinitesimal price shown to arriving traders.
    pub fn spot(&self) -> f64 {
        match self {
            MarketMakerState::Lmsr(s) => s.spot_price(),
            MarketMakerState::Bmm(s) => self.bmm_clamp(s, s.spot_price()),
        }
    }

    /// Per-share price for `qty` shares; read-only.
    pub fn quote(&self, side: Side, qty: f64) -> f64 {
        match self {
            MarketMakerState::Lmsr(s) => s.quote_vwap(side, qty),
            MarketMakerState::Bmm(s) => self.bmm_clamp(s, s.quote_vwap(side, qty).0),
        }
    }

    /// Buy price minus sell price for a `qty`-share probe.
    pub fn probe_spread(&self, qty: f64) -> f64 {
        match self {
            MarketMakerState::Lmsr(s) => s.spread(qty),
            MarketMakerState::Bmm(_) => self.quote(Side::Buy, qty) - self.quote(Side::Sell, qty),
        }
    }

    /// Apply the trader's answer to a quote of `qty` shares at `price`.
    pub fn resolve(&mut self, side: Side, qty: f64, price: f64, spot_at_quote: f64, accepted: bool) -> Resolution {
        match self {
            MarketMakerState::Lmsr(s) => {
                if accepted {
                    *s = s.apply_trade(side.sign() * qty);
                }
                Resolution::default()
            }
            MarketMakerState::Bmm(s) => s.confirm(side, qty, price, spot_at_quote, accepted).into(),
        }
    }

    fn bmm_clamp(&self, s: &BmmState, price: f64) -> f64 {
        price.clamp(s.config.price_floor, s.config.price_ceiling)
    }

    pub fn as_bmm(&self) -> Option<&BmmState> {
        match self {
            MarketMakerState::Bmm(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_lmsr(&self) -> Option<&LmsrState> {
        match self {
            MarketMakerState::Lmsr(s) => Some(s),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lmsr_resolution_only_moves_on_accept() {
        let mut mm = MarketMakerState::from_config(&MarketMakerConfig::lmsr(125.0)).unwrap();
        let p = mm.quote(Side::Buy, 40.0);
        mm.resolve(Side::Buy, 40.0, p, 50.0, false);
        assert_eq!(mm.as_lmsr().unwrap().q, 0.0);
        mm.resolve(Side::Buy, 40.0, p, 50.0, true);
        assert_eq!(mm.as_lmsr().unwrap().q, 40.0);
    }

    #[test]
    fn bmm_prices_are_clamped() {
        let config = BmmConfig {
            mu0: 99.5,
            sigma0: 40.0,
            ..BmmConfig::default()
        };
        let mm = MarketMakerState::from_config(&MarketMakerConfig::Bmm(config)).unwrap();
        assert_eq!(mm.quote(Side::Buy, 10.0), 99.99);
        assert!(mm.spot() <= 99.99);
    }

    #[test]
    fn config_names_and_serde() {
        let zp = MarketMakerConfig::Bmm(BmmConfig::zero_profit());
        assert_eq!(zp.name(), "zp");
        let json = serde_json::to_string(&MarketMakerConfig::lmsr(125.0)).unwrap();
        assert_eq!(json, r#"{"type":"lmsr","b":125.0,"scale":100.0}"#);
        let back: MarketMakerConfig = serde_json::from_str(r#"{"type":"bmm","window":10}"#).unwrap();
        match back {
            MarketMakerConfig::Bmm(c) => assert_eq!(c.window, 10),
            _ => panic!("expected bmm"),
        }
        assert!(MarketMakerConfig::lmsr(-1.0).validate().is_err());
    }
}
