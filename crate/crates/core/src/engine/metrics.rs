//! Run statistics: market maker profit, spread and price error.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::events::{CancelReason, EventBody, Quote, QuoteId, TradeEvent};
use super::EngineError;
use crate::{MarketMakerState, Side};

/// Piecewise-constant reference value over time.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TruthSeries {
    points: Vec<(u64, f64)>,
}

impl TruthSeries {
    pub fn new() -> Self {
        Self::default()
    }

    /// Record the value in force from `ts_ms` on. Repeated values are kept
    /// out so that the last change is a real change.
    pub fn push(&mut self, ts_ms: u64, value: f64) {
        if let Some(&(last_ts, last)) = self.points.last() {
            assert!(ts_ms >= last_ts, "truth series must be pushed in time order");
            if last == value {
                return;
            }
            if last_ts == ts_ms {
                self.points.pop();
                if self.points.last().is_some_and(|&(_, v)| v == value) {
                    return;
                }
            }
        }
        self.points.push((ts_ms, value));
    }

    /// The `true_value` events of one market.
    pub fn from_events(events: &[TradeEvent], market: &str) -> Self {
        let mut series = Self::new();
        for e in events {
            if let EventBody::TrueValue { market: m, value } = &e.body {
                if m == market {
                    series.push(e.ts_ms, *value);
                }
            }
        }
        series
    }

    pub fn at(&self, ts_ms: u64) -> Option<f64> {
        let idx = self.points.partition_point(|&(t, _)| t <= ts_ms);
        idx.checked_sub(1).map(|i| self.points[i].1)
    }

    pub fn last_change_ts(&self) -> Option<u64> {
        self.points.last().map(|&(t, _)| t)
    }

    pub fn final_value(&self) -> Option<f64> {
        self.points.last().map(|&(_, v)| v)
    }

    pub fn points(&self) -> &[(u64, f64)] {
        &self.points
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsConfig {
    /// Shares in the spread probe taken after every fill.
    pub probe_qty: f64,
    /// Report half of buy-minus-sell.
    pub half_spread: bool,
}

impl MetricsConfig {
    pub fn simulation() -> Self {
        Self {
            probe_qty: 20.0,
            half_spread: true,
        }
    }

    pub fn live() -> Self {
        Self {
            probe_qty: 40.0,
            half_spread: false,
        }
    }
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self::simulation()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub mm_profit: f64,
    /// Loss of this run, zero when the market maker made money.
    pub mm_max_loss: f64,
    /// NaN when nothing traded.
    pub avg_spread: f64,
    pub rmsd: f64,
    /// RMSD over the second half of the last stretch of constant truth.
    pub rmsd_eq: f64,
    pub buys: u64,
    pub sells: u64,
    pub samples: u64,
}

/// Online collector shared by live runs and log-based recomputation.
#[derive(Debug, Clone)]
pub struct MetricsAccumulator {
    config: MetricsConfig,
    spread_sum: f64,
    spread_n: u64,
    deviations: Vec<(u64, f64)>,
    buys: u64,
    sells: u64,
}

impl MetricsAccumulator {
    pub fn new(config: MetricsConfig) -> Self {
        Self {
            config,
            spread_sum: 0.0,
            spread_n: 0,
            deviations: Vec::new(),
            buys: 0,
            sells: 0,
        }
    }

    /// A fill happened and left the market maker in `mm`.
    pub fn record_fill(&mut self, side: Side, mm: &MarketMakerState) {
        match side {
            Side::Buy => self.buys += 1,
            Side::Sell => self.sells += 1,
        }
        let spread = mm.probe_spread(self.config.probe_qty);
        self.spread_sum += if self.config.half_spread { 0.5 * spread } else { spread };
        self.spread_n += 1;
    }

    /// A quote was resolved; compare the new spot with the truth.
    pub fn record_price(&mut self, ts_ms: u64, spot: f64, truth: f64) {
        self.deviations.push((ts_ms, spot - truth));
    }

    pub fn finish(&self, mm_profit: f64, truth: &TruthSeries, end_ts: u64) -> RunMetrics {
        let rms = |devs: &mut dyn Iterator<Item = f64>| {
            let (sum, n) = devs.fold((0.0, 0u64), |(s, n), d| (s + d * d, n + 1));
            if n == 0 {
                f64::NAN
            } else {
                (sum / n as f64).sqrt()
            }
        };
        let rmsd = rms(&mut self.deviations.iter().map(|&(_, d)| d));
        let from = truth.last_change_ts().unwrap_or(0).min(end_ts);
        let eq_start = from as f64 + 0.5 * (end_ts - from) as f64;
        let rmsd_eq = rms(&mut self
            .deviations
            .iter()
            .filter(|&&(t, _)| t as f64 >= eq_start)
            .map(|&(_, d)| d));
        RunMetrics {
            mm_profit,
            mm_max_loss: (-mm_profit).max(0.0),
            avg_spread: if self.spread_n == 0 {
                f64::NAN
            } else {
                self.spread_sum / self.spread_n as f64
            },
            rmsd,
            rmsd_eq,
            buys: self.buys,
            sells: self.sells,
            samples: self.deviations.len() as u64,
        }
    }
}

/// Recompute one market's statistics from the log alone.
///
/// The market maker is rebuilt from its configuration and fed every
/// resolution; a regenerated spot that differs from the logged one is an
/// error. Shares settle at the logged settlement value, or at the final
/// value of `truth` when the session was never settled.
pub fn compute_metrics(
    events: &[TradeEvent],
    market: &str,
    truth: &TruthSeries,
    config: MetricsConfig,
) -> Result<RunMetrics, EngineError> {
    let mut mm: Option<MarketMakerState> = None;
    let mut pending: HashMap<QuoteId, Quote> = HashMap::new();
    let mut acc = MetricsAccumulator::new(config);
    let mut cash = 0.0;
    let mut shares = 0.0;
    let mut end_ts = None;
    let mut settle_value = None;

    for e in events {
        match &e.body {
            EventBody::Opened { config, .. } => {
                let spec = config
                    .markets
                    .iter()
                    .find(|s| s.id == market)
                    .ok_or_else(|| EngineError::UnknownMarket(market.to_owned()))?;
                mm = Some(MarketMakerState::from_config(&spec.mm).map_err(EngineError::InvalidConfig)?);
            }
            EventBody::Quoted(q) if q.market == market => {
                pending.insert(q.id, q.clone());
            }
            EventBody::Accepted(r) | EventBody::Canceled(r) | EventBody::Expired(r) if r.market == market => {
                let q = pending.remove(&r.quote_id).ok_or_else(|| EngineError::ReplayMismatch {
                    seq: e.seq,
                    detail: format!("quote {} resolved without being issued", r.quote_id),
                })?;
                if r.reason == Some(CancelReason::SessionEnded) {
                    continue;
                }
                let mm = mm.as_mut().ok_or_else(|| EngineError::ReplayMismatch {
                    seq: e.seq,
                    detail: "resolution before the session opened".into(),
                })?;
                let accepted = matches!(e.body, EventBody::Accepted(_));
                mm.resolve(q.side, f64::from(q.qty), q.vwap, q.spot_at_quote, accepted);
                let spot = mm.spot();
                if spot.to_bits() != r.spot_after.to_bits() {
                    return Err(EngineError::ReplayMismatch {
                        seq: e.seq,
                        detail: format!("logged spot {} but recomputed {spot}", r.spot_after),
                    });
                }
                if accepted {
                    let sign = q.side.sign();
                    cash += sign * q.vwap * f64::from(q.qty);
                    shares -= sign * f64::from(q.qty);
                    acc.record_fill(q.side, mm);
                }
                if let Some(v) = truth.at(e.ts_ms) {
                    acc.record_price(e.ts_ms, spot, v);
                }
            }
            EventBody::SessionEnded {} => end_ts = Some(e.ts_ms),
            EventBody::Settlement(report) => {
                settle_value = report.market(market).map(|m| m.value);
            }
            _ => {}
        }
    }
    let value = settle_value
        .or(truth.final_value())
        .ok_or_else(|| EngineError::InvalidConfig(format!("no value to settle market `{market}` at")))?;
    let end_ts = end_ts.unwrap_or_else(|| events.last().map_or(0, |e| e.ts_ms));
    Ok(acc.finish(cash + shares * value, truth, end_ts))
}
