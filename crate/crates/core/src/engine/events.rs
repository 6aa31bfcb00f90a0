use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::EngineError;
use crate::walk::{WalkChange, WalkState};
use crate::{MarketMakerConfig, Side};

pub type MarketId = String;
pub type TraderId = String;
pub type QuoteId = u64;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketSpec {
    pub id: MarketId,
    pub mm: MarketMakerConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenConfig {
    pub markets: Vec<MarketSpec>,
    pub quote_ttl_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Endowment {
    pub cash: f64,
    /// Shares of every market at the start.
    pub shares: f64,
    pub short_allowed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuoteStatus {
    Open,
    Accepted,
    Canceled,
    Expired,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quote {
    pub id: QuoteId,
    pub market: MarketId,
    pub trader: TraderId,
    pub side: Side,
    pub qty: u32,
    pub vwap: f64,
    pub spot_at_quote: f64,
    pub issued_at: u64,
    pub expires_at: u64,
    pub status: QuoteStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CancelReason {
    Rejected,
    InsufficientFunds,
    InsufficientShares,
    /// Still open when trading stopped; the market maker is not told.
    SessionEnded,
}

/// Terminal record of a quote.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Resolved {
    pub quote_id: QuoteId,
    pub market: MarketId,
    pub trader: TraderId,
    pub side: Side,
    pub qty: u32,
    pub price: f64,
    pub spot_after: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<CancelReason>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketSettlement {
    pub market: MarketId,
    pub value: f64,
    pub mm_cash: f64,
    pub mm_shares: f64,
    pub mm_profit: f64,
    pub trader_pnl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraderSettlement {
    pub trader: TraderId,
    pub cash: f64,
    pub positions: BTreeMap<MarketId, f64>,
    pub initial_wealth: f64,
    pub final_wealth: f64,
    pub pnl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettlementReport {
    pub markets: Vec<MarketSettlement>,
    /// Ranked by final wealth, richest first.
    pub leaderboard: Vec<TraderSettlement>,
}

impl SettlementReport {
    pub fn values(&self) -> BTreeMap<MarketId, f64> {
        self.markets.iter().map(|m| (m.market.clone(), m.value)).collect()
    }

    pub fn market(&self, id: &str) -> Option<&MarketSettlement> {
        self.markets.iter().find(|m| m.market == id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum EventBody {
    Opened {
        schema: u32,
        config: OpenConfig,
    },
    TraderRegistered {
        trader: TraderId,
        endowment: Endowment,
    },
    SessionStarted {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        duration_ms: Option<u64>,
    },
    QuoteRequested {
        market: MarketId,
        trader: TraderId,
        side: Side,
        qty: u32,
    },
    Quoted(Quote),
    Accepted(Resolved),
    Canceled(Resolved),
    Expired(Resolved),
    /// Public spot price after a market maker state change.
    Price {
        market: MarketId,
        spot: f64,
    },
    /// An observation the Bayesian market maker could not absorb.
    BeliefSkipped {
        market: MarketId,
        lower: Option<f64>,
        upper: Option<f64>,
    },
    /// Reference value a market is measured (and by default settled) against.
    TrueValue {
        market: MarketId,
        value: f64,
    },
    WalkStep {
        /// `shared` or a trader id for per-trader walks.
        walk: String,
        state: WalkState,
    },
    Shock {
        change: WalkChange,
    },
    SessionEnded {},
    Settlement(SettlementReport),
}

impl EventBody {
    pub fn kind(&self) -> &'static str {
        match self {
            EventBody::Opened { .. } => "opened",
            EventBody::TraderRegistered { .. } => "trader_registered",
            EventBody::SessionStarted { .. } => "session_started",
            EventBody::QuoteRequested { .. } => "quote_requested",
            EventBody::Quoted(_) => "quoted",
            EventBody::Accepted(_) => "accepted",
            EventBody::Canceled(_) => "canceled",
            EventBody::Expired(_) => "expired",
            EventBody::Price { .. } => "price",
            EventBody::BeliefSkipped { .. } => "belief_skipped",
            EventBody::TrueValue { .. } => "true_value",
            EventBody::WalkStep { .. } => "walk_step",
            EventBody::Shock { .. } => "shock",
            EventBody::SessionEnded {} => "session_ended",
            EventBody::Settlement(_) => "settlement",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeEvent {
    pub seq: u64,
    pub ts_ms: u64,
    pub session: String,
    #[serde(flatten)]
    pub body: EventBody,
}

impl TradeEvent {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("trade events always serialize")
    }
}

/// Append-only event store with an optional JSON-lines sink.
pub struct EventLog {
    events: Vec<TradeEvent>,
    sink: Option<Box<dyn Write + Send>>,
}

impl std::fmt::Debug for EventLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EventLog")
            .field("events", &self.events.len())
            .field("sink", &self.sink.is_some())
            .finish()
    }
}

impl EventLog {
    pub fn new() -> Self {
        Self {
            events: Vec::new(),
            sink: None,
        }
    }

    pub fn with_sink(sink: Box<dyn Write + Send>) -> Self {
        Self {
            events: Vec::new(),
            sink: Some(sink),
        }
    }

    pub fn events(&self) -> &[TradeEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn last_ts(&self) -> u64 {
        self.events.last().map_or(0, |e| e.ts_ms)
    }

    pub fn into_events(self) -> Vec<TradeEvent> {
        self.events
    }

    pub(crate) fn adopt(&mut self, other: EventLog) {
        self.events = other.events;
    }

    pub(crate) fn append(&mut self, session: &str, ts_ms: u64, body: EventBody) -> Result<&TradeEvent, EngineError> {
        let event = TradeEvent {
            seq: self.events.len() as u64,
            ts_ms: ts_ms.max(self.last_ts()),
            session: session.to_owned(),
            body,
        };
        if let Some(sink) = self.sink.as_mut() {
            writeln!(sink, "{}", event.to_json_line())?;
            sink.flush()?;
        }
        self.events.push(event);
        Ok(self.events.last().expect("just pushed"))
    }
}

impl Default for EventLog {
    fn default() -> Self {
        Self::new()
    }
}

/// Parse a JSON-lines event log. Blank lines are ignored; anything else
/// that does not parse is reported with its 1-based line number.
pub fn read_log<R: BufRead>(reader: R) -> Result<Vec<TradeEvent>, EngineError> {
    let mut events = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let event: TradeEvent = serde_json::from_str(&line).map_err(|e| EngineError::MalformedLog {
            line: i + 1,
            message: e.to_string(),
        })?;
        if event.seq != events.len() as u64 {
            return Err(EngineError::MalformedLog {
                line: i + 1,
                message: format!("expected seq {}, found {}", events.len(), event.seq),
            });
        }
        events.push(event);
    }
    Ok(events)
}

pub fn write_log<W: Write>(mut writer: W, events: &[TradeEvent]) -> std::io::Result<()> {
    for e in events {
        writeln!(writer, "{}", e.to_json_line())?;
    }
    writer.flush()
}
