//! Trading sessions: quotes, accounts, settlement and the event log.
//!
//! The engine never reads a clock. Every command carries the caller's
//! timestamp, which makes a session a pure function of its command stream
//! and lets [`Engine::replay`] rebuild it from the log.

mod events;
mod metrics;

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bmm::BmmError;
use crate::walk::{WalkChange, WalkState};
use crate::{MarketMakerConfig, MarketMakerState, Side};

pub use events::{
    read_log, write_log, CancelReason, Endowment, EventBody, EventLog, MarketId, MarketSettlement, MarketSpec,
    OpenConfig, Quote, QuoteId, QuoteStatus, Resolved, SettlementReport, TradeEvent, TraderId, TraderSettlement,
    SCHEMA_VERSION,
};
pub use metrics::{compute_metrics, MetricsAccumulator, MetricsConfig, RunMetrics, TruthSeries};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("unknown market `{0}`")]
    UnknownMarket(MarketId),
    #[error("unknown trader `{0}`")]
    UnknownTrader(TraderId),
    #[error("trader `{0}` is already registered")]
    DuplicateTrader(TraderId),
    #[error("unknown quote {0}")]
    UnknownQuote(QuoteId),
    #[error("quote {id} is {status:?}, not open")]
    QuoteNotOpen { id: QuoteId, status: QuoteStatus },
    #[error("quote {0} has expired")]
    QuoteExpired(QuoteId),
    #[error("trader `{trader}` already has quote {quote_id} open in market `{market}`")]
    QuoteAlreadyOpen {
        trader: TraderId,
        market: MarketId,
        quote_id: QuoteId,
    },
    #[error("quantity must be a positive whole number of shares")]
    InvalidQuantity,
    #[error("insufficient cash: need {needed:.4}, have {available:.4}")]
    InsufficientFunds { needed: f64, available: f64 },
    #[error("insufficient shares: need {needed}, have {available}")]
    InsufficientShares { needed: f64, available: f64 },
    #[error("session is closed")]
    SessionClosed,
    #[error("cannot {action} a session that is {status}")]
    InvalidStatus { action: &'static str, status: SessionStatus },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("settlement does not balance: residual {residual:e} in market `{market}`")]
    ConservationViolated { market: MarketId, residual: f64 },
    #[error("malformed log at line {line}: {message}")]
    MalformedLog { line: usize, message: String },
    #[error("replay diverged at seq {seq}: {detail}")]
    ReplayMismatch { seq: u64, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionStatus {
    Pending,
    Live,
    Ended,
    Settled,
}

impl std::fmt::Display for SessionStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SessionStatus::Pending => "pending",
            SessionStatus::Live => "live",
            SessionStatus::Ended => "ended",
            SessionStatus::Settled => "settled",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Account {
    pub trader: TraderId,
    pub endowment: Endowment,
    pub cash: f64,
    pub positions: BTreeMap<MarketId, f64>,
    /// Net cash paid into each market.
    pub spent: BTreeMap<MarketId, f64>,
}

impl Account {
    pub fn position(&self, market: &str) -> f64 {
        self.positions.get(market).copied().unwrap_or(0.0)
    }

    pub fn wealth(&self, values: &BTreeMap<MarketId, f64>) -> f64 {
        self.cash
            + self
                .positions
                .iter()
                .map(|(m, q)| q * values.get(m).copied().unwrap_or(0.0))
                .sum::<f64>()
    }

    pub fn initial_wealth(&self, values: &BTreeMap<MarketId, f64>) -> f64 {
        self.endowment.cash
            + self
                .positions
                .keys()
                .map(|m| self.endowment.shares * values.get(m).copied().unwrap_or(0.0))
                .sum::<f64>()
    }
}

#[derive(Debug, Clone)]
pub struct MarketBook {
    pub id: MarketId,
    pub config: MarketMakerConfig,
    pub mm: MarketMakerState,
    /// Cash received by the market maker.
    pub mm_cash: f64,
    /// Shares held by the market maker; negative when it has sold.
    pub mm_shares: f64,
}

impl MarketBook {
    pub fn mm_profit(&self, value: f64) -> f64 {
        self.mm_cash + self.mm_shares * value
    }
}

pub struct Engine {
    session: String,
    config: OpenConfig,
    status: SessionStatus,
    duration_ms: Option<u64>,
    markets: BTreeMap<MarketId, MarketBook>,
    accounts: BTreeMap<TraderId, Account>,
    quotes: BTreeMap<QuoteId, Quote>,
    open: HashMap<(TraderId, MarketId), QuoteId>,
    next_quote_id: QuoteId,
    truth: BTreeMap<MarketId, f64>,
    walks: BTreeMap<String, WalkState>,
    settlement: Option<SettlementReport>,
    log: EventLog,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("session", &self.session)
            .field("status", &self.status)
            .field("markets", &self.markets.keys().collect::<Vec<_>>())
            .field("traders", &self.accounts.len())
            .field("log", &self.log)
            .finish()
    }
}

impl Engine {
    pub fn open(session: &str, config: OpenConfig, ts_ms: u64) -> Result<Self, EngineError> {
        Self::open_with_log(session, config, ts_ms, EventLog::new())
    }

    /// Open a session that also writes every event to `sink` as JSON lines.
    pub fn open_with_sink(
        session: &str,
        config: OpenConfig,
        ts_ms: u64,
        sink: Box<dyn Write + Send>,
    ) -> Result<Self, EngineError> {
        Self::open_with_log(session, config, ts_ms, EventLog::with_sink(sink))
    }

    fn open_with_log(session: &str, config: OpenConfig, ts_ms: u64, log: EventLog) -> Result<Self, EngineError> {
        if config.markets.is_empty() {
            return Err(EngineError::InvalidConfig("a session needs at least one market".into()));
        }
        let mut markets = BTreeMap::new();
        for spec in &config.markets {
            let mm = MarketMakerState::from_config(&spec.mm).map_err(EngineError::InvalidConfig)?;
            let book = MarketBook {
                id: spec.id.clone(),
                config: spec.mm,
                mm,
                mm_cash: 0.0,
                mm_shares: 0.0,
            };
            if markets.insert(spec.id.clone(), book).is_some() {
                return Err(EngineError::InvalidConfig(format!("duplicate market `{}`", spec.id)));
            }
        }
        let mut engine = Self {
            session: session.to_owned(),
            config: config.clone(),
            status: SessionStatus::Pending,
            duration_ms: None,
            markets,
            accounts: BTreeMap::new(),
            quotes: BTreeMap::new(),
            open: HashMap::new(),
            next_quote_id: 1,
            truth: BTreeMap::new(),
            walks: BTreeMap::new(),
            settlement: None,
            log,
        };
        engine.emit(
            ts_ms,
            EventBody::Opened {
                schema: SCHEMA_VERSION,
                config,
            },
        )?;
        Ok(engine)
    }

    /// Attach a JSON-lines sink for events appended from now on.
    pub fn set_sink(&mut self, sink: Box<dyn Write + Send>) {
        let events = std::mem::take(&mut self.log);
        let mut log = EventLog::with_sink(sink);
        log.adopt(events);
        self.log = log;
    }

    fn emit(&mut self, ts_ms: u64, body: EventBody) -> Result<(), EngineError> {
        self.log.append(&self.session, ts_ms, body)?;
        Ok(())
    }

    fn require(&self, action: &'static str, allowed: &[SessionStatus]) -> Result<(), EngineError> {
        if allowed.contains(&self.status) {
            Ok(())
        } else {
            Err(EngineError::InvalidStatus {
                action,
                status: self.status,
            })
        }
    }

    pub fn register_trader(&mut self, trader: &str, endowment: Endowment, ts_ms: u64) -> Result<(), EngineError> {
        self.require("register a trader in", &[SessionStatus::Pending, SessionStatus::Live])?;
        if self.accounts.contains_key(trader) {
            return Err(EngineError::DuplicateTrader(trader.to_owned()));
        }
        if !(endowment.cash.is_finite() && endowment.shares.is_finite()) || endowment.shares < 0.0 {
            return Err(EngineError::InvalidConfig("endowment must be finite with non-negative shares".into()));
        }
        let positions = self.markets.keys().map(|m| (m.clone(), endowment.shares)).collect();
        let spent = self.markets.keys().map(|m| (m.clone(), 0.0)).collect();
        self.accounts.insert(
            trader.to_owned(),
            Account {
                trader: trader.to_owned(),
                endowment,
                cash: endowment.cash,
                positions,
                spent,
            },
        );
        self.emit(
            ts_ms,
            EventBody::TraderRegistered {
                trader: trader.to_owned(),
                endowment,
            },
        )
    }

    pub fn start(&mut self, ts_ms: u64, duration_ms: Option<u64>) -> Result<(), EngineError> {
        self.require("start", &[SessionStatus::Pending])?;
        self.status = SessionStatus::Live;
        self.duration_ms = duration_ms;
        self.emit(ts_ms, EventBody::SessionStarted { duration_ms })
    }

    /// Stop trading. Quotes still open are closed without informing the
    /// market maker.
    pub fn end(&mut self, ts_ms: u64) -> Result<(), EngineError> {
        self.require("end", &[SessionStatus::Pending, SessionStatus::Live])?;
        self.status = SessionStatus::Ended;
        self.emit(ts_ms, EventBody::SessionEnded {})?;
        let open: Vec<QuoteId> = self.open_quote_ids();
        for id in open {
            let q = self.close_quote(id, QuoteStatus::Canceled);
            let spot_after = self.markets[&q.market].mm.spot();
            self.emit(ts_ms, EventBody::Canceled(resolved(&q, spot_after, Some(CancelReason::SessionEnded))))?;
        }
        Ok(())
    }

    fn open_quote_ids(&self) -> Vec<QuoteId> {
        let mut ids: Vec<QuoteId> = self.open.values().copied().collect();
        ids.sort_unstable();
        ids
    }

    fn close_quote(&mut self, id: QuoteId, status: QuoteStatus) -> Quote {
        let q = self.quotes.get_mut(&id).expect("open quote is tracked");
        q.status = status;
        let q = q.clone();
        self.open.remove(&(q.trader.clone(), q.market.clone()));
        q
    }

    pub fn request_quote(
        &mut self,
        trader: &str,
        market: &str,
        side: Side,
        qty: u32,
        ts_ms: u64,
    ) -> Result<Quote, EngineError> {
        if matches!(self.status, SessionStatus::Ended | SessionStatus::Settled) {
            return Err(EngineError::SessionClosed);
        }
        self.require("quote in", &[SessionStatus::Live])?;
        self.expire_quotes(ts_ms)?;
        if qty == 0 {
            return Err(EngineError::InvalidQuantity);
        }
        if !self.accounts.contains_key(trader) {
            return Err(EngineError::UnknownTrader(trader.to_owned()));
        }
        let Some(book) = self.markets.get(market) else {
            return Err(EngineError::UnknownMarket(market.to_owned()));
        };
        let key = (trader.to_owned(), market.to_owned());
        if let Some(&quote_id) = self.open.get(&key) {
            return Err(EngineError::QuoteAlreadyOpen {
                trader: key.0,
                market: key.1,
                quote_id,
            });
        }
        let ts = ts_ms.max(self.log.last_ts());
        let quote = Quote {
            id: self.next_quote_id,
            market: market.to_owned(),
            trader: trader.to_owned(),
            side,
            qty,
            vwap: book.mm.quote(side, f64::from(qty)),
            spot_at_quote: book.mm.spot(),
            issued_at: ts,
            expires_at: ts.saturating_add(self.config.quote_ttl_ms),
            status: QuoteStatus::Open,
        };
        self.next_quote_id += 1;
        self.emit(
            ts,
            EventBody::QuoteRequested {
                market: market.to_owned(),
                trader: trader.to_owned(),
                side,
                qty,
            },
        )?;
        self.quotes.insert(quote.id, quote.clone());
        self.open.insert(key, quote.id);
        self.emit(ts, EventBody::Quoted(quote.clone()))?;
        Ok(quote)
    }

    /// Close every open quote whose deadline is strictly before `ts_ms`.
    /// The market maker treats an expiry as a cancellation.
    pub fn expire_quotes(&mut self, ts_ms: u64) -> Result<Vec<QuoteId>, EngineError> {
        let due: Vec<QuoteId> = self
            .open_quote_ids()
            .into_iter()
            .filter(|id| self.quotes[id].expires_at < ts_ms)
            .collect();
        for &id in &due {
            let q = self.close_quote(id, QuoteStatus::Expired);
            self.resolve_and_log(&q, false, ts_ms, EventBody::Expired, None)?;
        }
        Ok(due)
    }

    /// Accept or reject an open quote.
    pub fn confirm_quote(&mut self, quote_id: QuoteId, accept: bool, ts_ms: u64) -> Result<Resolved, EngineError> {
        self.expire_quotes(ts_ms)?;
        let q = self.quotes.get(&quote_id).ok_or(EngineError::UnknownQuote(quote_id))?;
        match q.status {
            QuoteStatus::Open => {}
            QuoteStatus::Expired => return Err(EngineError::QuoteExpired(quote_id)),
            status => return Err(EngineError::QuoteNotOpen { id: quote_id, status }),
        }
        if !accept {
            let q = self.close_quote(quote_id, QuoteStatus::Canceled);
            return self.resolve_and_log(&q, false, ts_ms, EventBody::Canceled, Some(CancelReason::Rejected));
        }
        let q = q.clone();
        let qty = f64::from(q.qty);
        let notional = q.vwap * qty;
        let account = &self.accounts[&q.trader];
        if !account.endowment.short_allowed {
            let refusal = match q.side {
                Side::Buy if account.cash < notional => Some((
                    CancelReason::InsufficientFunds,
                    EngineError::InsufficientFunds {
                        needed: notional,
                        available: account.cash,
                    },
                )),
                Side::Sell if account.position(&q.market) < qty => Some((
                    CancelReason::InsufficientShares,
                    EngineError::InsufficientShares {
                        needed: qty,
                        available: account.position(&q.market),
                    },
                )),
                _ => None,
            };
            if let Some((reason, err)) = refusal {
                // the quote is void and counts as a cancellation
                let q = self.close_quote(quote_id, QuoteStatus::Canceled);
                self.resolve_and_log(&q, false, ts_ms, EventBody::Canceled, Some(reason))?;
                return Err(err);
            }
        }
        let q = self.close_quote(quote_id, QuoteStatus::Accepted);
        let sign = q.side.sign();
        let account = self.accounts.get_mut(&q.trader).expect("trader checked at quote time");
        account.cash -= sign * notional;
        *account.positions.entry(q.market.clone()).or_insert(0.0) += sign * qty;
        *account.spent.entry(q.market.clone()).or_insert(0.0) += sign * notional;
        let book = self.markets.get_mut(&q.market).expect("market checked at quote time");
        book.mm_cash += sign * notional;
        book.mm_shares -= sign * qty;
        self.resolve_and_log(&q, true, ts_ms, EventBody::Accepted, None)
    }

    /// Feed a resolved quote to its market maker, log the resolution and
    /// anything the market maker could not absorb, then the new spot.
    fn resolve_and_log(
        &mut self,
        q: &Quote,
        accepted: bool,
        ts_ms: u64,
        event: fn(Resolved) -> EventBody,
        reason: Option<CancelReason>,
    ) -> Result<Resolved, EngineError> {
        let book = self.markets.get_mut(&q.market).expect("quote refers to a known market");
        let outcome = book.mm.resolve(q.side, f64::from(q.qty), q.vwap, q.spot_at_quote, accepted);
        let r = resolved(q, book.mm.spot(), reason);
        self.emit(ts_ms, event(r.clone()))?;
        if let Some(BmmError::DegenerateObservation { lower, upper, .. }) = outcome.skipped {
            self.emit(
                ts_ms,
                EventBody::BeliefSkipped {
                    market: q.market.clone(),
                    lower,
                    upper,
                },
            )?;
        }
        self.emit_price(&q.market, ts_ms)?;
        Ok(r)
    }

    fn emit_price(&mut self, market: &str, ts_ms: u64) -> Result<(), EngineError> {
        let spot = self.markets[market].mm.spot();
        self.emit(
            ts_ms,
            EventBody::Price {
                market: market.to_owned(),
                spot,
            },
        )
    }

    pub fn record_true_value(&mut self, market: &str, value: f64, ts_ms: u64) -> Result<(), EngineError> {
        if !self.markets.contains_key(market) {
            return Err(EngineError::UnknownMarket(market.to_owned()));
        }
        if !value.is_finite() {
            return Err(EngineError::InvalidConfig(format!("true value must be finite, got {value}")));
        }
        self.truth.insert(market.to_owned(), value);
        self.emit(
            ts_ms,
            EventBody::TrueValue {
                market: market.to_owned(),
                value,
            },
        )
    }

    pub fn record_walk_step(&mut self, walk: &str, state: WalkState, ts_ms: u64) -> Result<(), EngineError> {
        self.walks.insert(walk.to_owned(), state);
        self.emit(
            ts_ms,
            EventBody::WalkStep {
                walk: walk.to_owned(),
                state,
            },
        )
    }

    pub fn record_shock(&mut self, change: WalkChange, ts_ms: u64) -> Result<(), EngineError> {
        self.emit(ts_ms, EventBody::Shock { change })
    }

    /// Settle at the last recorded true values.
    pub fn settle_at_truth(&mut self, ts_ms: u64) -> Result<SettlementReport, EngineError> {
        let values = self.truth.clone();
        self.settle(&values, ts_ms)
    }

    /// Pay every share its market's `values` entry and rank the traders.
    pub fn settle(&mut self, values: &BTreeMap<MarketId, f64>, ts_ms: u64) -> Result<SettlementReport, EngineError> {
        self.require("settle", &[SessionStatus::Ended])?;
        for id in self.markets.keys() {
            match values.get(id) {
                Some(v) if v.is_finite() => {}
                _ => return Err(EngineError::InvalidConfig(format!("no settlement value for market `{id}`"))),
            }
        }
        let mut markets = Vec::new();
        for (id, book) in &self.markets {
            let value = values[id];
            let trader_pnl: f64 = self
                .accounts
                .values()
                .map(|a| (a.position(id) - a.endowment.shares) * value - a.spent.get(id).copied().unwrap_or(0.0))
                .sum();
            let mm_profit = book.mm_profit(value);
            let residual = trader_pnl + mm_profit;
            let gross = book.mm_cash.abs() + (book.mm_shares * value).abs();
            if residual.abs() > 1e-9 * (1.0 + gross) {
                return Err(EngineError::ConservationViolated {
                    market: id.clone(),
                    residual,
                });
            }
            markets.push(MarketSettlement {
                market: id.clone(),
                value,
                mm_cash: book.mm_cash,
                mm_shares: book.mm_shares,
                mm_profit,
                trader_pnl,
            });
        }
        let mut leaderboard: Vec<TraderSettlement> = self
            .accounts
            .values()
            .map(|a| {
                let final_wealth = a.wealth(values);
                let initial_wealth = a.initial_wealth(values);
                TraderSettlement {
                    trader: a.trader.clone(),
                    cash: a.cash,
                    positions: a.positions.clone(),
                    initial_wealth,
                    final_wealth,
                    pnl: final_wealth - initial_wealth,
                }
            })
            .collect();
        leaderboard.sort_by(|a, b| {
            b.final_wealth
                .total_cmp(&a.final_wealth)
                .then_with(|| a.trader.cmp(&b.trader))
        });
        let report = SettlementReport { markets, leaderboard };
        self.status = SessionStatus::Settled;
        self.settlement = Some(report.clone());
        self.emit(ts_ms, EventBody::Settlement(report.clone()))?;
        Ok(report)
    }

    /// Rebuild a session by re-running the commands behind `events` and
    /// checking that every regenerated event is identical to the logged one.
    pub fn replay(events: &[TradeEvent]) -> Result<Self, EngineError> {
        let first = events.first().ok_or_else(|| EngineError::ReplayMismatch {
            seq: 0,
            detail: "empty log".into(),
        })?;
        let EventBody::Opened { config, .. } = &first.body else {
            return Err(EngineError::ReplayMismatch {
                seq: first.seq,
                detail: format!("log starts with `{}` instead of `opened`", first.body.kind()),
            });
        };
        let mut engine = Self::open(&first.session, config.clone(), first.ts_ms)?;
        let mut i = 1;
        engine.check_produced(events, 0, 1)?;
        while i < events.len() {
            let before = engine.log.len();
            let head = &events[i];
            engine.apply_head(head).map_err(|e| match e {
                EngineError::ReplayMismatch { .. } => e,
                other => EngineError::ReplayMismatch {
                    seq: head.seq,
                    detail: other.to_string(),
                },
            })?;
            let produced = engine.log.len() - before;
            engine.check_produced(events, i, produced)?;
            i += produced;
        }
        Ok(engine)
    }

    fn check_produced(&self, expected: &[TradeEvent], from: usize, count: usize) -> Result<(), EngineError> {
        let produced = &self.log.events()[from..from + count];
        for (k, got) in produced.iter().enumerate() {
            match expected.get(from + k) {
                Some(want) if want == got => {}
                Some(want) => {
                    return Err(EngineError::ReplayMismatch {
                        seq: want.seq,
                        detail: format!("logged {} but regenerated {}", want.to_json_line(), got.to_json_line()),
                    })
                }
                None => {
                    return Err(EngineError::ReplayMismatch {
                        seq: got.seq,
                        detail: format!("regenerated unlogged event {}", got.to_json_line()),
                    })
                }
            }
        }
        Ok(())
    }

    fn apply_head(&mut self, head: &TradeEvent) -> Result<(), EngineError> {
        let ts = head.ts_ms;
        match &head.body {
            EventBody::TraderRegistered { trader, endowment } => self.register_trader(trader, *endowment, ts),
            EventBody::SessionStarted { duration_ms } => self.start(ts, *duration_ms),
            EventBody::QuoteRequested {
                market,
                trader,
                side,
                qty,
            } => self.request_quote(trader, market, *side, *qty, ts).map(drop),
            EventBody::Accepted(r) => self.confirm_quote(r.quote_id, true, ts).map(drop),
            EventBody::Canceled(r) if r.reason == Some(CancelReason::Rejected) => {
                self.confirm_quote(r.quote_id, false, ts).map(drop)
            }
            EventBody::Canceled(Resolved {
                quote_id,
                reason: Some(CancelReason::InsufficientFunds | CancelReason::InsufficientShares),
                ..
            }) => match self.confirm_quote(*quote_id, true, ts) {
                Err(EngineError::InsufficientFunds { .. } | EngineError::InsufficientShares { .. }) => Ok(()),
                Ok(_) => Err(EngineError::ReplayMismatch {
                    seq: head.seq,
                    detail: format!("quote {quote_id} was refused in the log but fills on replay"),
                }),
                Err(e) => Err(e),
            },
            EventBody::Expired(_) => self.expire_quotes(ts).map(drop),
            EventBody::TrueValue { market, value } => self.record_true_value(market, *value, ts),
            EventBody::WalkStep { walk, state } => self.record_walk_step(walk, *state, ts),
            EventBody::Shock { change } => self.record_shock(*change, ts),
            EventBody::SessionEnded {} => self.end(ts),
            EventBody::Settlement(report) => self.settle(&report.values(), ts).map(drop),
            other => Err(EngineError::ReplayMismatch {
                seq: head.seq,
                detail: format!("`{}` cannot start a command", other.kind()),
            }),
        }
    }

    pub fn session(&self) -> &str {
        &self.session
    }

    pub fn config(&self) -> &OpenConfig {
        &self.config
    }

    pub fn status(&self) -> SessionStatus {
        self.status
    }

    pub fn duration_ms(&self) -> Option<u64> {
        self.duration_ms
    }

    pub fn market(&self, id: &str) -> Option<&MarketBook> {
        self.markets.get(id)
    }

    pub fn markets(&self) -> impl Iterator<Item = &MarketBook> {
        self.markets.values()
    }

    pub fn account(&self, trader: &str) -> Option<&Account> {
        self.accounts.get(trader)
    }

    pub fn accounts(&self) -> impl Iterator<Item = &Account> {
        self.accounts.values()
    }

    pub fn quote(&self, id: QuoteId) -> Option<&Quote> {
        self.quotes.get(&id)
    }

    pub fn open_quotes(&self) -> impl Iterator<Item = &Quote> {
        self.quotes.values().filter(|q| q.status == QuoteStatus::Open)
    }

    pub fn true_value(&self, market: &str) -> Option<f64> {
        self.truth.get(market).copied()
    }

    pub fn walk(&self, key: &str) -> Option<&WalkState> {
        self.walks.get(key)
    }

    pub fn settlement(&self) -> Option<&SettlementReport> {
        self.settlement.as_ref()
    }

    pub fn events(&self) -> &[TradeEvent] {
        self.log.events()
    }

    pub fn into_events(self) -> Vec<TradeEvent> {
        self.log.into_events()
    }
}

fn resolved(q: &Quote, spot_after: f64, reason: Option<CancelReason>) -> Resolved {
    Resolved {
        quote_id: q.id,
        market: q.market.clone(),
        trader: q.trader.clone(),
        side: q.side,
        qty: q.qty,
        price: q.vwap,
        spot_after,
        reason,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bmm::BmmConfig;

    fn two_markets() -> OpenConfig {
        OpenConfig {
            markets: vec![
                MarketSpec {
                    id: "LR".into(),
                    mm: MarketMakerConfig::lmsr(125.0),
                },
                MarketSpec {
                    id: "TB".into(),
                    mm: MarketMakerConfig::Bmm(BmmConfig::default()),
                },
            ],
            quote_ttl_ms: 10_000,
        }
    }

    fn funded(cash: f64, shares: f64) -> Endowment {
        Endowment {
            cash,
            shares,
            short_allowed: false,
        }
    }

    fn live() -> Engine {
        let mut e = Engine::open("s", two_markets(), 0).unwrap();
        e.register_trader("alice", funded(10_000.0, 50.0), 1).unwrap();
        e.register_trader("bob", funded(10_000.0, 50.0), 2).unwrap();
        e.start(3, Some(60_000)).unwrap();
        e
    }

    #[test]
    fn fill_moves_cash_and_shares_both_ways() {
        let mut e = live();
        let q = e.request_quote("alice", "LR", Side::Buy, 40, 10).unwrap();
        assert!(q.vwap > 50.0);
        let r = e.confirm_quote(q.id, true, 20).unwrap();
        let a = e.account("alice").unwrap();
        assert!((a.cash - (10_000.0 - 40.0 * q.vwap)).abs() < 1e-9);
        assert_eq!(a.position("LR"), 90.0);
        let book = e.market("LR").unwrap();
        assert_eq!(book.mm_shares, -40.0);
        assert!((book.mm_cash - 40.0 * q.vwap).abs() < 1e-9);
        assert!(r.spot_after > 50.0);
        assert_eq!(e.quote(q.id).unwrap().status, QuoteStatus::Accepted);
    }

    #[test]
    fn one_open_quote_per_trader_and_market() {
        let mut e = live();
        let q = e.request_quote("alice", "LR", Side::Buy, 5, 10).unwrap();
        assert!(matches!(
            e.request_quote("alice", "LR", Side::Sell, 5, 11),
            Err(EngineError::QuoteAlreadyOpen { quote_id, .. }) if quote_id == q.id
        ));
        e.request_quote("alice", "TB", Side::Sell, 5, 11).unwrap();
        e.request_quote("bob", "LR", Side::Sell, 5, 11).unwrap();
        e.confirm_quote(q.id, false, 12).unwrap();
        e.request_quote("alice", "LR", Side::Sell, 5, 13).unwrap();
    }

    #[test]
    fn resolved_quotes_cannot_be_reused() {
        let mut e = live();
        let q = e.request_quote("alice", "LR", Side::Buy, 5, 10).unwrap();
        e.confirm_quote(q.id, false, 11).unwrap();
        assert!(matches!(
            e.confirm_quote(q.id, true, 12),
            Err(EngineError::QuoteNotOpen {
                status: QuoteStatus::Canceled,
                ..
            })
        ));
        assert!(matches!(e.confirm_quote(999, true, 12), Err(EngineError::UnknownQuote(999))));
    }

    #[test]
    fn late_accept_is_an_expiry() {
        let mut e = live();
        let q = e.request_quote("alice", "TB", Side::Buy, 10, 100).unwrap();
        let mu_before = e.market("TB").unwrap().mm.as_bmm().unwrap().belief.mu;
        // accepting exactly at the deadline is still allowed
        let q2 = e.request_quote("bob", "TB", Side::Sell, 10, 100).unwrap();
        e.confirm_quote(q2.id, true, 100 + 10_000).unwrap();
        assert!(matches!(
            e.confirm_quote(q.id, true, 100 + 10_001),
            Err(EngineError::QuoteExpired(id)) if id == q.id
        ));
        assert_eq!(e.account("alice").unwrap().position("TB"), 50.0);
        assert_eq!(e.quote(q.id).unwrap().status, QuoteStatus::Expired);
        // the expiry taught the market maker something
        let mu_after = e.market("TB").unwrap().mm.as_bmm().unwrap().belief.mu;
        assert_ne!(mu_before, mu_after);
    }

    #[test]
    fn no_shorting_without_permission() {
        let mut e = live();
        let q = e.request_quote("alice", "LR", Side::Sell, 60, 10).unwrap();
        assert!(matches!(e.confirm_quote(q.id, true, 11), Err(EngineError::InsufficientShares { .. })));
        assert_eq!(e.quote(q.id).unwrap().status, QuoteStatus::Canceled);
        let q = e.request_quote("alice", "LR", Side::Buy, 300, 13).unwrap();
        assert!(matches!(e.confirm_quote(q.id, true, 14), Err(EngineError::InsufficientFunds { .. })));
        assert_eq!(e.account("alice").unwrap().cash, 10_000.0);
        assert_eq!(e.account("alice").unwrap().position("LR"), 50.0);
        // a refused accept on a BMM market teaches it like a cancel
        let q = e.request_quote("bob", "TB", Side::Buy, 1000, 15).unwrap();
        let before = e.market("TB").unwrap().mm.as_bmm().unwrap().belief;
        assert!(e.confirm_quote(q.id, true, 16).is_err());
        assert_ne!(e.market("TB").unwrap().mm.as_bmm().unwrap().belief, before);
        let r = Engine::replay(e.events()).unwrap();
        assert_eq!(r.events(), e.events());

        let mut e = live();
        e.register_trader(
            "carol",
            Endowment {
                cash: 0.0,
                shares: 0.0,
                short_allowed: true,
            },
            4,
        )
        .unwrap();
        let q = e.request_quote("carol", "LR", Side::Sell, 60, 10).unwrap();
        e.confirm_quote(q.id, true, 11).unwrap();
        assert_eq!(e.account("carol").unwrap().position("LR"), -60.0);
    }

    #[test]
    fn lifecycle_guards() {
        let mut e = Engine::open("s", two_markets(), 0).unwrap();
        e.register_trader("alice", funded(1.0, 0.0), 0).unwrap();
        assert!(matches!(
            e.request_quote("alice", "LR", Side::Buy, 1, 1),
            Err(EngineError::InvalidStatus { .. })
        ));
        assert!(matches!(e.register_trader("alice", funded(1.0, 0.0), 1), Err(EngineError::DuplicateTrader(_))));
        e.start(1, None).unwrap();
        assert!(e.start(2, None).is_err());
        assert!(matches!(e.request_quote("alice", "XX", Side::Buy, 1, 2), Err(EngineError::UnknownMarket(_))));
        assert!(matches!(e.request_quote("zed", "LR", Side::Buy, 1, 2), Err(EngineError::UnknownTrader(_))));
        assert!(matches!(e.request_quote("alice", "LR", Side::Buy, 0, 2), Err(EngineError::InvalidQuantity)));
        assert!(e.settle_at_truth(3).is_err());
        let q = e.request_quote("alice", "LR", Side::Buy, 1, 3).unwrap();
        e.end(4).unwrap();
        assert!(matches!(e.request_quote("alice", "LR", Side::Buy, 1, 4), Err(EngineError::SessionClosed)));
        assert_eq!(e.quote(q.id).unwrap().status, QuoteStatus::Canceled);
        assert!(e.confirm_quote(q.id, true, 5).is_err());
        assert!(e.settle_at_truth(5).is_err(), "no true values recorded");
        let values = BTreeMap::from([("LR".to_string(), 100.0), ("TB".to_string(), 0.0)]);
        e.settle(&values, 6).unwrap();
        assert_eq!(e.status(), SessionStatus::Settled);
        assert!(e.settle(&values, 7).is_err());
    }

    #[test]
    fn settlement_balances_and_ranks() {
        let mut e = live();
        for (i, (trader, market, side, qty)) in [
            ("alice", "LR", Side::Buy, 30),
            ("bob", "LR", Side::Sell, 10),
            ("alice", "TB", Side::Sell, 20),
            ("bob", "TB", Side::Buy, 25),
            ("alice", "LR", Side::Buy, 5),
        ]
        .into_iter()
        .enumerate()
        {
            let ts = 10 + 2 * i as u64;
            let q = e.request_quote(trader, market, side, qty, ts).unwrap();
            e.confirm_quote(q.id, true, ts + 1).unwrap();
        }
        e.record_true_value("LR", 100.0, 30).unwrap();
        e.record_true_value("TB", 0.0, 30).unwrap();
        e.end(31).unwrap();
        let report = e.settle_at_truth(32).unwrap();
        for m in &report.markets {
            assert!((m.mm_profit + m.trader_pnl).abs() < 1e-9);
        }
        let total_trader: f64 = report.leaderboard.iter().map(|t| t.pnl).sum();
        let total_mm: f64 = report.markets.iter().map(|m| m.mm_profit).sum();
        assert!((total_trader + total_mm).abs() < 1e-9);
        assert_eq!(report.leaderboard[0].trader, "alice");
        assert!(report.leaderboard[0].final_wealth >= report.leaderboard[1].final_wealth);
        assert_eq!(e.settlement(), Some(&report));
    }

    #[test]
    fn replay_reproduces_the_log() {
        let mut e = live();
        let q1 = e.request_quote("alice", "TB", Side::Buy, 12, 10).unwrap();
        e.confirm_quote(q1.id, true, 11).unwrap();
        let q2 = e.request_quote("bob", "TB", Side::Sell, 7, 12).unwrap();
        e.confirm_quote(q2.id, false, 13).unwrap();
        e.request_quote("alice", "LR", Side::Buy, 3, 14).unwrap();
        e.request_quote("bob", "LR", Side::Buy, 3, 15).unwrap();
        // sweeps both stale quotes at once
        e.record_true_value("LR", 60.0, 20_000).unwrap();
        e.expire_quotes(20_000).unwrap();
        e.record_true_value("TB", 40.0, 20_000).unwrap();
        e.end(20_001).unwrap();
        e.settle_at_truth(20_002).unwrap();

        let mut buf = Vec::new();
        write_log(&mut buf, e.events()).unwrap();
        let parsed = read_log(buf.as_slice()).unwrap();
        let r = Engine::replay(&parsed).unwrap();
        assert_eq!(r.events(), e.events());
        assert_eq!(r.settlement(), e.settlement());
        let a = r.market("TB").unwrap().mm.as_bmm().unwrap().belief;
        let b = e.market("TB").unwrap().mm.as_bmm().unwrap().belief;
        assert_eq!(a, b);
    }

    #[test]
    fn replay_detects_tampering() {
        let mut e = live();
        let q = e.request_quote("alice", "LR", Side::Buy, 12, 10).unwrap();
        e.confirm_quote(q.id, true, 11).unwrap();
        let mut events = e.events().to_vec();
        let idx = events.iter().position(|ev| ev.body.kind() == "quoted").unwrap();
        if let EventBody::Quoted(q) = &mut events[idx].body {
            q.vwap += 1e-9;
        }
        match Engine::replay(&events) {
            Err(EngineError::ReplayMismatch { seq, .. }) => assert_eq!(seq, idx as u64),
            other => panic!("unexpected {other:?}"),
        }
        assert!(Engine::replay(&events[1..]).is_err());
        assert!(Engine::replay(&[]).is_err());
    }

    #[test]
    fn sink_receives_json_lines() {
        use std::sync::{Arc, Mutex};

        #[derive(Clone, Default)]
        struct Shared(Arc<Mutex<Vec<u8>>>);
        impl Write for Shared {
            fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
                self.0.lock().unwrap().extend_from_slice(buf);
                Ok(buf.len())
            }
            fn flush(&mut self) -> std::io::Result<()> {
                Ok(())
            }
        }

        let shared = Shared::default();
        let mut e = Engine::open_with_sink("s", two_markets(), 0, Box::new(shared.clone())).unwrap();
        e.register_trader("alice", funded(100.0, 0.0), 1).unwrap();
        let text = String::from_utf8(shared.0.lock().unwrap().clone()).unwrap();
        assert_eq!(text.lines().count(), 2);
        let parsed = read_log(text.as_bytes()).unwrap();
        assert_eq!(parsed, e.events());

        let mut r = Engine::replay(&parsed).unwrap();
        let more = Shared::default();
        r.set_sink(Box::new(more.clone()));
        r.start(5, None).unwrap();
        let text = String::from_utf8(more.0.lock().unwrap().clone()).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(text.contains("\"seq\":2"));
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]
        #[test]
        fn random_sessions_conserve_and_replay(
            ops in proptest::collection::vec((0usize..2, 0usize..2, proptest::bool::ANY, 1u32..120, 0u8..4, 0u64..6_000), 1..60)
        ) {
            let mut e = live();
            let traders = ["alice", "bob"];
            let markets = ["LR", "TB"];
            let mut ts = 10;
            let total = |e: &Engine| -> (f64, f64) {
                let cash = e.accounts().map(|a| a.cash).sum::<f64>() + e.markets().map(|b| b.mm_cash).sum::<f64>();
                let shares = e.accounts().map(|a| a.positions.values().sum::<f64>()).sum::<f64>()
                    + e.markets().map(|b| b.mm_shares).sum::<f64>();
                (cash, shares)
            };
            let (cash0, shares0) = total(&e);
            for (t, m, buy, qty, action, dt) in ops {
                ts += dt;
                let side = if buy { Side::Buy } else { Side::Sell };
                if let Ok(q) = e.request_quote(traders[t], markets[m], side, qty, ts) {
                    match action {
                        0 => { let _ = e.confirm_quote(q.id, false, ts + 1); }
                        1 | 2 => { let _ = e.confirm_quote(q.id, true, ts + 1); }
                        _ => {}
                    }
                }
                let (cash, shares) = total(&e);
                proptest::prop_assert!((cash - cash0).abs() < 1e-7);
                proptest::prop_assert!((shares - shares0).abs() < 1e-9);
                for a in e.accounts() {
                    proptest::prop_assert!(a.cash >= 0.0);
                    proptest::prop_assert!(a.positions.values().all(|&p| p >= 0.0));
                }
            }
            e.record_true_value("LR", 73.22, ts).unwrap();
            e.record_true_value("TB", 18.97, ts).unwrap();
            e.end(ts + 1).unwrap();
            e.settle_at_truth(ts + 2).unwrap();
            let r = Engine::replay(e.events()).unwrap();
            proptest::prop_assert_eq!(r.events(), e.events());
            for id in markets {
                let (a, b) = (r.market(id).unwrap(), e.market(id).unwrap());
                proptest::prop_assert_eq!(&a.mm, &b.mm);
                proptest::prop_assert_eq!(a.mm_cash.to_bits(), b.mm_cash.to_bits());
            }
        }
    }
}
