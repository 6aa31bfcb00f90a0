//! One live session: the engine, its walks and its broadcast channel.

use std::collections::{BTreeMap, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::BufReader;
use std::path::Path;
use std::sync::{Arc, Mutex, MutexGuard, Weak};
use std::time::Duration;

use dealer_core::engine::{
    read_log, Engine, EngineError, EventBody, MarketId, Quote, QuoteId, Resolved, SessionStatus, SettlementReport,
    TradeEvent, TraderId, TraderSettlement, SCHEMA_VERSION,
};
use dealer_core::sim::run_seed;
use dealer_core::walk::{EdgeHits, WalkChange, WalkConfig, WalkState};
use dealer_core::Side;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tokio::sync::broadcast;
use tokio::task::AbortHandle;

use crate::config::{axis_of, InfoMode, PayoffMode, SessionConfig, MARKETS};
use crate::error::ServiceError;

/// Walk key used when everyone watches the same walk.
pub const SHARED_WALK: &str = "shared";

const SHOCK_STREAM: u64 = u64::MAX;
const CHANNEL_CAPACITY: usize = 4096;

pub fn now_ms() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

/// FNV-1a, stable across builds and platforms.
fn name_hash(name: &str) -> u64 {
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

/// Seed of a walk: the session seed itself for the shared walk, otherwise
/// mixed with the trader id.
pub fn walk_seed(session_seed: u64, key: &str) -> u64 {
    if key == SHARED_WALK {
        session_seed
    } else {
        run_seed(session_seed, name_hash(key))
    }
}

/// Who is looking.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Viewer {
    Admin,
    Trader(TraderId),
    Public,
}

#[derive(Debug)]
struct WalkRunner {
    state: WalkState,
    rng: ChaCha8Rng,
}

impl WalkRunner {
    fn new(seed: u64, state: WalkState) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // every step draws one uniform per axis
        for _ in 0..2 * state.elapsed_steps {
            let _: f64 = rng.random();
        }
        Self { state, rng }
    }
}

#[derive(Debug)]
struct Runtime {
    engine: Engine,
    walk: WalkConfig,
    walks: BTreeMap<String, WalkRunner>,
    /// Pending scheduled shocks as (offset from start, change), in firing order.
    schedule: VecDeque<(u64, WalkChange)>,
    started_at: Option<u64>,
    published: usize,
    timer: Option<AbortHandle>,
}

#[derive(Debug)]
pub struct Session {
    id: String,
    config: SessionConfig,
    seed: u64,
    inner: Mutex<Runtime>,
    events: broadcast::Sender<Arc<TradeEvent>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarketView {
    pub spot: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WalkView {
    pub x: i32,
    pub y: i32,
    pub s: u32,
    pub elapsed_steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Portfolio {
    pub trader: TraderId,
    pub cash: f64,
    pub shares: BTreeMap<MarketId, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuoteView {
    pub quote_id: QuoteId,
    pub market: MarketId,
    pub side: Side,
    pub qty: u32,
    pub vwap: f64,
    pub expires_at: u64,
}

impl From<&Quote> for QuoteView {
    fn from(q: &Quote) -> Self {
        Self {
            quote_id: q.id,
            market: q.market.clone(),
            side: q.side,
            qty: q.qty,
            vwap: q.vwap,
            expires_at: q.expires_at,
        }
    }
}

/// Settlement as traders see it: what each share paid and the ranking,
/// without the market makers' books.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standings {
    pub values: BTreeMap<MarketId, f64>,
    pub leaderboard: Vec<TraderSettlement>,
}

impl From<&SettlementReport> for Standings {
    fn from(r: &SettlementReport) -> Self {
        Self {
            values: r.values(),
            leaderboard: r.leaderboard.clone(),
        }
    }
}

/// Everything a viewer may see at one instant. Market maker parameters
/// and inventory have no field here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateView {
    pub schema: u32,
    pub session: String,
    pub status: SessionStatus,
    /// Sequence number of the last event reflected here.
    pub seq: u64,
    pub now_ms: u64,
    pub started_at: Option<u64>,
    pub duration_ms: u64,
    pub time_remaining_ms: u64,
    pub markets: BTreeMap<MarketId, MarketView>,
    pub walk: Option<WalkView>,
    pub hits: Option<EdgeHits>,
    pub portfolio: Option<Portfolio>,
    pub open_quotes: Vec<QuoteView>,
    pub standings: Option<Standings>,
}

/// Decides which log records a viewer's stream carries.
#[derive(Debug, Clone)]
pub struct Visibility {
    viewer: Viewer,
    info: InfoMode,
    started_at: Option<u64>,
}

impl Visibility {
    pub fn admit(&mut self, e: &TradeEvent) -> bool {
        if let EventBody::SessionStarted { .. } = e.body {
            self.started_at = Some(e.ts_ms);
        }
        let trader = match &self.viewer {
            Viewer::Admin => return true,
            Viewer::Trader(t) => Some(t.as_str()),
            Viewer::Public => None,
        };
        match &e.body {
            EventBody::SessionStarted { .. }
            | EventBody::SessionEnded {}
            | EventBody::Price { .. } => true,
            EventBody::QuoteRequested { trader: t, .. } => Some(t.as_str()) == trader,
            EventBody::Quoted(q) => Some(q.trader.as_str()) == trader,
            EventBody::Accepted(r) | EventBody::Canceled(r) | EventBody::Expired(r) => {
                Some(r.trader.as_str()) == trader
            }
            EventBody::WalkStep { walk, .. } => match trader {
                Some(t) => walk_visible(self.info, walk, t, self.started_at, e.ts_ms),
                None => false,
            },
            _ => false,
        }
    }
}

fn walk_key(info: InfoMode, trader: &str) -> &str {
    if info.per_trader() {
        trader
    } else {
        SHARED_WALK
    }
}

fn walk_visible(info: InfoMode, walk: &str, trader: &str, started_at: Option<u64>, ts: u64) -> bool {
    if walk != walk_key(info, trader) {
        return false;
    }
    match info {
        InfoMode::Limited { view_ms } => started_at.is_some_and(|s| ts < s.saturating_add(view_ms)),
        _ => true,
    }
}

impl Session {
    /// A new pending session logging to `<log_dir>/<id>.jsonl`. `config`
    /// must carry its id and seed.
    pub fn create(config: SessionConfig, log_dir: &Path, now: u64) -> Result<Arc<Self>, ServiceError> {
        let id = config.id.clone().expect("session id assigned before create");
        let seed = config.seed.expect("session seed assigned before create");
        let path = log_path(log_dir, &id);
        let file = OpenOptions::new().write(true).create_new(true).open(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                ServiceError::DuplicateId(id.clone())
            } else {
                ServiceError::Engine(e.into())
            }
        })?;
        let engine = Engine::open_with_sink(&id, config.open_config(), now, Box::new(file))?;
        Ok(Self::wrap(config, seed, engine))
    }

    fn wrap(config: SessionConfig, seed: u64, engine: Engine) -> Arc<Self> {
        let (events, _) = broadcast::channel(CHANNEL_CAPACITY);
        let published = engine.events().len();
        Arc::new(Self {
            id: engine.session().to_owned(),
            inner: Mutex::new(Runtime {
                engine,
                walk: config.walk.clone(),
                walks: BTreeMap::new(),
                schedule: VecDeque::new(),
                started_at: None,
                published,
                timer: None,
            }),
            config,
            seed,
            events,
        })
    }

    /// Rebuild a session from its log. A session that was live resumes
    /// when time is left and is ended and settled otherwise.
    pub fn restore(config: SessionConfig, log_dir: &Path, now: u64) -> Result<Arc<Self>, ServiceError> {
        let id = config.id.clone().expect("registry entries carry an id");
        let seed = config.seed.expect("registry entries carry a seed");
        let path = log_path(log_dir, &id);
        let events = read_log(BufReader::new(File::open(&path).map_err(EngineError::from)?))?;
        let mut engine = Engine::replay(&events)?;
        engine.set_sink(Box::new(OpenOptions::new().append(true).open(&path).map_err(EngineError::from)?));
        let session = Self::wrap(config, seed, engine);
        {
            let mut rt = session.lock();
            let mut last_step = None;
            for e in &events {
                match &e.body {
                    EventBody::SessionStarted { .. } => rt.started_at = Some(e.ts_ms),
                    EventBody::Shock { change } => {
                        rt.walk = rt.walk.apply_shock(change).map_err(|e| ServiceError::Validation(e.to_string()))?;
                    }
                    EventBody::WalkStep { .. } => last_step = Some(e.ts_ms),
                    _ => {}
                }
            }
            if let Some(start) = rt.started_at {
                let keys: Vec<String> = if session.config.info.per_trader() {
                    rt.engine.accounts().map(|a| a.trader.clone()).collect()
                } else {
                    vec![SHARED_WALK.to_owned()]
                };
                for key in keys {
                    let state = rt.engine.walk(&key).copied().unwrap_or_else(|| WalkState::start(&rt.walk));
                    rt.walks.insert(key.clone(), WalkRunner::new(walk_seed(seed, &key), state));
                }
                // scheduled shocks fire ahead of the walk steps of the same tick
                let done = last_step.map_or(0, |t| t - start);
                rt.schedule = session.resolve_schedule().into_iter().filter(|&(at, _)| at > done).collect();
            }
            match rt.engine.status() {
                SessionStatus::Live if rt.remaining(&session.config, now) == 0 => session.finish(&mut rt, now)?,
                SessionStatus::Live => {
                    let remaining = rt.remaining(&session.config, now);
                    rt.timer = Some(session.spawn_timer(remaining));
                }
                SessionStatus::Ended => {
                    let values = session.settlement_values(&rt);
                    rt.engine.settle(&values, now)?;
                    session.publish(&mut rt);
                }
                _ => {}
            }
        }
        Ok(session)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn status(&self) -> SessionStatus {
        self.lock().engine.status()
    }

    /// Copy of the log so far.
    pub fn events(&self) -> Vec<TradeEvent> {
        self.lock().engine.events().to_vec()
    }

    /// The current walk parameters, including hidden ones.
    pub fn walk_config(&self) -> WalkConfig {
        self.lock().walk.clone()
    }

    fn lock(&self) -> MutexGuard<'_, Runtime> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn publish(&self, rt: &mut Runtime) {
        for e in &rt.engine.events()[rt.published..] {
            // no subscribers is fine
            let _ = self.events.send(Arc::new(e.clone()));
        }
        rt.published = rt.engine.events().len();
    }

    pub fn register(&self, trader: &str, now: u64) -> Result<(), ServiceError> {
        let mut rt = self.lock();
        let result = rt.engine.register_trader(trader, self.config.endowment, now);
        if result.is_ok() && rt.engine.status() == SessionStatus::Live && self.config.info.per_trader() {
            self.add_walk(&mut rt, trader, now)?;
        }
        self.publish(&mut rt);
        result.map_err(Into::into)
    }

    fn add_walk(&self, rt: &mut Runtime, key: &str, now: u64) -> Result<(), ServiceError> {
        let state = WalkState::start(&rt.walk);
        rt.walks.insert(key.to_owned(), WalkRunner::new(walk_seed(self.seed, key), state));
        rt.engine.record_walk_step(key, state, now)?;
        Ok(())
    }

    fn resolve_schedule(&self) -> Vec<(u64, WalkChange)> {
        let mut rng = ChaCha8Rng::seed_from_u64(run_seed(self.seed, SHOCK_STREAM));
        let mut fired: Vec<(u64, WalkChange)> = self
            .config
            .walk
            .shocks
            .iter()
            .filter_map(|s| s.resolve(&mut rng).map(|at| (at, s.change)))
            .collect();
        fired.sort_by_key(|&(at, _)| at);
        fired
    }

    /// Firing times of the scheduled shocks for this seed, in ms after start.
    pub fn shock_times(&self) -> Vec<u64> {
        self.resolve_schedule().into_iter().map(|(at, _)| at).collect()
    }

    pub fn start(self: &Arc<Self>, now: u64) -> Result<(), ServiceError> {
        let mut rt = self.lock();
        if rt.engine.status() != SessionStatus::Pending {
            return Err(ServiceError::AlreadyStarted);
        }
        rt.engine.start(now, Some(self.config.duration_ms))?;
        rt.started_at = Some(now);
        self.record_truth(&mut rt, now)?;
        rt.schedule = self.resolve_schedule().into();
        self.fire_due_shocks(&mut rt, 0, now)?;
        let keys: Vec<String> = if self.config.info.per_trader() {
            rt.engine.accounts().map(|a| a.trader.clone()).collect()
        } else {
            vec![SHARED_WALK.to_owned()]
        };
        for key in keys {
            self.add_walk(&mut rt, &key, now)?;
        }
        rt.timer = Some(self.spawn_timer(self.config.duration_ms));
        self.publish(&mut rt);
        Ok(())
    }

    fn record_truth(&self, rt: &mut Runtime, now: u64) -> Result<(), ServiceError> {
        for market in MARKETS {
            let axis = axis_of(market).expect("fixed market ids");
            let value = 100.0 * rt.walk.value(axis);
            if rt.engine.true_value(market) != Some(value) {
                rt.engine.record_true_value(market, value, now)?;
            }
        }
        Ok(())
    }

    fn apply_shock(&self, rt: &mut Runtime, change: WalkChange, now: u64) -> Result<(), ServiceError> {
        let next = rt.walk.apply_shock(&change).map_err(|e| ServiceError::Validation(e.to_string()))?;
        rt.engine.record_shock(change, now)?;
        rt.walk = next;
        for runner in rt.walks.values_mut() {
            runner.state = runner.state.after_shock(&rt.walk);
        }
        self.record_truth(rt, now)
    }

    fn fire_due_shocks(&self, rt: &mut Runtime, elapsed: u64, now: u64) -> Result<(), ServiceError> {
        while rt.schedule.front().is_some_and(|&(at, _)| at <= elapsed) {
            let (_, change) = rt.schedule.pop_front().expect("checked above");
            self.apply_shock(rt, change, now)?;
        }
        Ok(())
    }

    /// Ad-hoc shock from the operator.
    pub fn shock(&self, change: WalkChange, now: u64) -> Result<(), ServiceError> {
        let mut rt = self.lock();
        if rt.engine.status() != SessionStatus::Live {
            return Err(EngineError::InvalidStatus {
                action: "shock",
                status: rt.engine.status(),
            }
            .into());
        }
        let result = self.apply_shock(&mut rt, change, now);
        self.publish(&mut rt);
        result
    }

    fn spawn_timer(self: &Arc<Self>, remaining_ms: u64) -> AbortHandle {
        let weak: Weak<Self> = Arc::downgrade(self);
        let every = Duration::from_millis(self.config.walk.step_interval_ms);
        let deadline = tokio::time::Instant::now() + Duration::from_millis(remaining_ms);
        tokio::spawn(async move {
            let mut ticks = tokio::time::interval_at(tokio::time::Instant::now() + every, every);
            ticks.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
            loop {
                tokio::select! {
                    _ = ticks.tick() => {}
                    _ = tokio::time::sleep_until(deadline) => {}
                }
                let Some(session) = weak.upgrade() else { break };
                match session.tick(now_ms()) {
                    Ok(true) => {}
                    Ok(false) => break,
                    Err(e) => {
                        tracing::error!(session = %session.id, error = %e, "walk timer stopped");
                        break;
                    }
                }
            }
        })
        .abort_handle()
    }

    /// One timer tick. Returns false once the session is over.
    pub fn tick(&self, now: u64) -> Result<bool, ServiceError> {
        let mut rt = self.lock();
        if rt.engine.status() != SessionStatus::Live {
            return Ok(false);
        }
        let start = rt.started_at.expect("live sessions have a start");
        let elapsed = now.saturating_sub(start);
        if elapsed >= self.config.duration_ms {
            rt.timer = None;
            self.finish(&mut rt, now)?;
            return Ok(false);
        }
        let result = self.step(&mut rt, elapsed, now);
        self.publish(&mut rt);
        result.map(|()| true)
    }

    fn step(&self, rt: &mut Runtime, elapsed: u64, now: u64) -> Result<(), ServiceError> {
        rt.engine.expire_quotes(now)?;
        self.fire_due_shocks(rt, elapsed, now)?;
        let Runtime {
            engine, walk, walks, ..
        } = rt;
        for (key, runner) in walks.iter_mut() {
            runner.state = runner.state.step(walk, &mut runner.rng);
            engine.record_walk_step(key, runner.state, now)?;
        }
        Ok(())
    }

    /// Per-market settlement values under the session's payoff mode. In
    /// realized mode an axis without edge hits falls back to the analytic
    /// value.
    fn settlement_values(&self, rt: &Runtime) -> BTreeMap<MarketId, f64> {
        let mut hits = EdgeHits::default();
        for runner in rt.walks.values() {
            hits.left += runner.state.hits.left;
            hits.right += runner.state.hits.right;
            hits.top += runner.state.hits.top;
            hits.bottom += runner.state.hits.bottom;
        }
        MARKETS
            .iter()
            .map(|&m| {
                let axis = axis_of(m).expect("fixed market ids");
                let analytic = rt.walk.value(axis);
                let v = match self.config.payoff {
                    PayoffMode::Analytic => analytic,
                    PayoffMode::Realized => hits.observed(axis).unwrap_or(analytic),
                };
                (m.to_owned(), 100.0 * v)
            })
            .collect()
    }

    fn finish(&self, rt: &mut Runtime, now: u64) -> Result<(), ServiceError> {
        if let Some(t) = rt.timer.take() {
            t.abort();
        }
        if matches!(rt.engine.status(), SessionStatus::Pending | SessionStatus::Live) {
            rt.engine.end(now)?;
        }
        let values = self.settlement_values(rt);
        let result = rt.engine.settle(&values, now);
        self.publish(rt);
        result.map(drop).map_err(Into::into)
    }

    /// Close and settle. Refuses with `NotEnded` while time is left unless
    /// `force` is set. Settling twice returns the first report.
    pub fn end_and_settle(&self, force: bool, now: u64) -> Result<SettlementReport, ServiceError> {
        let mut rt = self.lock();
        if let Some(report) = rt.engine.settlement() {
            return Ok(report.clone());
        }
        let remaining = rt.remaining(&self.config, now);
        if remaining > 0 && !force && rt.engine.status() != SessionStatus::Ended {
            return Err(ServiceError::NotEnded { remaining_ms: remaining });
        }
        self.finish(&mut rt, now)?;
        Ok(rt.engine.settlement().expect("just settled").clone())
    }

    pub fn settlement(&self) -> Option<SettlementReport> {
        self.lock().engine.settlement().cloned()
    }

    pub fn request_quote(
        &self,
        trader: &str,
        market: &str,
        side: Side,
        qty: u32,
        now: u64,
    ) -> Result<Quote, ServiceError> {
        let mut rt = self.lock();
        let result = rt.engine.request_quote(trader, market, side, qty, now);
        self.publish(&mut rt);
        Ok(result?)
    }

    /// Accept or cancel a quote on behalf of its owner.
    pub fn confirm(&self, trader: &str, quote_id: QuoteId, accept: bool, now: u64) -> Result<Resolved, ServiceError> {
        let mut rt = self.lock();
        match rt.engine.quote(quote_id) {
            None => return Err(EngineError::UnknownQuote(quote_id).into()),
            Some(q) if q.trader != trader => {
                return Err(ServiceError::Forbidden(format!("quote {quote_id} belongs to another trader")))
            }
            Some(_) => {}
        }
        let result = rt.engine.confirm_quote(quote_id, accept, now);
        self.publish(&mut rt);
        Ok(result?)
    }

    pub fn state(&self, viewer: &Viewer, now: u64) -> StateView {
        let rt = self.lock();
        self.state_locked(&rt, viewer, now)
    }

    fn state_locked(&self, rt: &Runtime, viewer: &Viewer, now: u64) -> StateView {
        let engine = &rt.engine;
        let markets = engine
            .markets()
            .map(|m| (m.id.clone(), MarketView { spot: m.mm.spot() }))
            .collect();
        let trader = match viewer {
            Viewer::Trader(t) => Some(t.as_str()),
            _ => None,
        };
        let walk_state = match viewer {
            Viewer::Admin if !self.config.info.per_trader() => rt.walks.get(SHARED_WALK).map(|r| r.state),
            Viewer::Trader(t) if walk_visible(self.config.info, walk_key(self.config.info, t), t, rt.started_at, now) => {
                rt.walks.get(walk_key(self.config.info, t)).map(|r| r.state)
            }
            _ => None,
        };
        let portfolio = trader.and_then(|t| engine.account(t)).map(|a| Portfolio {
            trader: a.trader.clone(),
            cash: a.cash,
            shares: a.positions.clone(),
        });
        let open_quotes = engine
            .open_quotes()
            .filter(|q| Some(q.trader.as_str()) == trader)
            .map(QuoteView::from)
            .collect();
        StateView {
            schema: SCHEMA_VERSION,
            session: self.id.clone(),
            status: engine.status(),
            seq: engine.events().last().map_or(0, |e| e.seq),
            now_ms: now,
            started_at: rt.started_at,
            duration_ms: self.config.duration_ms,
            time_remaining_ms: rt.remaining(&self.config, now),
            markets,
            walk: walk_state.map(|w| WalkView {
                x: w.x,
                y: w.y,
                s: rt.walk.s,
                elapsed_steps: w.elapsed_steps,
            }),
            hits: walk_state.map(|w| w.hits),
            portfolio,
            open_quotes,
            standings: engine.settlement().map(Standings::from),
        }
    }

    /// A snapshot and a receiver for every event after it.
    pub fn subscribe(&self, viewer: Viewer, now: u64) -> (StateView, broadcast::Receiver<Arc<TradeEvent>>, Visibility) {
        let rt = self.lock();
        let rx = self.events.subscribe();
        let snapshot = self.state_locked(&rt, &viewer, now);
        let visibility = Visibility {
            viewer,
            info: self.config.info,
            started_at: rt.started_at,
        };
        (snapshot, rx, visibility)
    }

    pub fn subscriber_count(&self) -> usize {
        self.events.receiver_count()
    }

    /// Stop the timer; used on shutdown and in tests.
    pub fn halt(&self) {
        if let Some(t) = self.lock().timer.take() {
            t.abort();
        }
    }
}

impl Runtime {
    fn remaining(&self, config: &SessionConfig, now: u64) -> u64 {
        match self.engine.status() {
            SessionStatus::Pending => config.duration_ms,
            SessionStatus::Live => {
                let elapsed = now.saturating_sub(self.started_at.unwrap_or(now));
                config.duration_ms.saturating_sub(elapsed)
            }
            _ => 0,
        }
    }
}

pub fn log_path(log_dir: &Path, id: &str) -> std::path::PathBuf {
    log_dir.join(format!("{id}.jsonl"))
}
