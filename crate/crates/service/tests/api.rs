use std::collections::BTreeSet;
use std::io::BufReader;
use std::sync::Arc;
use std::time::Duration;

use dealer_core::engine::{compute_metrics, read_log, Engine, EventBody, MetricsConfig, TradeEvent, TruthSeries};
use dealer_core::walk::{analytic_value, ScheduledShock, ShockTiming, WalkChange, WalkConfig, WalkState};
use dealer_core::MarketMakerConfig;
use dealer_service::{Hub, InfoMode, MarketAssignment, PayoffMode, ServiceConfig, SessionConfig};
use futures_util::StreamExt;
use reqwest::StatusCode;
use serde_json::{json, Value};
use tokio::sync::oneshot;
use tokio_tungstenite::tungstenite::Message;

struct Server {
    base: String,
    hub: Arc<Hub>,
    stop: Option<oneshot::Sender<()>>,
    task: tokio::task::JoinHandle<std::io::Result<()>>,
    http: reqwest::Client,
}

impl Server {
    async fn start(config: ServiceConfig) -> Self {
        let hub = Hub::open(config).unwrap();
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let base = format!("127.0.0.1:{}", listener.local_addr().unwrap().port());
        let (stop, rx) = oneshot::channel::<()>();
        let task = tokio::spawn(dealer_service::serve(listener, hub.clone(), async move {
            let _ = rx.await;
        }));
        Self {
            base,
            hub,
            stop: Some(stop),
            task,
            http: reqwest::Client::new(),
        }
    }

    async fn stop(mut self) {
        self.stop.take().unwrap().send(()).unwrap();
        self.task.await.unwrap().unwrap();
    }

    fn url(&self, path: &str) -> String {
        format!("http://{}{path}", self.base)
    }

    async fn post(&self, path: &str, body: Value, token: Option<&str>) -> (StatusCode, Value) {
        let mut req = self.http.post(self.url(path)).json(&body);
        if let Some(t) = token {
            req = req.header("x-trader-token", t);
        }
        let resp = req.send().await.unwrap();
        let status = resp.status();
        let text = resp.text().await.unwrap();
        (status, serde_json::from_str(&text).unwrap_or(Value::Null))
    }

    async fn get(&self, path: &str, token: Option<&str>) -> (StatusCode, Value) {
        let mut req = self.http.get(self.url(path));
        if let Some(t) = token {
            req = req.header("x-trader-token", t);
        }
        let resp = req.send().await.unwrap();
        (resp.status(), resp.json().await.unwrap_or(Value::Null))
    }

    async fn create(&self, config: &SessionConfig) -> String {
        let (status, body) = self.post("/api/sessions", serde_json::to_value(config).unwrap(), None).await;
        assert_eq!(status, StatusCode::CREATED, "{body}");
        body["id"].as_str().unwrap().to_owned()
    }

    async fn register(&self, id: &str, name: &str) -> String {
        let (status, body) = self.post(&format!("/api/sessions/{id}/traders"), json!({ "name": name }), None).await;
        assert_eq!(status, StatusCode::OK, "{body}");
        body["token"].as_str().unwrap().to_owned()
    }

    async fn subscribe(&self, id: &str, token: &str) -> Stream {
        let url = format!("ws://{}/ws/sessions/{id}?token={token}", self.base);
        let (ws, _) = tokio_tungstenite::connect_async(url).await.unwrap();
        Stream { ws, seen: Vec::new() }
    }
}

struct Stream {
    ws: tokio_tungstenite::WebSocketStream<tokio_tungstenite::MaybeTlsStream<tokio::net::TcpStream>>,
    seen: Vec<Value>,
}

impl Stream {
    /// Read messages until one of `kind` arrives or `wait` passes.
    async fn until(&mut self, kind: &str, wait: Duration) -> Option<Value> {
        let deadline = tokio::time::Instant::now() + wait;
        loop {
            let msg = tokio::time::timeout_at(deadline, self.ws.next()).await.ok()??.ok()?;
            if let Message::Text(text) = msg {
                let v: Value = serde_json::from_str(&text).unwrap();
                self.seen.push(v.clone());
                if v["kind"] == kind {
                    return Some(v);
                }
            }
        }
    }
}

fn lmsr_config(duration_ms: u64, step_ms: u64) -> SessionConfig {
    let markets = MarketAssignment {
        lr: MarketMakerConfig::lmsr(125.0),
        tb: MarketMakerConfig::Bmm(Default::default()),
    };
    let mut walk = WalkConfig::symmetric(0.6, 4, 0);
    walk.step_interval_ms = step_ms;
    let mut c = SessionConfig::new(duration_ms, markets, walk);
    c.seed = Some(42);
    c
}

fn log_of(dir: &std::path::Path, id: &str) -> Vec<TradeEvent> {
    let file = std::fs::File::open(dir.join(format!("{id}.jsonl"))).unwrap();
    read_log(BufReader::new(file)).unwrap()
}

fn keys(v: &Value, out: &mut BTreeSet<String>) {
    match v {
        Value::Object(m) => {
            for (k, x) in m {
                out.insert(k.clone());
                keys(x, out);
            }
        }
        Value::Array(a) => a.iter().for_each(|x| keys(x, out)),
        _ => {}
    }
}

const HIDDEN: [&str; 12] = [
    "mu", "sigma", "sigma_eps", "q", "b", "mm", "mm_cash", "mm_shares", "belief", "window", "p_lr", "p_tb",
];

fn assert_no_internals(v: &Value) {
    let mut found = BTreeSet::new();
    keys(v, &mut found);
    for k in HIDDEN {
        assert!(!found.contains(k), "trader payload exposes `{k}`: {v}");
    }
}

fn walk_steps(events: &[TradeEvent], key: &str) -> Vec<(u64, WalkState)> {
    events
        .iter()
        .filter_map(|e| match &e.body {
            EventBody::WalkStep { walk, state } if walk == key => Some((e.ts_ms, *state)),
            _ => None,
        })
        .collect()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn health_and_session_validation() {
    let dir = tempfile::tempdir().unwrap();
    let server = Server::start(ServiceConfig::new(dir.path())).await;
    let (status, body) = server.get("/api/health", None).await;
    assert_eq!((status, body["status"].as_str()), (StatusCode::OK, Some("ok")));

    let mut both = lmsr_config(1_000, 50);
    both.markets.lr = both.markets.tb;
    both.id = Some("both-bmm".into());
    assert_eq!(server.create(&both).await, "both-bmm");
    let (status, body) = server.post("/api/sessions", serde_json::to_value(&both).unwrap(), None).await;
    assert_eq!((status, body["error"].as_str()), (StatusCode::CONFLICT, Some("duplicate_id")));

    let mut zero = lmsr_config(0, 50);
    zero.id = Some("zero".into());
    let (status, body) = server.post("/api/sessions", serde_json::to_value(&zero).unwrap(), None).await;
    assert_eq!((status, body["error"].as_str()), (StatusCode::UNPROCESSABLE_ENTITY, Some("validation")));

    let (status, _) = server.post("/api/sessions", json!({"duration_ms": 5}), None).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, _) = server.post("/api/sessions/nope/start", json!({}), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    server.stop().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn admin_token_guards_operator_routes() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = ServiceConfig::new(dir.path());
    config.admin_token = Some("sesame".into());
    let server = Server::start(config).await;
    let body = serde_json::to_value(lmsr_config(1_000, 50)).unwrap();
    let resp = server.http.post(server.url("/api/sessions")).json(&body).send().await.unwrap();
    assert_eq!(resp.status(), StatusCode::UNAUTHORIZED);
    let resp = server
        .http
        .post(server.url("/api/sessions"))
        .header("x-admin-token", "sesame")
        .json(&body)
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::CREATED);
    server.stop().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn live_session_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let server = Server::start(ServiceConfig::new(dir.path())).await;
    let mut config = lmsr_config(1_200, 25);
    config.id = Some("live".into());
    config.walk.shocks = vec![ScheduledShock::at(
        300,
        WalkChange {
            p_lr: Some(0.3),
            ..WalkChange::default()
        },
    )];
    let id = server.create(&config).await;
    let ann = server.register(&id, "ann").await;
    let ben = server.register(&id, "ben").await;
    let mut ann_ws = server.subscribe(&id, &ann).await;
    let mut ben_ws = server.subscribe(&id, &ben).await;
    let snap = ann_ws.until("snapshot", Duration::from_secs(2)).await.unwrap();
    assert_eq!(snap["payload"]["status"], "pending");
    assert_eq!(snap["payload"]["portfolio"]["cash"], 100_000.0);

    let (status, _) = server.post(&format!("/api/sessions/{id}/start"), json!({}), None).await;
    assert_eq!(status, StatusCode::OK);
    let (status, body) = server.post(&format!("/api/sessions/{id}/start"), json!({}), None).await;
    assert_eq!((status, body["error"].as_str()), (StatusCode::CONFLICT, Some("already_started")));

    // quote, accept, and a rejected second quote
    let path = format!("/api/sessions/{id}/markets/LR/quotes");
    let (status, offer) = server.post(&path, json!({"side": "buy", "qty": 40}), Some(&ann)).await;
    assert_eq!(status, StatusCode::OK, "{offer}");
    let b: f64 = 125.0;
    let closed = 100.0 * b * ((1.0 + (40.0 / b).exp()) / 2.0).ln() / 40.0;
    assert!((offer["vwap"].as_f64().unwrap() - closed).abs() < 1e-9);
    let quote_id = offer["quote_id"].as_u64().unwrap();
    let (status, body) = server.post(&format!("/api/quotes/{quote_id}"), json!({"accept": true}), Some(&ben)).await;
    assert_eq!((status, body["error"].as_str()), (StatusCode::FORBIDDEN, Some("forbidden")));
    let (status, fill) = server.post(&format!("/api/quotes/{quote_id}"), json!({"accept": true}), Some(&ann)).await;
    assert_eq!((status, fill["outcome"].as_str()), (StatusCode::OK, Some("accepted")));
    let (status, body) = server.post(&format!("/api/quotes/{quote_id}"), json!({"accept": true}), Some(&ann)).await;
    assert_eq!((status, body["error"].as_str()), (StatusCode::CONFLICT, Some("quote_not_open")));
    let (_, offer) = server
        .post(&format!("/api/sessions/{id}/markets/TB/quotes"), json!({"side": "sell", "qty": 10}), Some(&ben))
        .await;
    let tb_quote = offer["quote_id"].as_u64().unwrap();
    let (status, cancel) = server.post(&format!("/api/quotes/{tb_quote}"), json!({"accept": false}), Some(&ben)).await;
    assert_eq!((status, cancel["outcome"].as_str()), (StatusCode::OK, Some("canceled")));
    let (status, _) = server.post(&path, json!({"side": "buy", "qty": 0}), Some(&ann)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, _) = server.post(&path, json!({"side": "buy", "qty": 1}), Some("forged")).await;
    assert_eq!(status, StatusCode::UNAUTHORIZED);

    let (status, state) = server.get(&format!("/api/sessions/{id}/state"), Some(&ann)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(state["portfolio"]["shares"]["LR"], 40.0);
    let cash = 100_000.0 - 40.0 * fill["price"].as_f64().unwrap();
    assert!((state["portfolio"]["cash"].as_f64().unwrap() - cash).abs() < 1e-9);
    assert!(state["time_remaining_ms"].as_u64().unwrap() <= 1_200);
    assert!(state["hits"].is_object());
    assert_no_internals(&state);

    let (status, body) = server.post(&format!("/api/sessions/{id}/end"), json!({}), None).await;
    assert_eq!((status, body["error"].as_str()), (StatusCode::CONFLICT, Some("not_ended")));

    let end = ann_ws.until("session_ended", Duration::from_secs(5)).await;
    assert!(end.is_some(), "session never ended");
    ben_ws.until("session_ended", Duration::from_secs(5)).await.unwrap();
    tokio::time::sleep(Duration::from_millis(50)).await;
    let (status, report) = server.post(&format!("/api/sessions/{id}/end"), json!({}), None).await;
    assert_eq!(status, StatusCode::OK, "{report}");
    let (status, standings) = server.get(&format!("/api/sessions/{id}/leaderboard"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_no_internals(&standings);

    // settlement at 100·V under the parameters after the shock
    let v_lr = 100.0 * analytic_value(0.3, 4, 0);
    let v_tb = 100.0 * analytic_value(0.6, 4, 0);
    assert_eq!(standings["values"]["LR"].as_f64().unwrap(), v_lr);
    assert_eq!(standings["values"]["TB"].as_f64().unwrap(), v_tb);
    let markets = report["markets"].as_array().unwrap();
    for m in markets {
        let residual = m["mm_profit"].as_f64().unwrap() + m["trader_pnl"].as_f64().unwrap();
        assert!(residual.abs() < 1e-6);
    }
    let board = standings["leaderboard"].as_array().unwrap();
    let wealth: Vec<f64> = board.iter().map(|t| t["final_wealth"].as_f64().unwrap()).collect();
    assert!(wealth.windows(2).all(|w| w[0] >= w[1]));

    // the log file is where it was configured, and it replays
    let events = log_of(dir.path(), &id);
    assert!(events.windows(2).all(|w| w[0].ts_ms <= w[1].ts_ms && w[1].seq == w[0].seq + 1));
    let replayed = Engine::replay(&events).unwrap();
    assert_eq!(replayed.events(), &events[..]);
    let truth = TruthSeries::from_events(&events, "LR");
    assert_eq!(truth.points().len(), 2);
    let m = compute_metrics(&events, "LR", &truth, MetricsConfig::live()).unwrap();
    assert_eq!(m.buys, 1);

    // first tick lands within one step interval of the start
    let started = events
        .iter()
        .find(|e| matches!(e.body, EventBody::SessionStarted { .. }))
        .unwrap()
        .ts_ms;
    let steps = walk_steps(&events, "shared");
    assert!(steps[1].0 - started <= 25 + 25, "first tick {} ms after start", steps[1].0 - started);
    let shock = events.iter().find(|e| matches!(e.body, EventBody::Shock { .. })).unwrap();
    assert!(shock.ts_ms - started >= 300);

    // both traders saw the same walk, their own quotes only, and nothing hidden
    let ann_kinds: BTreeSet<String> = ann_ws.seen.iter().map(|v| v["kind"].as_str().unwrap().to_owned()).collect();
    for hidden in ["true_value", "shock", "belief_skipped", "opened", "trader_registered", "settlement"] {
        assert!(!ann_kinds.contains(hidden), "trader stream carried {hidden}");
    }
    let ann_steps: Vec<&Value> = ann_ws.seen.iter().filter(|v| v["kind"] == "walk_step").collect();
    let ben_steps: Vec<&Value> = ben_ws.seen.iter().filter(|v| v["kind"] == "walk_step").collect();
    assert!(ann_steps.len() > 5);
    assert_eq!(ann_steps, ben_steps);
    for v in &ann_ws.seen {
        if v["kind"] != "snapshot" {
            let e: TradeEvent = serde_json::from_value(v.clone()).unwrap();
            assert_eq!(&events[e.seq as usize], &e, "streamed record differs from the log");
        }
        if let Some(t) = v["payload"]["trader"].as_str() {
            assert_eq!(t, "ann");
        }
        assert_no_internals(v);
    }
    server.stop().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn per_trader_walks_are_independent_and_limited_view_goes_dark() {
    let dir = tempfile::tempdir().unwrap();
    let server = Server::start(ServiceConfig::new(dir.path())).await;
    let mut config = lmsr_config(600, 20);
    config.id = Some("solo".into());
    config.info = InfoMode::Limited { view_ms: 200 };
    let id = server.create(&config).await;
    let ann = server.register(&id, "ann").await;
    let ben = server.register(&id, "ben").await;
    let mut ann_ws = server.subscribe(&id, &ann).await;
    ann_ws.until("snapshot", Duration::from_secs(2)).await.unwrap();
    server.post(&format!("/api/sessions/{id}/start"), json!({}), None).await;
    ann_ws.until("session_ended", Duration::from_secs(5)).await.unwrap();
    let (_, state) = server.get(&format!("/api/sessions/{id}/state"), Some(&ben)).await;
    assert!(state["walk"].is_null(), "walk still visible after the viewing window");
    server.stop().await;

    let events = log_of(dir.path(), &id);
    let a = walk_steps(&events, "ann");
    let b = walk_steps(&events, "ben");
    assert!(a.len() > 10 && b.len() > 10);
    assert!(walk_steps(&events, "shared").is_empty());
    let pos = |s: &[(u64, WalkState)]| s.iter().map(|(_, w)| (w.x, w.y)).collect::<Vec<_>>();
    assert_ne!(pos(&a), pos(&b));
    let started = events
        .iter()
        .find(|e| matches!(e.body, EventBody::SessionStarted { .. }))
        .unwrap()
        .ts_ms;
    let seen: Vec<u64> = ann_ws
        .seen
        .iter()
        .filter(|v| v["kind"] == "walk_step")
        .map(|v| {
            assert_eq!(v["payload"]["walk"], "ann");
            v["ts_ms"].as_u64().unwrap()
        })
        .collect();
    assert!(!seen.is_empty());
    assert!(seen.iter().all(|&t| t < started + 200));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn realized_payoff_uses_observed_edge_ratios() {
    let dir = tempfile::tempdir().unwrap();
    let server = Server::start(ServiceConfig::new(dir.path())).await;
    let mut config = lmsr_config(500, 5);
    config.id = Some("realized".into());
    config.walk = WalkConfig {
        step_interval_ms: 5,
        ..WalkConfig::symmetric(0.7, 2, 0)
    };
    config.payoff = PayoffMode::Realized;
    let id = server.create(&config).await;
    server.register(&id, "ann").await;
    server.post(&format!("/api/sessions/{id}/start"), json!({}), None).await;
    tokio::time::sleep(Duration::from_millis(700)).await;
    let (status, report) = server.post(&format!("/api/sessions/{id}/end"), json!({}), None).await;
    assert_eq!(status, StatusCode::OK, "{report}");
    server.stop().await;

    let events = log_of(dir.path(), &id);
    let (_, last) = *walk_steps(&events, "shared").last().unwrap();
    let h = last.hits;
    let want_lr = if h.left + h.right > 0 {
        100.0 * h.right as f64 / (h.left + h.right) as f64
    } else {
        100.0 * analytic_value(0.7, 2, 0)
    };
    let want_tb = if h.top + h.bottom > 0 {
        100.0 * h.bottom as f64 / (h.top + h.bottom) as f64
    } else {
        100.0 * analytic_value(0.7, 2, 0)
    };
    assert!(h.left + h.right > 0, "no horizontal hits in {} steps", last.elapsed_steps);
    assert_eq!(report["markets"][0]["value"].as_f64().unwrap(), want_lr);
    assert_eq!(report["markets"][1]["value"].as_f64().unwrap(), want_tb);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn admin_shock_and_forced_end() {
    let dir = tempfile::tempdir().unwrap();
    let server = Server::start(ServiceConfig::new(dir.path())).await;
    let mut config = lmsr_config(60_000, 50);
    config.id = Some("shocked".into());
    let id = server.create(&config).await;
    let (status, _) = server.post(&format!("/api/sessions/{id}/shocks"), json!({"p_lr": 0.2}), None).await;
    assert_eq!(status, StatusCode::CONFLICT);
    server.post(&format!("/api/sessions/{id}/start"), json!({}), None).await;
    let (status, _) = server.post(&format!("/api/sessions/{id}/shocks"), json!({"p_lr": 0.2, "s": 5}), None).await;
    assert_eq!(status, StatusCode::NO_CONTENT);
    let (status, _) = server.post(&format!("/api/sessions/{id}/shocks"), json!({"p_lr": 1.5}), None).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, report) = server.post(&format!("/api/sessions/{id}/end"), json!({"force": true}), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(report["markets"][0]["value"].as_f64().unwrap(), 100.0 * analytic_value(0.2, 5, 0));
    assert_eq!(report["markets"][0]["mm_profit"].as_f64().unwrap(), 0.0);
    server.stop().await;
    let events = log_of(dir.path(), &id);
    assert_eq!(events.iter().filter(|e| matches!(e.body, EventBody::Shock { .. })).count(), 1);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn refused_fill_voids_the_quote() {
    let dir = tempfile::tempdir().unwrap();
    let server = Server::start(ServiceConfig::new(dir.path())).await;
    let mut config = lmsr_config(60_000, 50);
    config.id = Some("poor".into());
    config.endowment.cash = 100.0;
    config.endowment.short_allowed = false;
    let id = server.create(&config).await;
    let ann = server.register(&id, "ann").await;
    server.post(&format!("/api/sessions/{id}/start"), json!({}), None).await;
    let (_, offer) = server
        .post(&format!("/api/sessions/{id}/markets/LR/quotes"), json!({"side": "buy", "qty": 10}), Some(&ann))
        .await;
    let q = offer["quote_id"].as_u64().unwrap();
    let (status, body) = server.post(&format!("/api/quotes/{q}"), json!({"accept": true}), Some(&ann)).await;
    assert_eq!((status, body["error"].as_str()), (StatusCode::UNPROCESSABLE_ENTITY, Some("insufficient_funds")));
    let (_, state) = server.get(&format!("/api/sessions/{id}/state"), Some(&ann)).await;
    assert_eq!(state["portfolio"]["cash"], 100.0);
    assert_eq!(state["open_quotes"].as_array().unwrap().len(), 0);
    server.stop().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn cold_restart_rebuilds_sessions_from_logs() {
    let dir = tempfile::tempdir().unwrap();
    let server = Server::start(ServiceConfig::new(dir.path())).await;
    let mut config = lmsr_config(60_000, 20);
    config.id = Some("durable".into());
    let id = server.create(&config).await;
    let ann = server.register(&id, "ann").await;
    server.post(&format!("/api/sessions/{id}/start"), json!({}), None).await;
    for (market, side, qty) in [("LR", "buy", 30), ("TB", "sell", 12), ("TB", "buy", 5)] {
        let (_, offer) = server
            .post(&format!("/api/sessions/{id}/markets/{market}/quotes"), json!({"side": side, "qty": qty}), Some(&ann))
            .await;
        let q = offer["quote_id"].as_u64().unwrap();
        server.post(&format!("/api/quotes/{q}"), json!({"accept": qty != 12}), Some(&ann)).await;
    }
    let (_, pending) = server
        .post(&format!("/api/sessions/{id}/markets/LR/quotes"), json!({"side": "sell", "qty": 3}), Some(&ann))
        .await;
    tokio::time::sleep(Duration::from_millis(100)).await;
    let (_, before) = server.get(&format!("/api/sessions/{id}/state"), Some(&ann)).await;
    let before_events = server.hub.session(&id).unwrap().events();
    let lr_before = server.hub.session(&id).unwrap().walk_config();
    server.stop().await;

    let server = Server::start(ServiceConfig::new(dir.path())).await;
    assert!(server.hub.restore_failures().is_empty());
    let session = server.hub.session(&id).unwrap();
    let after_events = session.events();
    assert_eq!(&after_events[..before_events.len()], &before_events[..]);
    assert_eq!(session.walk_config(), lr_before);
    let (status, after) = server.get(&format!("/api/sessions/{id}/state"), Some(&ann)).await;
    assert_eq!(status, StatusCode::OK, "token survives the restart");
    assert_eq!(after["status"], "live");
    assert_eq!(after["portfolio"], before["portfolio"]);
    assert_eq!(after["markets"], before["markets"]);
    assert_eq!(after["open_quotes"], before["open_quotes"]);
    // the walk keeps going from where it stopped
    tokio::time::sleep(Duration::from_millis(100)).await;
    let resumed = walk_steps(&session.events(), "shared");
    let (_, last_before) = *walk_steps(&before_events, "shared").last().unwrap();
    assert!(resumed.last().unwrap().1.elapsed_steps > last_before.elapsed_steps);
    let q = pending["quote_id"].as_u64().unwrap();
    let (status, _) = server.post(&format!("/api/quotes/{q}"), json!({"accept": true}), Some(&ann)).await;
    assert_eq!(status, StatusCode::OK);
    server.stop().await;
    Engine::replay(&log_of(dir.path(), &id)).unwrap();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn random_shocks_land_inside_their_window() {
    let dir = tempfile::tempdir().unwrap();
    let hub = Hub::open(ServiceConfig::new(dir.path())).unwrap();
    let mut fired = 0;
    for seed in 0..200u64 {
        let mut config = lmsr_config(600_000, 100);
        config.id = Some(format!("s{seed}"));
        config.seed = Some(seed);
        config.walk.shocks = vec![ScheduledShock {
            timing: ShockTiming::Random {
                from_ms: 180_000,
                to_ms: 420_000,
                probability: 0.5,
            },
            change: WalkChange {
                p_lr: Some(0.2),
                ..WalkChange::default()
            },
        }];
        let s = hub.create(config).unwrap();
        let times = s.shock_times();
        assert!(times.iter().all(|t| (180_000..=420_000).contains(t)));
        fired += times.len();
    }
    // 100 expected, sd 7.1
    assert!((65..=135).contains(&fired), "{fired} of 200 shocks fired");
}
