//! HTTP routes and the WebSocket stream.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use dealer_core::engine::{QuoteId, Resolved, SettlementReport, TradeEvent, TraderId, SCHEMA_VERSION};
use dealer_core::walk::WalkChange;
use dealer_core::Side;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tokio::sync::broadcast::error::RecvError;

use crate::config::{SessionConfig, MARKETS};
use crate::error::ServiceError;
use crate::hub::{Hub, SessionSummary};
use crate::session::{now_ms, Session, Standings, StateView, Viewer};

pub const TRADER_HEADER: &str = "x-trader-token";
pub const ADMIN_HEADER: &str = "x-admin-token";

type ApiResult<T> = Result<Json<T>, ServiceError>;

pub fn router(hub: Arc<Hub>) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/sessions", post(create_session).get(list_sessions))
        .route("/api/sessions/{id}/traders", post(register_trader))
        .route("/api/sessions/{id}/start", post(start_session))
        .route("/api/sessions/{id}/end", post(end_session))
        .route("/api/sessions/{id}/shocks", post(shock))
        .route("/api/sessions/{id}/leaderboard", get(leaderboard))
        .route("/api/sessions/{id}/state", get(state))
        .route("/api/sessions/{id}/markets/{market}/quotes", post(request_quote))
        .route("/api/quotes/{quote_id}", post(confirm_quote))
        .route("/ws/sessions/{id}", get(stream))
        .with_state(hub)
}

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ServiceError> {
    serde_json::from_slice(body).map_err(|e| ServiceError::Validation(format!("bad JSON body: {e}")))
}

fn require_admin(hub: &Hub, headers: &HeaderMap) -> Result<(), ServiceError> {
    match &hub.config().admin_token {
        None => Ok(()),
        Some(want) if headers.get(ADMIN_HEADER).and_then(|v| v.to_str().ok()) == Some(want.as_str()) => Ok(()),
        Some(_) => Err(ServiceError::Unauthorized),
    }
}

/// The trader behind the request's token, who must belong to `session` when given.
fn require_trader(hub: &Hub, headers: &HeaderMap, session: Option<&str>) -> Result<(Arc<Session>, TraderId), ServiceError> {
    let token = headers
        .get(TRADER_HEADER)
        .and_then(|v| v.to_str().ok())
        .ok_or(ServiceError::Unauthorized)?;
    let (sid, trader) = hub.trader(token).ok_or(ServiceError::Unauthorized)?;
    if session.is_some_and(|s| s != sid) {
        return Err(ServiceError::Forbidden("token belongs to another session".into()));
    }
    Ok((hub.session(&sid)?, trader))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub schema: u32,
}

async fn health() -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        schema: SCHEMA_VERSION,
    })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Created {
    pub id: String,
    pub seed: u64,
}

async fn create_session(State(hub): State<Arc<Hub>>, headers: HeaderMap, body: Bytes) -> Result<Response, ServiceError> {
    require_admin(&hub, &headers)?;
    let config: SessionConfig = parse(&body)?;
    let s = hub.create(config)?;
    let created = Created {
        id: s.id().to_owned(),
        seed: s.seed(),
    };
    Ok((StatusCode::CREATED, Json(created)).into_response())
}

async fn list_sessions(State(hub): State<Arc<Hub>>, headers: HeaderMap) -> ApiResult<Vec<SessionSummary>> {
    require_admin(&hub, &headers)?;
    Ok(Json(hub.list()))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Registration {
    pub name: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Registered {
    pub trader: TraderId,
    pub token: String,
}

async fn register_trader(State(hub): State<Arc<Hub>>, Path(id): Path<String>, body: Bytes) -> ApiResult<Registered> {
    let req: Registration = parse(&body)?;
    let token = hub.register(&id, &req.name)?;
    Ok(Json(Registered {
        trader: req.name,
        token,
    }))
}

async fn start_session(State(hub): State<Arc<Hub>>, Path(id): Path<String>, headers: HeaderMap) -> ApiResult<StateView> {
    require_admin(&hub, &headers)?;
    let s = hub.session(&id)?;
    s.start(now_ms())?;
    Ok(Json(s.state(&Viewer::Admin, now_ms())))
}

#[derive(Debug, Default, Serialize, Deserialize)]
pub struct EndRequest {
    /// End before the duration has elapsed.
    #[serde(default)]
    pub force: bool,
}

async fn end_session(
    State(hub): State<Arc<Hub>>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<SettlementReport> {
    require_admin(&hub, &headers)?;
    let req: EndRequest = if body.is_empty() { EndRequest::default() } else { parse(&body)? };
    let s = hub.session(&id)?;
    Ok(Json(s.end_and_settle(req.force, now_ms())?))
}

async fn shock(
    State(hub): State<Arc<Hub>>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<StatusCode, ServiceError> {
    require_admin(&hub, &headers)?;
    let change: WalkChange = parse(&body)?;
    hub.session(&id)?.shock(change, now_ms())?;
    Ok(StatusCode::NO_CONTENT)
}

async fn leaderboard(State(hub): State<Arc<Hub>>, Path(id): Path<String>) -> ApiResult<Standings> {
    let s = hub.session(&id)?;
    match s.settlement() {
        Some(report) => Ok(Json(Standings::from(&report))),
        None => Err(ServiceError::NotEnded {
            remaining_ms: s.state(&Viewer::Public, now_ms()).time_remaining_ms,
        }),
    }
}

async fn state(State(hub): State<Arc<Hub>>, Path(id): Path<String>, headers: HeaderMap) -> ApiResult<StateView> {
    let viewer = if headers.contains_key(TRADER_HEADER) {
        Viewer::Trader(require_trader(&hub, &headers, Some(&id))?.1)
    } else if hub.config().admin_token.is_some() && require_admin(&hub, &headers).is_ok() {
        Viewer::Admin
    } else {
        Viewer::Public
    };
    Ok(Json(hub.session(&id)?.state(&viewer, now_ms())))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct QuoteRequest {
    pub side: Side,
    pub qty: u32,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct QuoteOffer {
    pub quote_id: QuoteId,
    pub market: String,
    pub side: Side,
    pub qty: u32,
    pub vwap: f64,
    pub expires_at: u64,
}

async fn request_quote(
    State(hub): State<Arc<Hub>>,
    Path((id, market)): Path<(String, String)>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<QuoteOffer> {
    let (s, trader) = require_trader(&hub, &headers, Some(&id))?;
    if !MARKETS.contains(&market.as_str()) {
        return Err(dealer_core::engine::EngineError::UnknownMarket(market).into());
    }
    let req: QuoteRequest = parse(&body)?;
    let q = s.request_quote(&trader, &market, req.side, req.qty, now_ms())?;
    Ok(Json(QuoteOffer {
        quote_id: q.id,
        market: q.market,
        side: q.side,
        qty: q.qty,
        vwap: q.vwap,
        expires_at: q.expires_at,
    }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Confirmation {
    pub accept: bool,
}

/// The fill or cancel as logged.
#[derive(Debug, Serialize, Deserialize)]
pub struct ConfirmResult {
    pub outcome: String,
    #[serde(flatten)]
    pub record: Resolved,
}

async fn confirm_quote(
    State(hub): State<Arc<Hub>>,
    Path(quote_id): Path<QuoteId>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<ConfirmResult> {
    let (s, trader) = require_trader(&hub, &headers, None)?;
    let req: Confirmation = parse(&body)?;
    let record = s.confirm(&trader, quote_id, req.accept, now_ms())?;
    let outcome = if req.accept { "accepted" } else { "canceled" };
    Ok(Json(ConfirmResult {
        outcome: outcome.into(),
        record,
    }))
}

#[derive(Debug, Deserialize)]
pub struct StreamParams {
    pub token: Option<String>,
    pub admin_token: Option<String>,
}

/// First message on every stream connection and after a lagged receiver
/// catches up.
#[derive(Debug, Serialize)]
struct Snapshot<'a> {
    kind: &'static str,
    payload: &'a StateView,
}

async fn stream(
    State(hub): State<Arc<Hub>>,
    Path(id): Path<String>,
    Query(params): Query<StreamParams>,
    ws: WebSocketUpgrade,
) -> Result<Response, ServiceError> {
    let session = hub.session(&id)?;
    let viewer = match (&params.token, &params.admin_token, &hub.config().admin_token) {
        (Some(token), _, _) => match hub.trader(token) {
            Some((sid, trader)) if sid == id => Viewer::Trader(trader),
            Some(_) => return Err(ServiceError::Forbidden("token belongs to another session".into())),
            None => return Err(ServiceError::Unauthorized),
        },
        (None, Some(given), Some(want)) if given == want => Viewer::Admin,
        (None, Some(_), Some(_)) => return Err(ServiceError::Unauthorized),
        (None, _, None) if params.admin_token.is_some() => Viewer::Admin,
        _ => Viewer::Public,
    };
    Ok(ws.on_upgrade(move |socket| pump(socket, session, viewer)))
}

async fn send_json<T: Serialize>(socket: &mut WebSocket, value: &T) -> bool {
    let text = serde_json::to_string(value).expect("stream payloads serialize");
    socket.send(Message::Text(text.into())).await.is_ok()
}

async fn pump(mut socket: WebSocket, session: Arc<Session>, viewer: Viewer) {
    let (snapshot, mut rx, mut visibility) = session.subscribe(viewer.clone(), now_ms());
    if !send_json(&mut socket, &Snapshot { kind: "snapshot", payload: &snapshot }).await {
        return;
    }
    loop {
        tokio::select! {
            incoming = socket.recv() => match incoming {
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                Some(Ok(_)) => {}
            },
            event = rx.recv() => match event {
                Ok(e) => {
                    let e: &TradeEvent = &e;
                    if visibility.admit(e) && !send_json(&mut socket, e).await {
                        break;
                    }
                }
                Err(RecvError::Lagged(_)) => {
                    let (snapshot, fresh, fresh_visibility) = session.subscribe(viewer.clone(), now_ms());
                    rx = fresh;
                    visibility = fresh_visibility;
                    if !send_json(&mut socket, &Snapshot { kind: "snapshot", payload: &snapshot }).await {
                        break;
                    }
                }
                Err(RecvError::Closed) => break,
            },
        }
    }
}
