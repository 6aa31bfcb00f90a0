//! Live trading service: session administration, walk broadcasting and the
//! quote/confirm API over HTTP, with a WebSocket stream per session.
//!
//! Every session is one [`dealer_core::engine::Engine`] behind a mutex. Its
//! event log is written to `<log_dir>/<id>.jsonl` and a registry file lists
//! the sessions and trader tokens, so a restarted server replays the logs
//! and carries on.

pub mod api;
pub mod config;
pub mod error;
pub mod hub;
pub mod session;

use std::sync::Arc;

pub use api::router;
pub use config::{InfoMode, MarketAssignment, PayoffMode, SessionConfig};
pub use error::ServiceError;
pub use hub::{Hub, ServiceConfig};
pub use session::{Session, Standings, StateView, Viewer};

/// Serve until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    hub: Arc<Hub>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let app = router(hub.clone());
    let result = axum::serve(listener, app).with_graceful_shutdown(shutdown).await;
    hub.shutdown();
    result
}
