//! Network server and command-line tools for fieldsync.
//!
//! Each document runs on its own command loop ([`actor`]); the HTTP and
//! websocket surface is in [`app`].

pub mod actor;
pub mod app;
pub mod cli;
pub mod remote;

use std::future::Future;
use std::time::Duration;

pub use app::App;

const SESSION_SWEEP: Duration = Duration::from_secs(60);

/// Serves `app` on `listener` until `shutdown` resolves, then snapshots every
/// document.
pub async fn serve(
    listener: tokio::net::TcpListener,
    app: App,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<(), fieldsync_core::engine::ServiceError> {
    let sweeper = {
        let app = app.clone();
        tokio::spawn(async move {
            let mut every = tokio::time::interval(SESSION_SWEEP);
            loop {
                every.tick().await;
                app.sweep_sessions().await;
            }
        })
    };
    let served = axum::serve(listener, app.router()).with_graceful_shutdown(shutdown).await;
    sweeper.abort();
    let saved = app.shutdown().await;
    served.map_err(|e| fieldsync_core::engine::ServiceError::Protocol(e.to_string()))?;
    saved
}
