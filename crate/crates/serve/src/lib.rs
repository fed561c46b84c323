//! HTTP suggestion service for a trained prefx model directory.

pub mod config;
pub mod server;

pub use config::{Overrides, ServeConfig, MODEL_DIR_ENV};
pub use server::{router, AppState, SuggestResponse};

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] prefx_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Loads the model, then binds and serves until Ctrl-C.
pub async fn run(config: ServeConfig) -> Result<(), ServeError> {
    let dir = config.model_dir()?.to_path_buf();
    let addr = config.addr()?;
    let engine = tokio::task::spawn_blocking(move || prefx_core::engine::Engine::load(&dir))
        .await
        .map_err(|e| ServeError::Config(format!("model loader panicked: {e}")))??;
    let app = router(AppState::loaded(engine, config));
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
