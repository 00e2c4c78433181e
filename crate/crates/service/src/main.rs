use anyhow::Context;
use glytwin_service::{serve, ServiceConfig};
use tracing_subscriber::EnvFilter;

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .init();
    let config = ServiceConfig::from_env().context("reading service config")?;
    serve(config).await.context("serving")
}
