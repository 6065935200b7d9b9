//! Runs one federation service process from a JSON config file.
//!
//! Once the service is bound (and registered, for origins and caches) a single
//! line `READY <base_url>` is written to stdout so a launcher can pick up the
//! actual address when port 0 was requested.

use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;

use crate::cache::{self, CacheConfig};
use crate::director::{self, DirectorConfig, DirectorError};
use crate::origin::{self, OriginConfig};
use crate::wire::{RegistrationError, ServiceHandle};

/// Exit status when the listen address is taken.
pub const EXIT_PORT_IN_USE: i32 = 10;
/// Exit status when the director refuses or cannot take the registration.
pub const EXIT_REGISTRATION_FAILED: i32 = 11;
pub const EXIT_CONFIG: i32 = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum NodeKind {
    Director,
    Origin,
    Cache,
}

#[derive(Debug, thiserror::Error)]
pub enum NodeError {
    #[error("config {path}: {reason}")]
    Config { path: String, reason: String },
    #[error("address in use: {0}")]
    PortInUse(String),
    #[error("registration failed: {0}")]
    Registration(String),
    #[error("{0}")]
    Other(String),
}

impl NodeError {
    pub fn exit_code(&self) -> i32 {
        match self {
            NodeError::Config { .. } => EXIT_CONFIG,
            NodeError::PortInUse(_) => EXIT_PORT_IN_USE,
            NodeError::Registration(_) => EXIT_REGISTRATION_FAILED,
            NodeError::Other(_) => 1,
        }
    }
}

fn bind_error(addr: &str, e: &std::io::Error) -> NodeError {
    if e.kind() == std::io::ErrorKind::AddrInUse {
        NodeError::PortInUse(addr.to_owned())
    } else {
        NodeError::Other(format!("listen on {addr}: {e}"))
    }
}

fn registration_error(e: RegistrationError) -> NodeError {
    NodeError::Registration(e.to_string())
}

pub fn load_config<T: DeserializeOwned>(path: &Path) -> Result<T, NodeError> {
    let fail = |reason: String| NodeError::Config {
        path: path.display().to_string(),
        reason,
    };
    let text = std::fs::read_to_string(path).map_err(|e| fail(e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| fail(e.to_string()))
}

pub async fn start(kind: NodeKind, config_path: &Path) -> Result<ServiceHandle, NodeError> {
    match kind {
        NodeKind::Director => {
            let config: DirectorConfig = load_config(config_path)?;
            director::start(&config).await.map(|(h, _)| h).map_err(|e| match e {
                DirectorError::Bind { addr, source } => bind_error(&addr, &source),
                other => NodeError::Other(other.to_string()),
            })
        }
        NodeKind::Origin => {
            let config: OriginConfig = load_config(config_path)?;
            origin::start(&config).await.map_err(|e| match e {
                origin::StartError::Bind { addr, source } => bind_error(&addr, &source),
                origin::StartError::Registration(r) => registration_error(r),
                other => NodeError::Other(other.to_string()),
            })
        }
        NodeKind::Cache => {
            let config: CacheConfig = load_config(config_path)?;
            cache::start(&config).await.map_err(|e| match e {
                cache::StartError::Bind { addr, source } => bind_error(&addr, &source),
                cache::StartError::Registration(r) => registration_error(r),
                other => NodeError::Other(other.to_string()),
            })
        }
    }
}

/// Starts the service, announces readiness and serves until SIGTERM or Ctrl-C.
pub async fn run(kind: NodeKind, config_path: &Path) -> Result<(), NodeError> {
    let handle = start(kind, config_path).await?;
    {
        let mut out = std::io::stdout().lock();
        let _ = writeln!(out, "READY {}", handle.base_url());
        let _ = out.flush();
    }
    shutdown_signal().await;
    tracing::info!("shutting down");
    handle.shutdown().await.map_err(|e| NodeError::Other(e.to_string()))
}

async fn shutdown_signal() {
    #[cfg(unix)]
    {
        use tokio::signal::unix::{signal, SignalKind};
        let mut term = signal(SignalKind::terminate()).expect("SIGTERM handler");
        tokio::select! {
            _ = term.recv() => {}
            _ = tokio::signal::ctrl_c() => {}
        }
    }
    #[cfg(not(unix))]
    {
        let _ = tokio::signal::ctrl_c().await;
    }
}

pub fn init_tracing() {
    let _ = tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .try_init();
}
