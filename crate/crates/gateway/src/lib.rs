//! Live simulator sessions for teleoperation and autopilot supervision.
//!
//! One tick thread owns the [`Session`]. Clients connect over WebSocket or
//! newline-delimited JSON on the same port and exchange the messages in
//! [`protocol`].

pub mod protocol;
mod server;
mod session;

pub use server::{serve, Gateway, ServeConfig, DEFAULT_BIND};
pub use session::{ManualInput, Session, SessionConfig};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: String, source: std::io::Error },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    World(#[from] nav_core::world::WorldError),
    #[error(transparent)]
    Dataset(#[from] nav_core::dataset::DatasetError),
    #[error(transparent)]
    Nets(#[from] nav_core::nets::NetsError),
    #[error(transparent)]
    Policy(#[from] nav_core::policy::PolicyError),
    #[error("tick thread panicked")]
    TickPanicked,
}

pub type Result<T> = std::result::Result<T, GatewayError>;
