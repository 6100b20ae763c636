//! HTTP service over a trained feature explainer.

pub mod api;
pub mod config;
pub mod session;

pub use api::{router, AppState};
pub use config::{ModelEntry, Registry, ServerSettings, ServiceConfig};
