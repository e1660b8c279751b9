//! Task queue, persistence and HTTP API of the PrefPaint service.

pub mod api;
pub mod error;
pub mod ids;
pub mod orchestrator;
pub mod service;
pub mod store;
pub mod task;

pub use error::{Error, Result};
