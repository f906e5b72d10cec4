pub mod engine;
pub mod error;
pub mod evaluation;
pub mod kv;
pub mod linalg;
pub mod log;
pub mod profiling;
pub mod ranking;
pub mod responsible;
pub mod simulator;
pub mod snapshot;
pub mod types;

pub use error::{Error, Result};
