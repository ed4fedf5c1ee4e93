pub mod commands;
pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod replacement;
pub mod runtime;
pub mod scheduler;
pub mod tensor;

pub use error::{Error, Result};
