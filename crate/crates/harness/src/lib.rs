//! Training, evaluation and reporting around the slot-based policy.

pub mod budget;
pub mod config;
pub mod eval;
pub mod inspect;
pub mod manifest;
pub mod model;
pub mod train;

pub use config::{ConfigError, RunConfig};
pub use model::Model;
pub use train::Trainer;
