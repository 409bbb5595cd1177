//! Configuration-driven experiment runner: studies, caching, tables and plots.

pub mod cache;
pub mod config;
pub mod plot;
pub mod study;
pub mod table;

pub use config::{ExperimentConfig, ModelId, PStarSpec, RhsId};
pub use study::Workbench;
