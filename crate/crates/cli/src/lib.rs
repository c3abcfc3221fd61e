//! Dataset generation, training, sampling and evaluation commands over
//! `panogen-core`, plus the on-disk formats they share.

pub mod config;
pub mod dataset;
pub mod eval;
pub mod gen_data;
pub mod hashing;
pub mod plot;
pub mod sample;
pub mod train;

pub use config::{deterministic, RunConfig};
pub use dataset::Manifest;
pub use eval::{eval_cmd, NonFiniteMetrics};
pub use gen_data::gen_data;
pub use sample::{sample_cmd, ConditionSource};
pub use train::train;
