//! Fairness-aware incremental representation learning with coding-rate
//! objectives.

pub mod coding_rate;
pub mod data;
pub mod exemplar;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod debias;
pub mod incremental;
pub mod config;
pub mod experiment;
