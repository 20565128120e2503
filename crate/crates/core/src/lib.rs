//! Glioma growth simulation and ranking-based evaluation.

pub mod cli;
pub mod config;
pub mod eikonal;
pub mod fields;
pub mod fitting;
pub mod growth;
pub mod grv;
pub mod phantom;
pub mod ranking;
pub mod schemes;
pub mod stats;
