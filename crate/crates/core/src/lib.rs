//! Live reconfiguration of mixed-parallel (TP/PP/DP) training state.

pub mod executor;
pub mod planner;
pub mod runtime;
pub mod simulator;
pub mod topology;
