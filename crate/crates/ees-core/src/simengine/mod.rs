//! Deterministic discrete-event cluster simulator.

mod config;
mod engine;
mod report;

pub use config::{ColdStartConfig, SimConfig, Slo, WorkloadKind, WorkloadSpec};
pub use engine::{compare, run, SimError};
pub use report::{
    Comparison, NodeReport, PlacementEvent, SimReport, StrategySummary, WorkloadReport,
};
