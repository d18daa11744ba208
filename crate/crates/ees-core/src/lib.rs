//! Energy-efficient scheduling for serverless clusters.
//!
//! This crate models a cluster of worker nodes that host serverless function
//! replicas and whose CPU frequency can be adjusted per node (DVFS). It
//! provides:
//!
//! * [`profiles`] — per-function performance/energy curves over a discrete
//!   frequency set, plus estimation of unknown functions from one observed
//!   sample.
//! * [`scaling`] — M/M/c capacity planning: given an arrival rate and a
//!   profile, pick the `<frequency, replica count>` pair that minimizes the
//!   aggregate power draw while keeping the utilization factor below a bound.
//! * [`scheduler`] — early-binding greedy placement of replica sets onto
//!   nodes with per-node frequency control, plus three baseline strategies
//!   (BP, BPS, BP+CPU) and an RPS auto-scaler.
//! * [`node_agent`] — the per-node processor management agent: frequency
//!   control behind a newline-delimited TCP protocol, container-to-core
//!   pinning and periodic round-robin core rotation.
//! * [`simengine`] — a deterministic discrete-event simulator that drives
//!   the above against Poisson workloads and reports energy, latency and
//!   placement traces.

pub mod node_agent;
pub mod profiles;
pub mod scaling;
pub mod scheduler;
pub mod simengine;

pub use profiles::{FrequencyPoint, FunctionProfile, ObservedSample};
pub use scaling::{JobKind, JobRequest, PlanOutcome, ScalingDecision};
pub use scheduler::{Cluster, NodeView, PlacementPlan, Strategy};
pub use simengine::{Comparison, SimConfig, SimReport, WorkloadSpec};
