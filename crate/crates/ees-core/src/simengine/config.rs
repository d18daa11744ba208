//! Simulation configuration.
//!
//! A [`SimConfig`] fully determines a run together with the strategy:
//! identical configs and seeds yield bit-identical reports.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::profiles::{self, FunctionProfile};

pub fn default_freq_set() -> Vec<u32> {
    (2000..=3600).step_by(200).collect()
}

fn default_rho_max() -> f64 {
    0.8
}

fn default_interarrival_rate() -> f64 {
    0.05
}

fn default_autoscale_interval() -> f64 {
    10.0
}

fn default_rotation_period() -> f64 {
    60.0
}

fn default_profile_run_duration() -> f64 {
    10.0
}

fn default_seed() -> u64 {
    42
}

/// Performance target a workload must meet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Slo {
    /// Every request must complete within this many seconds.
    MaxResponseTime { seconds: f64 },
    /// The workload's achieved throughput must reach this rate.
    MinThroughput { rps: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum WorkloadKind {
    /// `bs` requests arriving Poisson at `bs / deadline_s`, due by the
    /// deadline.
    Batch { bs: u64, deadline_s: f64 },
    /// Poisson arrivals at `rate_rps` until `total_requests` have been
    /// generated.
    Stream { rate_rps: f64, total_requests: u64 },
}

/// One workload injected into the cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub workload_id: String,
    pub function_id: String,
    #[serde(flatten)]
    pub kind: WorkloadKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slo: Option<Slo>,
    /// Hide the function's profile from the planner: the scheduler must run
    /// a profile deployment and predict the curve. The profile still exists
    /// in the store as simulation ground truth.
    #[serde(default)]
    pub unknown_profile: bool,
    /// Per-replica request rate the baseline auto-scaler targets. Defaults
    /// to the function's throughput at max(P) times rho_max.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub autoscale_target_rps_per_replica: Option<f64>,
    /// Pin baselines to this replica count and skip the auto-scaler.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_replicas: Option<u32>,
}

impl WorkloadSpec {
    /// Arrival rate of the workload's request process.
    pub fn rate_rps(&self) -> f64 {
        match self.kind {
            WorkloadKind::Batch { bs, deadline_s } => bs as f64 / deadline_s,
            WorkloadKind::Stream { rate_rps, .. } => rate_rps,
        }
    }

    pub fn total_requests(&self) -> u64 {
        match self.kind {
            WorkloadKind::Batch { bs, .. } => bs,
            WorkloadKind::Stream { total_requests, .. } => total_requests,
        }
    }
}

/// Startup delay of a fresh replica, per function and frequency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColdStartConfig {
    /// Delay at the highest frequency.
    pub base_delay_s: f64,
    /// Extra delay added linearly toward the lowest frequency (lower clocks
    /// start containers slightly slower).
    pub min_freq_extra_s: f64,
    /// Explicit per-function tables overriding the linear rule.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_function: BTreeMap<String, BTreeMap<u32, f64>>,
}

impl Default for ColdStartConfig {
    fn default() -> Self {
        ColdStartConfig {
            base_delay_s: 0.4,
            min_freq_extra_s: 0.25,
            per_function: BTreeMap::new(),
        }
    }
}

impl ColdStartConfig {
    pub fn delay_s(&self, function_id: &str, freq_mhz: u32, freq_set: &[u32]) -> f64 {
        if let Some(table) = self.per_function.get(function_id) {
            if let Some(delay) = table.get(&freq_mhz) {
                return *delay;
            }
        }
        let min = *freq_set.first().expect("non-empty freq set") as f64;
        let max = *freq_set.last().expect("non-empty freq set") as f64;
        if max <= min {
            return self.base_delay_s;
        }
        let toward_min = (max - freq_mhz as f64) / (max - min);
        self.base_delay_s + self.min_freq_extra_s * toward_min
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Available frequency set P, ascending MHz.
    #[serde(default = "default_freq_set")]
    pub freq_set_mhz: Vec<u32>,
    #[serde(default = "default_rho_max")]
    pub rho_max: f64,
    pub node_count: u32,
    pub cores_per_node: u32,
    /// Node idle draw per frequency, watts.
    pub idle_power_w: BTreeMap<u32, f64>,
    /// Full-node draw used by the synthetic temperature model.
    pub max_node_power_w: f64,
    /// Profile store: simulation ground truth and the planner's historic
    /// data (minus workloads marked `unknown_profile`).
    #[serde(default)]
    pub profiles: Vec<FunctionProfile>,
    /// Optional path to a profile store JSON merged into `profiles`;
    /// resolved against the config file's directory by the loader.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profiles_path: Option<String>,
    pub workloads: Vec<WorkloadSpec>,
    /// Rate of the Poisson process spacing workload submissions.
    #[serde(default = "default_interarrival_rate")]
    pub workload_interarrival_rate: f64,
    #[serde(default)]
    pub cold_start: ColdStartConfig,
    /// Simulation horizon, seconds.
    pub duration_s: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Draw service times at their mean instead of exponentially.
    #[serde(default)]
    pub deterministic_service: bool,
    #[serde(default = "default_autoscale_interval")]
    pub autoscale_interval_s: f64,
    #[serde(default = "default_rotation_period")]
    pub rotation_period_s: f64,
    /// How long a profile deployment observes an unknown function.
    #[serde(default = "default_profile_run_duration")]
    pub profile_run_duration_s: f64,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {source}")]
    Parse {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Store(#[from] profiles::StoreError),
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl SimConfig {
    /// Loads a config file, pulling in `profiles_path` relative to it, and
    /// validates the result.
    pub fn load(path: &Path) -> Result<SimConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config: SimConfig =
            serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
                path: path.to_path_buf(),
                source,
            })?;
        if let Some(rel) = config.profiles_path.take() {
            let base = path.parent().unwrap_or_else(|| Path::new("."));
            let store = profiles::load_store(&base.join(rel))?;
            config.profiles.extend(store);
        }
        config.validate().map_err(ConfigError::Invalid)?;
        Ok(config)
    }

    /// Checks internal consistency; returns the first problem found.
    pub fn validate(&self) -> Result<(), String> {
        if self.freq_set_mhz.is_empty() {
            return Err("frequency set is empty".into());
        }
        if !self.freq_set_mhz.windows(2).all(|w| w[0] < w[1]) {
            return Err("frequency set must be strictly ascending".into());
        }
        if !(0.0 < self.rho_max && self.rho_max <= 1.0) {
            return Err(format!("rho_max {} outside (0, 1]", self.rho_max));
        }
        if self.node_count == 0 || self.cores_per_node == 0 {
            return Err("node_count and cores_per_node must be positive".into());
        }
        for freq in &self.freq_set_mhz {
            if !self.idle_power_w.contains_key(freq) {
                return Err(format!("idle_power_w missing frequency {freq}"));
            }
        }
        if self.duration_s <= 0.0 {
            return Err("duration_s must be positive".into());
        }
        if self.workload_interarrival_rate <= 0.0 {
            return Err("workload_interarrival_rate must be positive".into());
        }
        for profile in &self.profiles {
            let violations = profiles::validate_profile(profile, &self.freq_set_mhz);
            if let Some(first) = violations.first() {
                return Err(format!("profile {}: {first}", profile.function_id));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for w in &self.workloads {
            if !seen.insert(&w.workload_id) {
                return Err(format!("duplicate workload_id {}", w.workload_id));
            }
            if w.rate_rps() <= 0.0 {
                return Err(format!("workload {}: rate must be positive", w.workload_id));
            }
            if w.total_requests() == 0 {
                return Err(format!(
                    "workload {}: request count must be positive",
                    w.workload_id
                ));
            }
            let Some(profile) = self.profiles.iter().find(|p| p.function_id == w.function_id)
            else {
                return Err(format!(
                    "workload {} references unknown function {}",
                    w.workload_id, w.function_id
                ));
            };
            // Simulation ground truth must exist at every frequency a node
            // can run at.
            for freq in &self.freq_set_mhz {
                if !profile.has_point(*freq) {
                    return Err(format!(
                        "profile {} has no point at {freq} MHz required for simulation",
                        profile.function_id
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn min_freq(&self) -> u32 {
        *self.freq_set_mhz.first().expect("non-empty freq set")
    }

    pub fn max_freq(&self) -> u32 {
        *self.freq_set_mhz.last().expect("non-empty freq set")
    }

    pub fn idle_power(&self, freq_mhz: u32) -> f64 {
        *self
            .idle_power_w
            .get(&freq_mhz)
            .expect("validated idle power covers the frequency set")
    }

    pub fn profile(&self, function_id: &str) -> Option<&FunctionProfile> {
        self.profiles.iter().find(|p| p.function_id == function_id)
    }
}
