//! Simulation output: totals, per-workload and per-node series, event log.
//!
//! Reports serialize to JSON; the power/frequency/replica time series are
//! additionally written as CSV for plotting. All collections are ordered so
//! that identical runs produce byte-identical files.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::scaling::ScalingDecision;

/// One entry of the placement/frequency event log (JSON lines on disk).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementEvent {
    pub t_s: f64,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub job_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub freq_mhz: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadReport {
    pub workload_id: String,
    pub function_id: String,
    pub submitted_t_s: f64,
    pub generated: u64,
    pub completed: u64,
    pub rejected: u64,
    pub in_flight_at_horizon: u64,
    /// Completed requests divided by the span from submission to completion
    /// (or the horizon when unfinished).
    pub achieved_throughput_rps: f64,
    pub mean_response_time_s: f64,
    pub p50_response_time_s: f64,
    pub p95_response_time_s: f64,
    pub p99_response_time_s: f64,
    pub max_response_time_s: f64,
    /// Busy time per completed request: the realized service time.
    pub mean_service_time_s: f64,
    /// Fraction of provisioned (ready) replica time spent serving.
    pub mean_busy_fraction: f64,
    pub slo_violations: u64,
    pub completion_time_s: Option<f64>,
    /// Wall-clock span from submission to the last completion.
    pub duration_s: Option<f64>,
    pub replica_trace: Vec<(f64, u32)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decision: Option<ScalingDecision>,
    /// The planner worked from a predicted curve (profile run happened).
    pub predicted_profile: bool,
    pub unscheduled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeReport {
    pub node_id: String,
    pub ever_hosted: bool,
    pub busy_replica_seconds: f64,
    pub freq_trace: Vec<(f64, u32)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub strategy: String,
    pub seed: u64,
    pub duration_s: f64,
    /// Time integral of the cluster power series.
    pub total_energy_j: f64,
    /// Step samples: both the old and the new power are recorded at each
    /// change, so trapezoidal and rectangular integration agree.
    pub power_timeseries: Vec<(f64, f64)>,
    pub workloads: Vec<WorkloadReport>,
    pub nodes: Vec<NodeReport>,
    pub events: Vec<PlacementEvent>,
    pub notes: Vec<String>,
}

impl SimReport {
    /// Trapezoidal integral of the emitted power series; by construction it
    /// matches `total_energy_j` up to float rounding.
    pub fn integrate_power_series(&self) -> f64 {
        self.power_timeseries
            .windows(2)
            .map(|w| 0.5 * (w[0].1 + w[1].1) * (w[1].0 - w[0].0))
            .sum()
    }

    pub fn total_slo_violations(&self) -> u64 {
        self.workloads.iter().map(|w| w.slo_violations).sum()
    }

    pub fn json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Writes `report_<strategy>.json` plus CSV series and the JSONL event
    /// log, returning the files created.
    pub fn write_files(
        &self,
        dir: &Path,
        formats: &ReportFormats,
    ) -> std::io::Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let token = self.strategy.to_ascii_lowercase().replace('+', "_");
        let mut written = Vec::new();

        if formats.json {
            let path = dir.join(format!("report_{token}.json"));
            std::fs::write(&path, self.json())?;
            written.push(path);

            let events_path = dir.join(format!("events_{token}.jsonl"));
            let mut out = std::io::BufWriter::new(std::fs::File::create(&events_path)?);
            for event in &self.events {
                serde_json::to_writer(&mut out, event)?;
                out.write_all(b"\n")?;
            }
            out.flush()?;
            written.push(events_path);
        }

        if formats.csv {
            let power_path = dir.join(format!("power_{token}.csv"));
            let mut out = String::from("t_s,value\n");
            for (t, w) in &self.power_timeseries {
                out.push_str(&format!("{t},{w}\n"));
            }
            std::fs::write(&power_path, out)?;
            written.push(power_path);

            let freq_path = dir.join(format!("frequency_{token}.csv"));
            let mut out = String::from("t_s,node_id,value\n");
            for node in &self.nodes {
                for (t, f) in &node.freq_trace {
                    out.push_str(&format!("{t},{},{f}\n", node.node_id));
                }
            }
            std::fs::write(&freq_path, out)?;
            written.push(freq_path);

            let replicas_path = dir.join(format!("replicas_{token}.csv"));
            let mut out = String::from("t_s,workload_id,value\n");
            for w in &self.workloads {
                for (t, r) in &w.replica_trace {
                    out.push_str(&format!("{t},{},{r}\n", w.workload_id));
                }
            }
            std::fs::write(&replicas_path, out)?;
            written.push(replicas_path);
        }

        Ok(written)
    }
}

/// Which report files to emit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReportFormats {
    pub json: bool,
    pub csv: bool,
}

impl Default for ReportFormats {
    fn default() -> Self {
        ReportFormats {
            json: true,
            csv: true,
        }
    }
}

/// Summary row of a strategy in a comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySummary {
    pub strategy: String,
    pub total_energy_j: f64,
    /// Percent saved relative to BP; negative means more energy than BP.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub savings_vs_bp_pct: Option<f64>,
    pub slo_violations: u64,
    /// Per-workload spans from submission to last completion.
    pub workload_durations_s: Vec<(String, Option<f64>)>,
}

/// Side-by-side result of running several strategies on one config/seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub seed: u64,
    pub strategies: Vec<StrategySummary>,
}

impl Comparison {
    pub fn summary(&self, strategy_name: &str) -> Option<&StrategySummary> {
        self.strategies.iter().find(|s| s.strategy == strategy_name)
    }

    pub fn json(&self) -> String {
        serde_json::to_string_pretty(self).expect("comparison serializes")
    }
}
