//! Function performance/energy profiles over a discrete CPU frequency set.
//!
//! A profile captures, for one function, how a single replica behaves at
//! each available frequency: average execution time, throughput, busy power
//! draw and CPU utilization. Profiles are the input to capacity planning
//! and placement. A function without a stored profile can be estimated from
//! a single observed sample by scaling the throughput curve of the known
//! function with the closest CPU utilization.
//!
//! Frequencies are always integer MHz: the configured set is discrete and
//! exact lookups avoid float-equality pitfalls. There is no interpolation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative disagreement tolerated between `throughput_rps` and
/// `1 / avg_exec_time_s` before a profile is rejected. The two fields are a
/// redundant encoding; the check catches hand-edited store files.
pub const THROUGHPUT_CONSISTENCY_TOL: f64 = 0.01;

/// One point of a profile curve: replica behaviour at a single frequency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyPoint {
    pub freq_mhz: u32,
    /// Seconds per request when the replica is fully dedicated to one request.
    pub avg_exec_time_s: f64,
    /// Requests/second one replica sustains; redundant with `avg_exec_time_s`.
    pub throughput_rps: f64,
    /// Steady-state watts drawn by one busy replica.
    pub per_replica_power_w: f64,
    /// Fraction in (0, 1] of its allocated cores the function keeps busy.
    pub cpu_utilization: f64,
}

/// Performance/energy curve of one function across the frequency set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionProfile {
    pub function_id: String,
    /// Fractional cores requested per replica (e.g. 0.5, 1).
    pub cpu_cores: f64,
    pub memory_mb: u32,
    /// Points ordered by strictly increasing frequency.
    pub curve: Vec<FrequencyPoint>,
}

/// Monitoring data gathered from a single profile run of an unknown function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservedSample {
    pub function_id: String,
    pub freq_mhz: u32,
    pub measured_throughput_rps: f64,
    pub measured_cpu_utilization: f64,
}

/// A violated profile invariant. `validate_profile` reports all of them.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProfileViolation {
    #[error("{function_id}: curve is empty")]
    EmptyCurve { function_id: String },
    #[error("{function_id}: cpu_cores must be positive (got {cpu_cores})")]
    NonPositiveCores { function_id: String, cpu_cores: f64 },
    #[error("{function_id}: {field} must be positive at {freq_mhz} MHz")]
    NonPositiveField {
        function_id: String,
        freq_mhz: u32,
        field: &'static str,
    },
    #[error("{function_id}: cpu_utilization {value} at {freq_mhz} MHz outside (0, 1]")]
    UtilizationOutOfRange {
        function_id: String,
        freq_mhz: u32,
        value: f64,
    },
    #[error(
        "{function_id}: throughput {throughput_rps} rps at {freq_mhz} MHz disagrees with \
         1/avg_exec_time = {inverse_exec} rps by more than 1%"
    )]
    ThroughputExecMismatch {
        function_id: String,
        freq_mhz: u32,
        throughput_rps: f64,
        inverse_exec: f64,
    },
    #[error("{function_id}: curve frequencies not strictly increasing at {freq_mhz} MHz")]
    FrequenciesNotIncreasing { function_id: String, freq_mhz: u32 },
    #[error("{function_id}: frequency {freq_mhz} MHz not in the configured set")]
    FrequencyNotInSet { function_id: String, freq_mhz: u32 },
    #[error(
        "{function_id}: non-monotonic exec time: {exec_s}s at {freq_mhz} MHz is slower than \
         {prev_exec_s}s at {prev_freq_mhz} MHz"
    )]
    ExecTimeNotMonotonic {
        function_id: String,
        freq_mhz: u32,
        exec_s: f64,
        prev_freq_mhz: u32,
        prev_exec_s: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProfileError {
    #[error("function {function_id} has no profile point at {freq_mhz} MHz")]
    UnknownFrequency { function_id: String, freq_mhz: u32 },
    #[error("profile store is empty")]
    EmptyStore,
}

/// Failure to read or parse a profile store file.
#[derive(Debug, Error)]
pub enum StoreError {
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
}

impl FunctionProfile {
    /// Exact curve lookup; the frequency set is discrete, so there is no
    /// interpolation.
    pub fn lookup(&self, freq_mhz: u32) -> Result<&FrequencyPoint, ProfileError> {
        self.curve
            .iter()
            .find(|p| p.freq_mhz == freq_mhz)
            .ok_or(ProfileError::UnknownFrequency {
                function_id: self.function_id.clone(),
                freq_mhz,
            })
    }

    pub fn has_point(&self, freq_mhz: u32) -> bool {
        self.curve.iter().any(|p| p.freq_mhz == freq_mhz)
    }
}

/// Standalone lookup mirroring [`FunctionProfile::lookup`].
pub fn lookup(profile: &FunctionProfile, freq_mhz: u32) -> Result<&FrequencyPoint, ProfileError> {
    profile.lookup(freq_mhz)
}

/// Checks every profile invariant and returns all violations found. An empty
/// result means the profile is well formed for the given frequency set.
pub fn validate_profile(p: &FunctionProfile, freq_set: &[u32]) -> Vec<ProfileViolation> {
    let id = || p.function_id.clone();
    let mut violations = Vec::new();

    if p.cpu_cores <= 0.0 {
        violations.push(ProfileViolation::NonPositiveCores {
            function_id: id(),
            cpu_cores: p.cpu_cores,
        });
    }
    if p.curve.is_empty() {
        violations.push(ProfileViolation::EmptyCurve { function_id: id() });
        return violations;
    }

    for point in &p.curve {
        let positive: [(&'static str, f64); 4] = [
            ("freq_mhz", point.freq_mhz as f64),
            ("avg_exec_time_s", point.avg_exec_time_s),
            ("throughput_rps", point.throughput_rps),
            ("per_replica_power_w", point.per_replica_power_w),
        ];
        for (field, value) in positive {
            if value <= 0.0 {
                violations.push(ProfileViolation::NonPositiveField {
                    function_id: id(),
                    freq_mhz: point.freq_mhz,
                    field,
                });
            }
        }
        if point.cpu_utilization <= 0.0 || point.cpu_utilization > 1.0 {
            violations.push(ProfileViolation::UtilizationOutOfRange {
                function_id: id(),
                freq_mhz: point.freq_mhz,
                value: point.cpu_utilization,
            });
        }
        if point.avg_exec_time_s > 0.0 && point.throughput_rps > 0.0 {
            let inverse = 1.0 / point.avg_exec_time_s;
            if (point.throughput_rps - inverse).abs() > THROUGHPUT_CONSISTENCY_TOL * inverse {
                violations.push(ProfileViolation::ThroughputExecMismatch {
                    function_id: id(),
                    freq_mhz: point.freq_mhz,
                    throughput_rps: point.throughput_rps,
                    inverse_exec: inverse,
                });
            }
        }
        if !freq_set.contains(&point.freq_mhz) {
            violations.push(ProfileViolation::FrequencyNotInSet {
                function_id: id(),
                freq_mhz: point.freq_mhz,
            });
        }
    }

    for pair in p.curve.windows(2) {
        let (prev, next) = (&pair[0], &pair[1]);
        if next.freq_mhz <= prev.freq_mhz {
            violations.push(ProfileViolation::FrequenciesNotIncreasing {
                function_id: id(),
                freq_mhz: next.freq_mhz,
            });
        }
        // A higher clock must never be slower.
        if next.avg_exec_time_s > prev.avg_exec_time_s {
            violations.push(ProfileViolation::ExecTimeNotMonotonic {
                function_id: id(),
                freq_mhz: next.freq_mhz,
                exec_s: next.avg_exec_time_s,
                prev_freq_mhz: prev.freq_mhz,
                prev_exec_s: prev.avg_exec_time_s,
            });
        }
    }

    violations
}

/// Picks the stored profile whose CPU utilization at the sampled frequency
/// is closest (absolute difference) to the sample's measured utilization.
/// Ties go to the lexicographically smallest `function_id`.
pub fn match_closest<'a>(
    store: &'a [FunctionProfile],
    sample: &ObservedSample,
) -> Result<&'a FunctionProfile, ProfileError> {
    if store.is_empty() {
        return Err(ProfileError::EmptyStore);
    }
    let mut best: Option<(&FunctionProfile, f64)> = None;
    for profile in store {
        let point = profile.lookup(sample.freq_mhz)?;
        let distance = (point.cpu_utilization - sample.measured_cpu_utilization).abs();
        best = match best {
            None => Some((profile, distance)),
            Some((cur, cur_d)) => {
                if distance < cur_d
                    || (distance == cur_d && profile.function_id < cur.function_id)
                {
                    Some((profile, distance))
                } else {
                    Some((cur, cur_d))
                }
            }
        };
    }
    Ok(best.expect("store is non-empty").0)
}

/// Builds a synthetic profile for the sampled function by displacing the
/// known function's throughput curve: every point is scaled by
/// `r = measured_throughput / known_throughput(sample frequency)`.
///
/// Power and CPU utilization are copied from the known profile (similar
/// utilization implies similar energy behaviour); so are `cpu_cores` and
/// `memory_mb`, which callers that know the real container size may
/// override. At the sampled frequency the predicted throughput is set to
/// the measured value exactly.
pub fn predict_profile(
    known: &FunctionProfile,
    sample: &ObservedSample,
) -> Result<FunctionProfile, ProfileError> {
    let anchor = known.lookup(sample.freq_mhz)?;
    let r = sample.measured_throughput_rps / anchor.throughput_rps;
    let curve = known
        .curve
        .iter()
        .map(|point| {
            let throughput = if point.freq_mhz == sample.freq_mhz {
                sample.measured_throughput_rps
            } else {
                point.throughput_rps * r
            };
            FrequencyPoint {
                freq_mhz: point.freq_mhz,
                avg_exec_time_s: 1.0 / throughput,
                throughput_rps: throughput,
                per_replica_power_w: point.per_replica_power_w,
                cpu_utilization: point.cpu_utilization,
            }
        })
        .collect();
    Ok(FunctionProfile {
        function_id: sample.function_id.clone(),
        cpu_cores: known.cpu_cores,
        memory_mb: known.memory_mb,
        curve,
    })
}

/// Reads a profile store: a JSON array of [`FunctionProfile`].
pub fn load_store(path: &Path) -> Result<Vec<FunctionProfile>, StoreError> {
    let text = std::fs::read_to_string(path).map_err(|source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| StoreError::Parse {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes a profile store as pretty-printed JSON.
pub fn save_store(path: &Path, store: &[FunctionProfile]) -> Result<(), StoreError> {
    let text = serde_json::to_string_pretty(store).expect("profiles serialize");
    std::fs::write(path, text).map_err(|source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    })
}
