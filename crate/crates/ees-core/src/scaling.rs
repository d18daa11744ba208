//! Capacity planning: choose replica count and CPU frequency for a job.
//!
//! Requests are modelled as an M/M/c queue: Poisson arrivals at rate λ,
//! exponential service times, c parallel replicas. For each candidate
//! frequency the smallest replica count keeping the utilization factor
//! ρ = λ/μ strictly below a bound (default 0.8) is computed, and the
//! `<frequency, replicas>` pair with the lowest aggregate power draw
//! (per-replica watts × replicas) wins. Ties go to the lower frequency,
//! then to fewer replicas.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::profiles::{self, FunctionProfile, ObservedSample, ProfileError};

/// Default upper bound on the utilization factor. The bound is strict:
/// ρ equal to it is rejected.
pub const DEFAULT_RHO_MAX: f64 = 0.8;

/// A scaling request for a batch or stream job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRequest {
    pub job_id: String,
    pub function_id: String,
    #[serde(flatten)]
    pub kind: JobKind,
    /// User-supplied profile; takes precedence over the store.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<FunctionProfile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum JobKind {
    /// `bs` requests that must finish within `deadline_s` seconds.
    Batch { bs: u64, deadline_s: f64 },
    /// Open-ended stream requiring a minimum throughput.
    Stream { min_throughput_rps: f64 },
}

/// The chosen `<frequency, replica count>` pair with its predicted load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingDecision {
    pub freq_mhz: u32,
    pub replicas: u32,
    pub predicted_rho: f64,
    /// Aggregate steady-state draw: per-replica watts × replicas.
    pub predicted_power_w: f64,
    pub lambda_rps: f64,
}

/// Outcome of planning a job that may lack historic data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum PlanOutcome {
    Decision(ScalingDecision),
    /// No profile and no sample: deploy one replica at the given frequency
    /// and collect monitoring data before planning properly.
    NeedsProfileRun { freq_mhz: u32, replicas: u32 },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScalingError {
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error("frequency set is empty")]
    EmptyFrequencySet,
}

/// Arrival rate of a job: the requested throughput for streams, `bs / d`
/// for batches.
pub fn arrival_rate(job: &JobRequest) -> f64 {
    match job.kind {
        JobKind::Stream { min_throughput_rps } => min_throughput_rps,
        JobKind::Batch { bs, deadline_s } => bs as f64 / deadline_s,
    }
}

/// Service rate of `replicas` homogeneous replicas: μ = c / avgExecTime.
pub fn service_rate(replicas: u32, avg_exec_time_s: f64) -> f64 {
    replicas as f64 / avg_exec_time_s
}

/// Utilization factor ρ = λ/μ. May exceed 1; stability is the caller's call.
pub fn utilization(lambda_rps: f64, mu_rps: f64) -> f64 {
    lambda_rps / mu_rps
}

/// Smallest replica count c ≥ 1 with λ·avgExecTime/c strictly below
/// `rho_max`.
pub fn min_replicas(lambda_rps: f64, avg_exec_time_s: f64, rho_max: f64) -> u32 {
    let work = lambda_rps * avg_exec_time_s;
    let mut c = ((work / rho_max).floor() as i64 + 1).max(1) as u64;
    // The closed form can be off by one near float boundaries; settle it
    // against the same predicate a scan would use.
    while c > 1 && work / ((c - 1) as f64) < rho_max {
        c -= 1;
    }
    while work / (c as f64) >= rho_max {
        c += 1;
    }
    c as u32
}

/// Evaluates every frequency in the profile curve and returns the pair
/// minimizing `per_replica_power_w × replicas`. Ties break toward the lower
/// frequency, then toward fewer replicas.
pub fn select_config(
    profile: &FunctionProfile,
    lambda_rps: f64,
    rho_max: f64,
) -> ScalingDecision {
    let mut best: Option<(f64, u32, u32, f64)> = None; // (cost, freq, c, rho)
    for point in &profile.curve {
        let c = min_replicas(lambda_rps, point.avg_exec_time_s, rho_max);
        let cost = point.per_replica_power_w * c as f64;
        let rho = utilization(lambda_rps, service_rate(c, point.avg_exec_time_s));
        let candidate = (cost, point.freq_mhz, c, rho);
        best = match best {
            None => Some(candidate),
            Some(cur) => {
                if (candidate.0, candidate.1, candidate.2) < (cur.0, cur.1, cur.2) {
                    Some(candidate)
                } else {
                    Some(cur)
                }
            }
        };
    }
    let (cost, freq_mhz, replicas, predicted_rho) =
        best.expect("profile curve is non-empty for valid profiles");
    ScalingDecision {
        freq_mhz,
        replicas,
        predicted_rho,
        predicted_power_w: cost,
        lambda_rps,
    }
}

/// Plans a job end to end.
///
/// With a stored (or embedded) profile the decision comes straight from
/// [`select_config`]. Without one, a supplied monitoring sample is matched
/// against the store and the predicted curve is planned instead. With
/// neither, the caller is told to run a profile deployment of one replica
/// at a frequency drawn deterministically from `seed`.
pub fn plan_job(
    job: &JobRequest,
    store: &[FunctionProfile],
    sample: Option<&ObservedSample>,
    freq_set: &[u32],
    rho_max: f64,
    seed: u64,
) -> Result<PlanOutcome, ScalingError> {
    let lambda = arrival_rate(job);
    let stored = job
        .profile
        .as_ref()
        .or_else(|| store.iter().find(|p| p.function_id == job.function_id));
    if let Some(profile) = stored {
        return Ok(PlanOutcome::Decision(select_config(
            profile, lambda, rho_max,
        )));
    }
    if let Some(sample) = sample {
        let known = profiles::match_closest(store, sample)?;
        let predicted = profiles::predict_profile(known, sample)?;
        return Ok(PlanOutcome::Decision(select_config(
            &predicted, lambda, rho_max,
        )));
    }
    if freq_set.is_empty() {
        return Err(ScalingError::EmptyFrequencySet);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let freq_mhz = freq_set[rng.gen_range(0..freq_set.len())];
    Ok(PlanOutcome::NeedsProfileRun {
        freq_mhz,
        replicas: 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profiles::FrequencyPoint;
    use proptest::prelude::*;

    fn stream_job(rps: f64) -> JobRequest {
        JobRequest {
            job_id: "j".into(),
            function_id: "f".into(),
            kind: JobKind::Stream {
                min_throughput_rps: rps,
            },
            profile: None,
        }
    }

    fn batch_job(bs: u64, deadline_s: f64) -> JobRequest {
        JobRequest {
            job_id: "j".into(),
            function_id: "f".into(),
            kind: JobKind::Batch { bs, deadline_s },
            profile: None,
        }
    }

    fn point(freq: u32, exec: f64, power: f64) -> FrequencyPoint {
        FrequencyPoint {
            freq_mhz: freq,
            avg_exec_time_s: exec,
            throughput_rps: 1.0 / exec,
            per_replica_power_w: power,
            cpu_utilization: 0.9,
        }
    }

    fn profile_of(points: Vec<FrequencyPoint>) -> FunctionProfile {
        FunctionProfile {
            function_id: "f".into(),
            cpu_cores: 1.0,
            memory_mb: 128,
            curve: points,
        }
    }

    #[test]
    fn arrival_rate_batch_is_bs_over_deadline() {
        assert_eq!(arrival_rate(&batch_job(1000, 250.0)), 4.0);
        assert_eq!(arrival_rate(&batch_job(1, 1.0)), 1.0);
    }

    #[test]
    fn arrival_rate_stream_is_min_throughput() {
        assert_eq!(arrival_rate(&stream_job(138.0)), 138.0);
    }

    #[test]
    fn service_rate_spot_values() {
        assert_eq!(service_rate(4, 0.5), 8.0);
        assert_eq!(service_rate(1, 0.25), 4.0);
        assert_eq!(service_rate(3, 0.1), 30.0);
    }

    #[test]
    fn utilization_spot_values() {
        assert_eq!(utilization(4.0, 8.0), 0.5);
        assert_eq!(utilization(8.0, 8.0), 1.0);
        assert_eq!(utilization(3.9, 5.2), 0.75);
    }

    #[test]
    fn min_replicas_rejects_rho_equal_to_bound() {
        // c=1 gives ρ = 0.8 exactly, which is not strictly below the bound.
        assert_eq!(min_replicas(4.0, 0.2, 0.8), 2);
    }

    #[test]
    fn min_replicas_simple_cases() {
        assert_eq!(min_replicas(4.0, 0.25, 0.8), 2);
        assert_eq!(min_replicas(0.001, 0.01, 0.8), 1);
    }

    fn min_replicas_oracle(lambda: f64, exec: f64, rho_max: f64) -> u32 {
        let mut c = 1u32;
        while lambda * exec / c as f64 >= rho_max {
            c += 1;
        }
        c
    }

    proptest! {
        #[test]
        fn min_replicas_matches_linear_scan(
            lambda in 0.01f64..200.0,
            exec in 0.001f64..2.0,
            rho_max in 0.1f64..1.0,
        ) {
            prop_assert_eq!(
                min_replicas(lambda, exec, rho_max),
                min_replicas_oracle(lambda, exec, rho_max)
            );
        }

        #[test]
        fn min_replicas_is_tightly_minimal(
            lambda in 0.01f64..200.0,
            exec in 0.001f64..2.0,
        ) {
            let rho_max = 0.8;
            let c = min_replicas(lambda, exec, rho_max);
            prop_assert!(lambda * exec / c as f64 < rho_max);
            if c > 1 {
                prop_assert!(lambda * exec / (c - 1) as f64 >= rho_max);
            }
        }

        #[test]
        fn select_config_scale_invariant(
            lambda in 0.1f64..50.0,
            exec in 0.01f64..1.0,
            k in prop::sample::select(vec![0.25f64, 0.5, 2.0, 4.0]),
        ) {
            // Scaling λ and the throughput curve by the same factor keeps
            // the chosen frequency and replica count (Eqs. are homogeneous).
            let base = profile_of(vec![
                point(2400, exec * 1.5, 10.0),
                point(3000, exec * 1.2, 14.0),
                point(3600, exec, 25.0),
            ]);
            let scaled = profile_of(
                base.curve
                    .iter()
                    .map(|p| point(p.freq_mhz, p.avg_exec_time_s / k, p.per_replica_power_w))
                    .collect(),
            );
            let a = select_config(&base, lambda, 0.8);
            let b = select_config(&scaled, lambda * k, 0.8);
            prop_assert_eq!(a.freq_mhz, b.freq_mhz);
            prop_assert_eq!(a.replicas, b.replicas);
        }

        #[test]
        fn select_config_never_saturates(
            lambda in 0.1f64..100.0,
            exec in 0.005f64..1.0,
        ) {
            let profile = profile_of(vec![
                point(2000, exec * 1.8, 8.0),
                point(2800, exec * 1.3, 12.0),
                point(3600, exec, 20.0),
            ]);
            let decision = select_config(&profile, lambda, 0.8);
            prop_assert!(decision.predicted_rho < 0.8);
        }
    }

    #[test]
    fn select_config_prefers_cheaper_aggregate_power() {
        // 2.4 GHz needs c=2 at 10 W each (20 W); 3.6 GHz needs c=1 at 25 W.
        let profile = profile_of(vec![point(2400, 0.25, 10.0), point(3600, 0.125, 25.0)]);
        let decision = select_config(&profile, 4.0, 0.8);
        assert_eq!(decision.freq_mhz, 2400);
        assert_eq!(decision.replicas, 2);
        assert_eq!(decision.predicted_power_w, 20.0);
    }

    #[test]
    fn select_config_single_point() {
        let profile = profile_of(vec![point(3000, 0.5, 12.0)]);
        let decision = select_config(&profile, 1.0, 0.8);
        assert_eq!(decision.freq_mhz, 3000);
        assert_eq!(decision.replicas, 1);
    }

    #[test]
    fn select_config_monotone_power_picks_lowest_frequency() {
        // Every frequency admits c=1 and power strictly increases.
        let profile = profile_of(vec![
            point(2000, 0.05, 8.0),
            point(2800, 0.04, 12.0),
            point(3600, 0.03, 20.0),
        ]);
        let decision = select_config(&profile, 1.0, 0.8);
        assert_eq!(decision.freq_mhz, 2000);
        assert_eq!(decision.replicas, 1);
    }

    #[test]
    fn plan_job_uses_stored_profile() {
        let store = vec![FunctionProfile {
            function_id: "f".into(),
            ..profile_of(vec![point(3000, 0.1, 10.0)])
        }];
        let outcome = plan_job(&stream_job(4.0), &store, None, &[3000], 0.8, 7).unwrap();
        match outcome {
            PlanOutcome::Decision(d) => {
                assert_eq!(d.freq_mhz, 3000);
                assert_eq!(d.replicas, 1);
            }
            other => panic!("expected decision, got {other:?}"),
        }
    }

    #[test]
    fn plan_job_without_profile_or_sample_requests_profile_run() {
        let freq_set: Vec<u32> = (2000..=3600).step_by(200).collect();
        let outcome = plan_job(&stream_job(4.0), &[], None, &freq_set, 0.8, 42).unwrap();
        match outcome {
            PlanOutcome::NeedsProfileRun { freq_mhz, replicas } => {
                assert_eq!(replicas, 1);
                assert!(freq_set.contains(&freq_mhz));
                // Deterministic for a fixed seed.
                let again = plan_job(&stream_job(4.0), &[], None, &freq_set, 0.8, 42).unwrap();
                assert_eq!(
                    again,
                    PlanOutcome::NeedsProfileRun { freq_mhz, replicas }
                );
            }
            other => panic!("expected profile-run directive, got {other:?}"),
        }
    }

    #[test]
    fn plan_job_with_sample_plans_on_predicted_curve() {
        // Two-stage oracle: apply r pointwise, then enumerate configs.
        let known = profile_of(vec![point(2400, 0.25, 10.0), point(3600, 0.125, 25.0)]);
        let store = vec![FunctionProfile {
            function_id: "known".into(),
            ..known.clone()
        }];
        let sample = ObservedSample {
            function_id: "new".into(),
            freq_mhz: 3600,
            measured_throughput_rps: 4.0, // half of the known 8 rps
            measured_cpu_utilization: 0.9,
        };
        let job = JobRequest {
            function_id: "new".into(),
            ..stream_job(4.0)
        };
        let outcome = plan_job(&job, &store, Some(&sample), &[2400, 3600], 0.8, 1).unwrap();
        // Predicted curve: 2 rps at 2.4 GHz, 4 rps at 3.6 GHz.
        // c(2400) = min c with 4*0.5/c < 0.8 = 3 -> 30 W.
        // c(3600) = min c with 4*0.25/c < 0.8 = 2 -> 50 W.
        match outcome {
            PlanOutcome::Decision(d) => {
                assert_eq!((d.freq_mhz, d.replicas), (2400, 3));
                assert_eq!(d.predicted_power_w, 30.0);
            }
            other => panic!("expected decision, got {other:?}"),
        }
    }
}
