//! The discrete-event loop.
//!
//! Everything is driven by one binary heap of timestamped events. Ties are
//! broken by an event-kind priority (completions before frequency work
//! before arrivals) and then by insertion sequence, so a run is a pure
//! function of (config, strategy, seed). All randomness flows through
//! ChaCha streams derived from the seed: one for workload submissions and
//! one arrival plus one service stream per workload, which keeps arrival
//! patterns identical across strategies.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Exp1};
use thiserror::Error;

use crate::node_agent::NodeAgent;
use crate::profiles::{self, FunctionProfile, ObservedSample};
use crate::scaling::{self, JobKind, JobRequest, PlanOutcome, ScalingDecision, ScalingError};
use crate::scheduler::{self, Cluster, PlacementPlan, SchedulerError, Strategy};

use super::config::{SimConfig, Slo, WorkloadKind};
use super::report::{
    Comparison, NodeReport, PlacementEvent, SimReport, StrategySummary, WorkloadReport,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error(transparent)]
    Scaling(#[from] ScalingError),
}

/// Runs one strategy against the config. Identical inputs give
/// bit-identical reports.
pub fn run(config: &SimConfig, strategy: Strategy) -> Result<SimReport, SimError> {
    config.validate().map_err(SimError::Config)?;
    Engine::new(config, strategy)?.run_to_horizon()
}

/// Runs every strategy on the same seed and summarizes them side by side.
/// Savings percentages are relative to BP when BP is among the strategies.
pub fn compare(
    config: &SimConfig,
    strategies: &[Strategy],
) -> Result<(Comparison, Vec<SimReport>), SimError> {
    let reports: Vec<SimReport> = strategies
        .iter()
        .map(|s| run(config, *s))
        .collect::<Result<_, _>>()?;
    let bp_energy = strategies
        .iter()
        .zip(&reports)
        .find(|(s, _)| matches!(s, Strategy::Bp))
        .map(|(_, r)| r.total_energy_j);
    let summaries = reports
        .iter()
        .map(|r| StrategySummary {
            strategy: r.strategy.clone(),
            total_energy_j: r.total_energy_j,
            savings_vs_bp_pct: bp_energy.map(|bp| 100.0 * (bp - r.total_energy_j) / bp),
            slo_violations: r.total_slo_violations(),
            workload_durations_s: r
                .workloads
                .iter()
                .map(|w| (w.workload_id.clone(), w.duration_s))
                .collect(),
        })
        .collect();
    Ok((
        Comparison {
            seed: config.seed,
            strategies: summaries,
        },
        reports,
    ))
}

#[derive(Debug, Clone, PartialEq)]
enum EventKind {
    ServiceCompletion { w: usize, replica: usize, token: u64 },
    ReplicaReady { w: usize, replica: usize },
    ProfileRunEnd { w: usize },
    AutoscaleTick,
    RotateTick,
    WorkloadArrival { w: usize },
    RequestArrival { w: usize },
}

impl EventKind {
    fn priority(&self) -> u8 {
        match self {
            EventKind::ServiceCompletion { .. } => 0,
            EventKind::ReplicaReady { .. } => 1,
            EventKind::ProfileRunEnd { .. } => 2,
            EventKind::AutoscaleTick => 3,
            EventKind::RotateTick => 4,
            EventKind::WorkloadArrival { .. } => 5,
            EventKind::RequestArrival { .. } => 6,
        }
    }
}

#[derive(Debug)]
struct Event {
    t: f64,
    prio: u8,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Event {
    // Reversed so the BinaryHeap pops the earliest event first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .t
            .partial_cmp(&self.t)
            .expect("event times are finite")
            .then_with(|| other.prio.cmp(&self.prio))
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

#[derive(Debug)]
struct InFlight {
    arrived_t: f64,
    started_t: f64,
    completion_t: f64,
}

#[derive(Debug)]
struct Replica {
    node_idx: usize,
    container_id: String,
    deployment_id: String,
    ready_at: f64,
    draining: bool,
    removed: bool,
    pinned: bool,
    queue: VecDeque<f64>,
    serving: Option<InFlight>,
    token: u64,
}

impl Replica {
    fn load(&self) -> usize {
        self.queue.len() + usize::from(self.serving.is_some())
    }

    fn idle(&self) -> bool {
        self.queue.is_empty() && self.serving.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum WState {
    NotSubmitted,
    ProfileRun,
    Active,
    Done,
    Unscheduled,
}

struct WorkloadRun {
    state: WState,
    true_profile: FunctionProfile,
    decision: Option<ScalingDecision>,
    replicas: Vec<Replica>,
    arrival_rng: ChaCha8Rng,
    service_rng: ChaCha8Rng,
    submitted_t: Option<f64>,
    generated: u64,
    completed: u64,
    rejected: u64,
    remaining_to_generate: u64,
    response_times: Vec<f64>,
    busy_seconds: f64,
    provisioned_seconds: f64,
    window_arrivals: u64,
    replica_trace: Vec<(f64, u32)>,
    slo_violations: u64,
    completion_t: Option<f64>,
    predicted: bool,
    unscheduled: bool,
    autoscale_target: f64,
}

struct Engine<'a> {
    cfg: &'a SimConfig,
    strategy: Strategy,
    now: f64,
    seq: u64,
    heap: BinaryHeap<Event>,
    cluster: Cluster,
    agents: Vec<NodeAgent>,
    workloads: Vec<WorkloadRun>,
    visible_store: Vec<FunctionProfile>,
    energy_j: f64,
    last_power_t: f64,
    cluster_power_w: f64,
    power_dirty: bool,
    power_series: Vec<(f64, f64)>,
    node_busy_seconds: Vec<f64>,
    node_ever_hosted: Vec<bool>,
    freq_traces: Vec<Vec<(f64, u32)>>,
    events_log: Vec<PlacementEvent>,
    notes: Vec<String>,
}

impl<'a> Engine<'a> {
    fn new(cfg: &'a SimConfig, strategy: Strategy) -> Result<Engine<'a>, SimError> {
        let initial_freq = match strategy {
            Strategy::Bp | Strategy::BpCpu => cfg.max_freq(),
            Strategy::Ees | Strategy::Bps => cfg.min_freq(),
        };
        let cluster = Cluster::new(
            cfg.node_count,
            cfg.cores_per_node,
            cfg.freq_set_mhz.clone(),
            initial_freq,
        );
        let agents = cluster
            .nodes
            .iter()
            .map(|n| {
                NodeAgent::new(
                    n.node_id.clone(),
                    cfg.cores_per_node,
                    cfg.freq_set_mhz.clone(),
                    initial_freq,
                    cfg.idle_power(initial_freq),
                    cfg.max_node_power_w,
                )
            })
            .collect();

        let hidden: Vec<&str> = cfg
            .workloads
            .iter()
            .filter(|w| w.unknown_profile)
            .map(|w| w.function_id.as_str())
            .collect();
        let visible_store: Vec<FunctionProfile> = cfg
            .profiles
            .iter()
            .filter(|p| !hidden.contains(&p.function_id.as_str()))
            .cloned()
            .collect();
        if !hidden.is_empty() && visible_store.is_empty() {
            return Err(SimError::Config(
                "profile prediction needs at least one known profile".into(),
            ));
        }

        let workloads = cfg
            .workloads
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                let true_profile = cfg
                    .profile(&spec.function_id)
                    .expect("validated profile exists")
                    .clone();
                let target = spec.autoscale_target_rps_per_replica.unwrap_or_else(|| {
                    let at_max = true_profile
                        .lookup(cfg.max_freq())
                        .expect("validated curve covers the set");
                    at_max.throughput_rps * cfg.rho_max
                });
                let mut arrival_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                arrival_rng.set_stream(10 + 2 * i as u64);
                let mut service_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                service_rng.set_stream(11 + 2 * i as u64);
                WorkloadRun {
                    state: WState::NotSubmitted,
                    true_profile,
                    decision: None,
                    replicas: Vec::new(),
                    arrival_rng,
                    service_rng,
                    submitted_t: None,
                    generated: 0,
                    completed: 0,
                    rejected: 0,
                    remaining_to_generate: spec.total_requests(),
                    response_times: Vec::new(),
                    busy_seconds: 0.0,
                    provisioned_seconds: 0.0,
                    window_arrivals: 0,
                    replica_trace: Vec::new(),
                    slo_violations: 0,
                    completion_t: None,
                    predicted: false,
                    unscheduled: false,
                    autoscale_target: target,
                }
            })
            .collect();

        let cluster_power_w =
            cfg.node_count as f64 * cfg.idle_power(initial_freq);
        let freq_traces = (0..cfg.node_count)
            .map(|_| vec![(0.0, initial_freq)])
            .collect();

        let mut engine = Engine {
            cfg,
            strategy,
            now: 0.0,
            seq: 0,
            heap: BinaryHeap::new(),
            cluster,
            agents,
            workloads,
            visible_store,
            energy_j: 0.0,
            last_power_t: 0.0,
            cluster_power_w,
            power_dirty: false,
            power_series: vec![(0.0, cluster_power_w)],
            node_busy_seconds: vec![0.0; cfg.node_count as usize],
            node_ever_hosted: vec![false; cfg.node_count as usize],
            freq_traces,
            events_log: Vec::new(),
            notes: Vec::new(),
        };

        match strategy {
            Strategy::Bp | Strategy::Bps | Strategy::BpCpu => {
                engine.notes.push(
                    "baseline placement models the orchestrator default as a deterministic \
                     round-robin spread"
                        .into(),
                );
                engine.push(cfg.autoscale_interval_s, EventKind::AutoscaleTick);
            }
            Strategy::Ees => {}
        }
        if strategy == Strategy::Bps {
            engine.notes.push(
                "powersave is modeled as an ideal governor pinned at the lowest frequency; \
                 real governors have been observed to deviate upward"
                    .into(),
            );
        }
        engine.push(cfg.rotation_period_s, EventKind::RotateTick);

        // Workload submissions: a Poisson process over the workload list.
        let mut submission_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        submission_rng.set_stream(1);
        let gap = Exp::new(cfg.workload_interarrival_rate).expect("positive rate");
        let mut t = 0.0;
        for w in 0..cfg.workloads.len() {
            t += gap.sample(&mut submission_rng);
            engine.push(t, EventKind::WorkloadArrival { w });
        }

        Ok(engine)
    }

    fn push(&mut self, t: f64, kind: EventKind) {
        let prio = kind.priority();
        self.seq += 1;
        self.heap.push(Event {
            t,
            prio,
            seq: self.seq,
            kind,
        });
    }

    fn log(&mut self, kind: &str, node: Option<&str>, job: Option<&str>, freq: Option<u32>) {
        self.events_log.push(PlacementEvent {
            t_s: self.now,
            kind: kind.to_string(),
            node_id: node.map(str::to_string),
            job_id: job.map(str::to_string),
            freq_mhz: freq,
        });
    }

    fn advance_time(&mut self, t: f64) {
        if t > self.last_power_t {
            self.energy_j += self.cluster_power_w * (t - self.last_power_t);
            self.last_power_t = t;
        }
        self.now = t;
    }

    /// Recomputes cluster power after state changes and records the step in
    /// the series.
    fn refresh_power(&mut self) {
        if !self.power_dirty {
            return;
        }
        self.power_dirty = false;
        let mut total = 0.0;
        let mut per_node = vec![0.0; self.cluster.nodes.len()];
        for (i, node) in self.cluster.nodes.iter().enumerate() {
            per_node[i] = self.cfg.idle_power(node.current_freq_mhz);
        }
        for wl in &self.workloads {
            for replica in &wl.replicas {
                if replica.removed || replica.serving.is_none() {
                    continue;
                }
                let freq = self.cluster.nodes[replica.node_idx].current_freq_mhz;
                let point = wl
                    .true_profile
                    .lookup(freq)
                    .expect("validated curve covers the set");
                per_node[replica.node_idx] += point.per_replica_power_w;
            }
        }
        for (i, watts) in per_node.iter().enumerate() {
            self.agents[i].set_power(*watts);
            total += watts;
        }
        if total != self.cluster_power_w {
            self.power_series.push((self.now, self.cluster_power_w));
            self.power_series.push((self.now, total));
            self.cluster_power_w = total;
        }
    }

    fn node_index(&self, node_id: &str) -> usize {
        self.cluster
            .nodes
            .iter()
            .position(|n| n.node_id == node_id)
            .expect("plans reference existing nodes")
    }

    fn true_exec(&self, w: usize, freq: u32) -> f64 {
        self.workloads[w]
            .true_profile
            .lookup(freq)
            .expect("validated curve covers the set")
            .avg_exec_time_s
    }

    /// Applies a frequency change decided by the scheduler: sync the agent,
    /// rescale in-flight service on that node, log and trace.
    fn apply_freq_update(&mut self, node_idx: usize, freq_mhz: u32, job: Option<&str>) {
        let old = self.agents[node_idx].freq_mhz();
        if old == freq_mhz {
            return;
        }
        self.agents[node_idx]
            .set_frequency(freq_mhz)
            .expect("scheduler frequencies are in the set");
        self.cluster.nodes[node_idx].current_freq_mhz = freq_mhz;
        self.freq_traces[node_idx].push((self.now, freq_mhz));
        let node_id = self.cluster.nodes[node_idx].node_id.clone();
        self.log("freq_update", Some(&node_id), job, Some(freq_mhz));

        // Remaining work on in-flight requests scales by the exec-time
        // ratio between the old and new frequency.
        let mut reschedule = Vec::new();
        for (w, wl) in self.workloads.iter_mut().enumerate() {
            let ratio =
                {
                    let new_exec = wl
                        .true_profile
                        .lookup(freq_mhz)
                        .expect("validated curve covers the set")
                        .avg_exec_time_s;
                    let old_exec = wl
                        .true_profile
                        .lookup(old)
                        .expect("validated curve covers the set")
                        .avg_exec_time_s;
                    new_exec / old_exec
                };
            for (i, replica) in wl.replicas.iter_mut().enumerate() {
                if replica.removed || replica.node_idx != node_idx {
                    continue;
                }
                if let Some(inflight) = replica.serving.as_mut() {
                    let remaining = (inflight.completion_t - self.now).max(0.0) * ratio;
                    inflight.completion_t = self.now + remaining;
                    replica.token += 1;
                    reschedule.push((inflight.completion_t, w, i, replica.token));
                }
            }
        }
        for (t, w, i, token) in reschedule {
            self.push(t, EventKind::ServiceCompletion { w, replica: i, token });
        }
        self.power_dirty = true;
    }

    fn exclusive_strategy(&self) -> bool {
        matches!(self.strategy, Strategy::Ees | Strategy::BpCpu)
    }

    /// Materializes a placement plan: create replicas with cold-start
    /// delays, pin containers on exclusive strategies, and process the
    /// plan's frequency updates.
    fn realize_plan(&mut self, w: usize, deployment_id: &str, plan: &PlacementPlan) {
        let updates = plan.freq_updates.clone();
        for update in &updates {
            let idx = self.node_index(&update.node_id);
            // The scheduler already wrote the new frequency into the
            // cluster view; roll the agent and in-flight work forward too.
            self.apply_freq_update(idx, update.freq_mhz, Some(deployment_id));
        }
        let exclusive = self.exclusive_strategy();
        let function_id = self.workloads[w].true_profile.function_id.clone();
        let cores = scheduler::cores_needed(&self.workloads[w].true_profile);
        for assignment in &plan.assignments {
            let node_idx = self.node_index(&assignment.node_id);
            self.node_ever_hosted[node_idx] = true;
            let node_freq = self.cluster.nodes[node_idx].current_freq_mhz;
            let delay =
                self.cfg
                    .cold_start
                    .delay_s(&function_id, node_freq, &self.cfg.freq_set_mhz);
            for _ in 0..assignment.replica_count {
                let id = self.workloads[w].replicas.len();
                let container_id = format!("{deployment_id}-r{id}");
                if exclusive {
                    self.agents[node_idx]
                        .pin(&container_id, cores)
                        .expect("scheduler reserved the cores");
                }
                let ready_at = self.now + delay;
                self.workloads[w].replicas.push(Replica {
                    node_idx,
                    container_id,
                    deployment_id: deployment_id.to_string(),
                    ready_at,
                    draining: false,
                    removed: false,
                    pinned: exclusive,
                    queue: VecDeque::new(),
                    serving: None,
                    token: 0,
                });
                self.push(ready_at, EventKind::ReplicaReady { w, replica: id });
            }
            let node_id = assignment.node_id.clone();
            self.log(
                "place",
                Some(&node_id),
                Some(deployment_id),
                Some(node_freq),
            );
        }
        self.trace_replicas(w);
        self.power_dirty = true;
    }

    fn trace_replicas(&mut self, w: usize) {
        let count = self.workloads[w]
            .replicas
            .iter()
            .filter(|r| !r.removed)
            .count() as u32;
        let trace = &mut self.workloads[w].replica_trace;
        if trace.last().map(|&(_, c)| c) != Some(count) {
            trace.push((self.now, count));
        }
    }

    /// Drops one idle replica. On the energy-efficient strategy a deployment
    /// whose last replica on a node leaves triggers the completion-time
    /// frequency rule.
    fn remove_idle_replica(&mut self, w: usize, i: usize) {
        debug_assert!(self.workloads[w].replicas[i].idle());
        let (node_idx, deployment_id, container_id, pinned, ready_at) = {
            let r = &self.workloads[w].replicas[i];
            (
                r.node_idx,
                r.deployment_id.clone(),
                r.container_id.clone(),
                r.pinned,
                r.ready_at,
            )
        };
        let node_id = self.cluster.nodes[node_idx].node_id.clone();
        let remaining_here = self.workloads[w]
            .replicas
            .iter()
            .filter(|r| {
                !r.removed && r.node_idx == node_idx && r.deployment_id == deployment_id
            })
            .count();
        if self.strategy == Strategy::Ees && remaining_here == 1 {
            let update = scheduler::on_job_complete(&mut self.cluster, &node_id, &deployment_id)
                .expect("replica is hosted");
            self.log("complete", Some(&node_id), Some(&deployment_id), None);
            if let Some(update) = update {
                let idx = self.node_index(&update.node_id);
                self.apply_freq_update(idx, update.freq_mhz, Some(&deployment_id));
            }
        } else {
            scheduler::remove_replicas(&mut self.cluster, &node_id, &deployment_id, 1)
                .expect("replica is hosted");
        }
        if pinned {
            self.agents[node_idx]
                .unpin(&container_id)
                .expect("container was pinned");
        }
        let wl = &mut self.workloads[w];
        wl.replicas[i].removed = true;
        if self.now > ready_at {
            wl.provisioned_seconds += self.now - ready_at;
        }
        self.trace_replicas(w);
        self.power_dirty = true;
    }

    fn dispatch(&mut self, w: usize) {
        let arrived_t = self.now;
        let wl = &mut self.workloads[w];
        let mut best: Option<(usize, usize)> = None;
        for (i, replica) in wl.replicas.iter().enumerate() {
            if replica.removed || replica.draining {
                continue;
            }
            let load = replica.load();
            if best.map_or(true, |(bl, _)| load < bl) {
                best = Some((load, i));
            }
        }
        match best {
            None => {
                wl.rejected += 1;
            }
            Some((_, i)) => {
                wl.replicas[i].queue.push_back(arrived_t);
                self.try_start_service(w, i);
            }
        }
    }

    fn try_start_service(&mut self, w: usize, i: usize) {
        let node_idx = {
            let replica = &self.workloads[w].replicas[i];
            if replica.removed
                || replica.serving.is_some()
                || replica.queue.is_empty()
                || replica.ready_at > self.now
            {
                return;
            }
            replica.node_idx
        };
        let freq = self.cluster.nodes[node_idx].current_freq_mhz;
        let mean = self.true_exec(w, freq);
        let duration = if self.cfg.deterministic_service {
            mean
        } else {
            let draw: f64 = Exp1.sample(&mut self.workloads[w].service_rng);
            draw * mean
        };
        let replica = &mut self.workloads[w].replicas[i];
        let arrived_t = replica.queue.pop_front().expect("queue checked non-empty");
        let completion_t = self.now + duration;
        replica.token += 1;
        let token = replica.token;
        replica.serving = Some(InFlight {
            arrived_t,
            started_t: self.now,
            completion_t,
        });
        self.push(completion_t, EventKind::ServiceCompletion { w, replica: i, token });
        self.power_dirty = true;
    }

    fn handle_workload_arrival(&mut self, w: usize) -> Result<(), SimError> {
        let spec = &self.cfg.workloads[w];
        let workload_id = spec.workload_id.clone();
        self.workloads[w].submitted_t = Some(self.now);
        self.log("submit", None, Some(&workload_id), None);

        let lambda = spec.rate_rps();
        let job = JobRequest {
            job_id: workload_id.clone(),
            function_id: spec.function_id.clone(),
            kind: match spec.kind {
                WorkloadKind::Batch { bs, deadline_s } => JobKind::Batch { bs, deadline_s },
                WorkloadKind::Stream { rate_rps, .. } => JobKind::Stream {
                    min_throughput_rps: rate_rps,
                },
            },
            profile: None,
        };

        let scheduled = match self.strategy {
            Strategy::Ees => {
                let seed = self
                    .cfg
                    .seed
                    .wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(w as u64 + 1));
                let outcome = scaling::plan_job(
                    &job,
                    &self.visible_store,
                    None,
                    &self.cfg.freq_set_mhz,
                    self.cfg.rho_max,
                    seed,
                )?;
                match outcome {
                    PlanOutcome::Decision(decision) => {
                        let profile = self.workloads[w].true_profile.clone();
                        let plan = scheduler::schedule_ees(
                            &mut self.cluster,
                            &workload_id,
                            &decision,
                            &profile,
                        )?;
                        self.workloads[w].decision = Some(decision);
                        self.finish_placement(w, &workload_id, plan, WState::Active)
                    }
                    PlanOutcome::NeedsProfileRun { freq_mhz, replicas } => {
                        let deployment = format!("{workload_id}-profile");
                        let decision = ScalingDecision {
                            freq_mhz,
                            replicas,
                            predicted_rho: 0.0,
                            predicted_power_w: 0.0,
                            lambda_rps: lambda,
                        };
                        let belief = profile_run_belief(
                            &self.workloads[w].true_profile,
                            &self.cfg.freq_set_mhz,
                        );
                        let plan = scheduler::schedule_ees(
                            &mut self.cluster,
                            &deployment,
                            &decision,
                            &belief,
                        )?;
                        let scheduled =
                            self.finish_placement(w, &deployment, plan, WState::ProfileRun);
                        if scheduled {
                            self.push(
                                self.now + self.cfg.profile_run_duration_s,
                                EventKind::ProfileRunEnd { w },
                            );
                        }
                        scheduled
                    }
                }
            }
            _ => {
                let replicas = spec.fixed_replicas.unwrap_or(1);
                let profile = self.workloads[w].true_profile.clone();
                let plan = scheduler::schedule_baseline(
                    &mut self.cluster,
                    &workload_id,
                    replicas,
                    &profile,
                    self.strategy,
                );
                self.finish_placement(w, &workload_id, plan, WState::Active)
            }
        };

        if scheduled {
            let gap = self.sample_interarrival(w);
            self.push(self.now + gap, EventKind::RequestArrival { w });
        }
        Ok(())
    }

    /// Realizes a plan or records the rejection; returns whether the
    /// workload is running.
    fn finish_placement(
        &mut self,
        w: usize,
        deployment_id: &str,
        plan: PlacementPlan,
        next_state: WState,
    ) -> bool {
        match &plan.unscheduled {
            Some(reason) => {
                self.workloads[w].state = WState::Unscheduled;
                self.workloads[w].unscheduled = true;
                self.log("unscheduled", None, Some(deployment_id), None);
                self.notes.push(format!("unscheduled: {reason}"));
                false
            }
            None => {
                self.realize_plan(w, deployment_id, &plan);
                self.workloads[w].state = next_state;
                true
            }
        }
    }

    fn sample_interarrival(&mut self, w: usize) -> f64 {
        let rate = self.cfg.workloads[w].rate_rps();
        let exp = Exp::new(rate).expect("positive rate");
        exp.sample(&mut self.workloads[w].arrival_rng)
    }

    fn handle_request_arrival(&mut self, w: usize) {
        let wl = &mut self.workloads[w];
        if wl.remaining_to_generate == 0 {
            return;
        }
        wl.remaining_to_generate -= 1;
        wl.generated += 1;
        wl.window_arrivals += 1;
        let more = wl.remaining_to_generate > 0;
        self.dispatch(w);
        if more {
            let gap = self.sample_interarrival(w);
            self.push(self.now + gap, EventKind::RequestArrival { w });
        }
    }

    fn handle_service_completion(&mut self, w: usize, i: usize, token: u64) {
        let (arrived_t, started_t, node_idx) = {
            let replica = &self.workloads[w].replicas[i];
            if replica.removed || replica.token != token {
                return; // stale event from a rescheduled or removed service
            }
            match &replica.serving {
                Some(inflight) => (inflight.arrived_t, inflight.started_t, replica.node_idx),
                None => return,
            }
        };
        let response = self.now - arrived_t;
        let busy = self.now - started_t;
        self.node_busy_seconds[node_idx] += busy;
        {
            let wl = &mut self.workloads[w];
            wl.replicas[i].serving = None;
            wl.completed += 1;
            wl.busy_seconds += busy;
            wl.response_times.push(response);
            if let Some(Slo::MaxResponseTime { seconds }) = &self.cfg.workloads[w].slo {
                if response > *seconds {
                    wl.slo_violations += 1;
                }
            }
        }
        self.power_dirty = true;
        self.try_start_service(w, i);

        let replica = &self.workloads[w].replicas[i];
        if replica.draining && replica.idle() && !replica.removed {
            self.remove_idle_replica(w, i);
        }

        let wl = &self.workloads[w];
        if wl.completed == self.cfg.workloads[w].total_requests() {
            self.finish_workload(w);
        }
    }

    fn finish_workload(&mut self, w: usize) {
        let spec = &self.cfg.workloads[w];
        let workload_id = spec.workload_id.clone();
        self.workloads[w].completion_t = Some(self.now);
        self.workloads[w].state = WState::Done;

        // Deadline and throughput objectives are judged at completion.
        let submitted = self.workloads[w].submitted_t.unwrap_or(0.0);
        let span = self.now - submitted;
        if let WorkloadKind::Batch { deadline_s, .. } = spec.kind {
            if span > deadline_s {
                self.workloads[w].slo_violations += 1;
            }
        }
        if let Some(Slo::MinThroughput { rps }) = &spec.slo {
            if span > 0.0 && (self.workloads[w].completed as f64 / span) < *rps {
                self.workloads[w].slo_violations += 1;
            }
        }

        let indices: Vec<usize> = (0..self.workloads[w].replicas.len())
            .filter(|&i| !self.workloads[w].replicas[i].removed)
            .collect();
        for i in indices {
            debug_assert!(self.workloads[w].replicas[i].idle());
            self.remove_idle_replica(w, i);
        }
        self.log("workload_done", None, Some(&workload_id), None);
    }

    fn handle_profile_run_end(&mut self, w: usize) -> Result<(), SimError> {
        if self.workloads[w].state != WState::ProfileRun {
            return Ok(());
        }
        let spec = &self.cfg.workloads[w];
        let workload_id = spec.workload_id.clone();
        let profile_deployment = format!("{workload_id}-profile");
        self.log("profile_run_end", None, Some(&workload_id), None);

        // The monitoring data reflects the frequency the replica actually
        // ran at when sampled.
        let probe_idx = self.workloads[w]
            .replicas
            .iter()
            .position(|r| !r.removed && r.deployment_id == profile_deployment)
            .expect("profile replica exists during a profile run");
        let node_idx = self.workloads[w].replicas[probe_idx].node_idx;
        let freq = self.cluster.nodes[node_idx].current_freq_mhz;
        let observed = {
            let point = self.workloads[w]
                .true_profile
                .lookup(freq)
                .expect("validated curve covers the set");
            ObservedSample {
                function_id: spec.function_id.clone(),
                freq_mhz: freq,
                measured_throughput_rps: point.throughput_rps,
                measured_cpu_utilization: point.cpu_utilization,
            }
        };

        let lambda = spec.rate_rps();
        let known = match profiles::match_closest(&self.visible_store, &observed) {
            Ok(known) => known,
            Err(e) => {
                self.notes.push(format!(
                    "{workload_id}: profile prediction failed ({e}); keeping the probe replica"
                ));
                self.workloads[w].state = WState::Active;
                return Ok(());
            }
        };
        let mut predicted = profiles::predict_profile(known, &observed)
            .expect("matched profile has the sampled point");
        // The deployment declares the real container size; only the curve
        // is estimated.
        predicted.cpu_cores = self.workloads[w].true_profile.cpu_cores;
        predicted.memory_mb = self.workloads[w].true_profile.memory_mb;

        let decision = scaling::select_config(&predicted, lambda, self.cfg.rho_max);
        let plan =
            scheduler::schedule_ees(&mut self.cluster, &workload_id, &decision, &predicted)?;
        self.workloads[w].decision = Some(decision);
        self.workloads[w].predicted = true;
        match &plan.unscheduled {
            Some(reason) => {
                // Keep serving from the probe replica so requests still
                // drain, but surface the rejection.
                self.workloads[w].unscheduled = true;
                self.workloads[w].state = WState::Active;
                self.log("unscheduled", None, Some(&workload_id), None);
                self.notes.push(format!("unscheduled: {reason}"));
            }
            None => {
                self.realize_plan(w, &workload_id, &plan);
                self.workloads[w].state = WState::Active;
                let probe = &mut self.workloads[w].replicas[probe_idx];
                probe.draining = true;
                if probe.idle() {
                    self.remove_idle_replica(w, probe_idx);
                }
            }
        }
        Ok(())
    }

    fn handle_autoscale_tick(&mut self) {
        let interval = self.cfg.autoscale_interval_s;
        for w in 0..self.workloads.len() {
            if self.workloads[w].state != WState::Active {
                self.workloads[w].window_arrivals = 0;
                continue;
            }
            let spec = &self.cfg.workloads[w];
            if spec.fixed_replicas.is_some() {
                self.workloads[w].window_arrivals = 0;
                continue;
            }
            let workload_id = spec.workload_id.clone();
            let arrivals = self.workloads[w].window_arrivals;
            self.workloads[w].window_arrivals = 0;

            let ready = self.workloads[w]
                .replicas
                .iter()
                .filter(|r| !r.removed && !r.draining && r.ready_at <= self.now)
                .count()
                .max(1) as u32;
            let total_current = self.workloads[w]
                .replicas
                .iter()
                .filter(|r| !r.removed && !r.draining)
                .count() as u32;
            let mean_load = arrivals as f64 / interval / ready as f64;
            let desired = scheduler::autoscale_rps(
                ready,
                mean_load,
                self.workloads[w].autoscale_target,
            );

            if desired > total_current {
                let delta = desired - total_current;
                let profile = self.workloads[w].true_profile.clone();
                let plan = scheduler::schedule_baseline(
                    &mut self.cluster,
                    &workload_id,
                    delta,
                    &profile,
                    self.strategy,
                );
                if plan.is_scheduled() {
                    self.realize_plan(w, &workload_id, &plan);
                } else {
                    self.notes.push(format!(
                        "{workload_id}: auto-scaler could not add {delta} replicas"
                    ));
                }
            } else if desired < total_current {
                let mut to_drain = total_current - desired;
                let ids: Vec<usize> = (0..self.workloads[w].replicas.len()).rev().collect();
                for i in ids {
                    if to_drain == 0 {
                        break;
                    }
                    let replica = &mut self.workloads[w].replicas[i];
                    if replica.removed || replica.draining {
                        continue;
                    }
                    replica.draining = true;
                    to_drain -= 1;
                    if self.workloads[w].replicas[i].idle() {
                        self.remove_idle_replica(w, i);
                    }
                }
                self.trace_replicas(w);
            }
        }
        let next = self.now + interval;
        if next <= self.cfg.duration_s {
            self.push(next, EventKind::AutoscaleTick);
        }
    }

    fn handle_rotate_tick(&mut self) {
        for agent in &mut self.agents {
            agent.rotate();
        }
        let next = self.now + self.cfg.rotation_period_s;
        if next <= self.cfg.duration_s {
            self.push(next, EventKind::RotateTick);
        }
    }

    fn run_to_horizon(mut self) -> Result<SimReport, SimError> {
        while let Some(event) = self.heap.pop() {
            if event.t > self.cfg.duration_s {
                break;
            }
            self.advance_time(event.t);
            match event.kind {
                EventKind::ServiceCompletion { w, replica, token } => {
                    self.handle_service_completion(w, replica, token)
                }
                EventKind::ReplicaReady { w, replica } => {
                    if !self.workloads[w].replicas[replica].removed {
                        self.try_start_service(w, replica);
                    }
                }
                EventKind::ProfileRunEnd { w } => self.handle_profile_run_end(w)?,
                EventKind::AutoscaleTick => self.handle_autoscale_tick(),
                EventKind::RotateTick => self.handle_rotate_tick(),
                EventKind::WorkloadArrival { w } => self.handle_workload_arrival(w)?,
                EventKind::RequestArrival { w } => self.handle_request_arrival(w),
            }
            self.refresh_power();
        }
        self.advance_time(self.cfg.duration_s);
        Ok(self.into_report())
    }

    fn into_report(mut self) -> SimReport {
        let horizon = self.cfg.duration_s;
        // Close out busy and provisioned time for whatever is still running.
        for wl in &mut self.workloads {
            for replica in &mut wl.replicas {
                if replica.removed {
                    continue;
                }
                if let Some(inflight) = &replica.serving {
                    let busy = horizon - inflight.started_t;
                    wl.busy_seconds += busy;
                    self.node_busy_seconds[replica.node_idx] += busy;
                }
                if replica.ready_at < horizon {
                    wl.provisioned_seconds += horizon - replica.ready_at;
                }
            }
        }
        self.power_series.push((horizon, self.cluster_power_w));

        let workloads = self
            .workloads
            .iter_mut()
            .zip(&self.cfg.workloads)
            .map(|(run, spec)| {
                run.response_times
                    .sort_by(|a, b| a.partial_cmp(b).expect("finite"));
                let sorted = &run.response_times;
                let mean = if sorted.is_empty() {
                    0.0
                } else {
                    sorted.iter().sum::<f64>() / sorted.len() as f64
                };
                let span = match (run.submitted_t, run.completion_t) {
                    (Some(s), Some(c)) => Some(c - s),
                    (Some(s), None) => Some(horizon - s),
                    _ => None,
                };
                let achieved = match span {
                    Some(span) if span > 0.0 => run.completed as f64 / span,
                    _ => 0.0,
                };
                WorkloadReport {
                    workload_id: spec.workload_id.clone(),
                    function_id: spec.function_id.clone(),
                    submitted_t_s: run.submitted_t,
                    generated: run.generated,
                    completed: run.completed,
                    rejected: run.rejected,
                    in_flight_at_horizon: run.generated - run.completed - run.rejected,
                    achieved_throughput_rps: achieved,
                    mean_response_time_s: mean,
                    p50_response_time_s: percentile(sorted, 0.50),
                    p95_response_time_s: percentile(sorted, 0.95),
                    p99_response_time_s: percentile(sorted, 0.99),
                    max_response_time_s: sorted.last().copied().unwrap_or(0.0),
                    mean_service_time_s: if run.completed == 0 {
                        0.0
                    } else {
                        run.busy_seconds / run.completed as f64
                    },
                    mean_busy_fraction: if run.provisioned_seconds > 0.0 {
                        run.busy_seconds / run.provisioned_seconds
                    } else {
                        0.0
                    },
                    slo_violations: run.slo_violations,
                    completion_time_s: run.completion_t,
                    duration_s: run
                        .completion_t
                        .and_then(|c| run.submitted_t.map(|s| c - s)),
                    replica_trace: run.replica_trace.clone(),
                    decision: run.decision.clone(),
                    predicted_profile: run.predicted,
                    unscheduled: run.unscheduled,
                }
            })
            .collect();

        let nodes = self
            .cluster
            .nodes
            .iter()
            .enumerate()
            .map(|(i, node)| NodeReport {
                node_id: node.node_id.clone(),
                ever_hosted: self.node_ever_hosted[i],
                busy_replica_seconds: self.node_busy_seconds[i],
                freq_trace: self.freq_traces[i].clone(),
            })
            .collect();

        SimReport {
            strategy: self.strategy.name().to_string(),
            seed: self.cfg.seed,
            duration_s: horizon,
            total_energy_j: self.energy_j,
            power_timeseries: self.power_series,
            workloads,
            nodes,
            events: self.events_log,
            notes: self.notes,
        }
    }
}

/// Placeholder curve for placing a profile-run replica of a function with
/// no historic data: real container size, zero believed power (nothing is
/// known yet), unit timing.
fn profile_run_belief(true_profile: &FunctionProfile, freq_set: &[u32]) -> FunctionProfile {
    FunctionProfile {
        function_id: true_profile.function_id.clone(),
        cpu_cores: true_profile.cpu_cores,
        memory_mb: true_profile.memory_mb,
        curve: freq_set
            .iter()
            .map(|&freq_mhz| crate::profiles::FrequencyPoint {
                freq_mhz,
                avg_exec_time_s: 1.0,
                throughput_rps: 1.0,
                per_replica_power_w: 0.0,
                cpu_utilization: 1.0,
            })
            .collect(),
    }
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}
