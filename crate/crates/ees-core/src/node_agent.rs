//! Per-node processor management agent.
//!
//! Each worker node runs one agent that sets the CPU frequency, reports
//! frequency/power/temperature, pins containers to exclusive cores and
//! periodically rotates core assignments to avoid hot spots. The agent can
//! be driven in-process (simulation) or over a newline-delimited TCP
//! protocol (integration mode); both paths share the same state machine.
//!
//! Wire grammar, one request/reply pair per `\n`-terminated ASCII line:
//!
//! ```text
//! SETFREQ <mhz>   ->  CONFIRM | ERR 400 unknown-frequency
//! STATUS          ->  STATUS <mhz> <watts> <tempC>
//! PING            ->  PONG
//! ```
//!
//! Watts and temperature carry exactly two fraction digits; frequencies are
//! decimal integer MHz. Any request against an unavailable agent gets
//! `ERR 503 agent-unavailable`; a failed request never mutates state.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use thiserror::Error;

const TEMP_BASE_C: f64 = 35.0;
const TEMP_SPAN_C: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AgentError {
    #[error("unknown-frequency")]
    UnknownFrequency(u32),
    #[error("agent-unavailable")]
    Unavailable,
    #[error("insufficient cores: requested {requested}, free {free}")]
    InsufficientCores { requested: u32, free: u32 },
    #[error("container {0} already pinned")]
    AlreadyPinned(String),
    #[error("unknown container {0}")]
    UnknownContainer(String),
}

impl AgentError {
    /// Protocol error code; only frequency and availability failures travel
    /// over the wire.
    pub fn wire_code(&self) -> u16 {
        match self {
            AgentError::Unavailable => 503,
            _ => 400,
        }
    }
}

/// Snapshot returned by STATUS.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentStatus {
    pub freq_mhz: u32,
    pub power_w: f64,
    pub temp_c: f64,
}

/// State of one node's agent.
#[derive(Debug, Clone)]
pub struct NodeAgent {
    node_id: String,
    total_cores: u32,
    freq_set: Vec<u32>,
    freq_mhz: u32,
    core_map: BTreeMap<String, BTreeSet<u32>>,
    power_w: f64,
    max_power_w: f64,
    available: bool,
}

impl NodeAgent {
    pub fn new(
        node_id: impl Into<String>,
        total_cores: u32,
        freq_set: Vec<u32>,
        initial_freq_mhz: u32,
        initial_power_w: f64,
        max_power_w: f64,
    ) -> NodeAgent {
        assert!(
            freq_set.contains(&initial_freq_mhz),
            "initial frequency must be in the frequency set"
        );
        NodeAgent {
            node_id: node_id.into(),
            total_cores,
            freq_set,
            freq_mhz: initial_freq_mhz,
            core_map: BTreeMap::new(),
            power_w: initial_power_w,
            max_power_w,
            available: true,
        }
    }

    pub fn node_id(&self) -> &str {
        &self.node_id
    }

    pub fn freq_mhz(&self) -> u32 {
        self.freq_mhz
    }

    pub fn core_map(&self) -> &BTreeMap<String, BTreeSet<u32>> {
        &self.core_map
    }

    /// Fault injection switch; an unavailable agent answers ERR 503.
    pub fn set_available(&mut self, available: bool) {
        self.available = available;
    }

    /// The simulation owner feeds the measured node power here so STATUS
    /// and the temperature model track the cluster state.
    pub fn set_power(&mut self, watts: f64) {
        self.power_w = watts;
    }

    fn check_available(&self) -> Result<(), AgentError> {
        if self.available {
            Ok(())
        } else {
            Err(AgentError::Unavailable)
        }
    }

    /// Applies a frequency update; idempotent for the current frequency.
    pub fn set_frequency(&mut self, freq_mhz: u32) -> Result<(), AgentError> {
        self.check_available()?;
        if !self.freq_set.contains(&freq_mhz) {
            return Err(AgentError::UnknownFrequency(freq_mhz));
        }
        self.freq_mhz = freq_mhz;
        Ok(())
    }

    /// Pins a container to the lowest-numbered free cores. No partial
    /// assignment: on failure the map is untouched.
    pub fn pin(
        &mut self,
        container_id: &str,
        core_count: u32,
    ) -> Result<BTreeSet<u32>, AgentError> {
        self.check_available()?;
        if self.core_map.contains_key(container_id) {
            return Err(AgentError::AlreadyPinned(container_id.to_string()));
        }
        let taken: BTreeSet<u32> = self.core_map.values().flatten().copied().collect();
        let free: Vec<u32> = (0..self.total_cores).filter(|c| !taken.contains(c)).collect();
        if (free.len() as u32) < core_count {
            return Err(AgentError::InsufficientCores {
                requested: core_count,
                free: free.len() as u32,
            });
        }
        let assigned: BTreeSet<u32> = free.into_iter().take(core_count as usize).collect();
        self.core_map
            .insert(container_id.to_string(), assigned.clone());
        Ok(assigned)
    }

    pub fn unpin(&mut self, container_id: &str) -> Result<(), AgentError> {
        self.core_map
            .remove(container_id)
            .map(|_| ())
            .ok_or_else(|| AgentError::UnknownContainer(container_id.to_string()))
    }

    /// Shifts every assigned core index by +1 modulo the core count. Sizes
    /// and pairwise disjointness are preserved (the shift is a bijection).
    pub fn rotate(&mut self) {
        let total = self.total_cores;
        for cores in self.core_map.values_mut() {
            *cores = cores.iter().map(|c| (c + 1) % total).collect();
        }
    }

    pub fn status(&self) -> AgentStatus {
        AgentStatus {
            freq_mhz: self.freq_mhz,
            power_w: self.power_w,
            temp_c: self.temp_c(),
        }
    }

    /// Synthetic die temperature: base 35 °C plus 10 °C at full node power.
    pub fn temp_c(&self) -> f64 {
        TEMP_BASE_C + TEMP_SPAN_C * (self.power_w / self.max_power_w)
    }
}

/// Parses one request line and executes it, producing the reply line
/// (without the trailing newline).
pub fn handle_request(agent: &Mutex<NodeAgent>, line: &str) -> String {
    let line = line.trim_end_matches(['\r', '\n']);
    let mut parts = line.split(' ');
    match parts.next() {
        Some("SETFREQ") => {
            let arg = parts.next().and_then(|s| s.parse::<u32>().ok());
            match arg {
                Some(freq) => {
                    let mut agent = agent.lock().unwrap();
                    match agent.set_frequency(freq) {
                        Ok(()) => "CONFIRM".to_string(),
                        Err(e) => format!("ERR {} {}", e.wire_code(), e),
                    }
                }
                None => "ERR 400 malformed-request".to_string(),
            }
        }
        Some("STATUS") => {
            let agent = agent.lock().unwrap();
            match agent.check_available() {
                Ok(()) => {
                    let s = agent.status();
                    format!("STATUS {} {:.2} {:.2}", s.freq_mhz, s.power_w, s.temp_c)
                }
                Err(e) => format!("ERR {} {}", e.wire_code(), e),
            }
        }
        Some("PING") => {
            let agent = agent.lock().unwrap();
            match agent.check_available() {
                Ok(()) => "PONG".to_string(),
                Err(e) => format!("ERR {} {}", e.wire_code(), e),
            }
        }
        _ => "ERR 400 unknown-command".to_string(),
    }
}

/// TCP front end for one agent. Accepts any number of connections; requests
/// on a connection are answered in order.
pub struct AgentServer {
    agent: Arc<Mutex<NodeAgent>>,
    listener: TcpListener,
}

/// Running server; dropping the handle (or calling `shutdown`) stops the
/// accept loop.
pub struct AgentServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept_thread: Option<JoinHandle<()>>,
}

impl AgentServer {
    pub fn bind(
        agent: Arc<Mutex<NodeAgent>>,
        addr: impl ToSocketAddrs,
    ) -> std::io::Result<AgentServer> {
        Ok(AgentServer {
            agent,
            listener: TcpListener::bind(addr)?,
        })
    }

    pub fn local_addr(&self) -> std::io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    /// Starts the accept loop on a background thread.
    pub fn spawn(self) -> std::io::Result<AgentServerHandle> {
        let addr = self.listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let stop_accept = stop.clone();
        let agent = self.agent;
        let listener = self.listener;
        let accept_thread = std::thread::spawn(move || {
            for stream in listener.incoming() {
                if stop_accept.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let agent = agent.clone();
                std::thread::spawn(move || serve_connection(agent, stream));
            }
        });
        Ok(AgentServerHandle {
            addr,
            stop,
            accept_thread: Some(accept_thread),
        })
    }
}

impl AgentServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Wake the accept loop.
        let _ = TcpStream::connect(self.addr);
        if let Some(handle) = self.accept_thread.take() {
            let _ = handle.join();
        }
    }
}

impl Drop for AgentServerHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn serve_connection(agent: Arc<Mutex<NodeAgent>>, stream: TcpStream) {
    let _ = stream.set_nodelay(true);
    let Ok(read_half) = stream.try_clone() else {
        return;
    };
    let mut writer = stream;
    let reader = BufReader::new(read_half);
    for line in reader.lines() {
        let Ok(line) = line else { break };
        if line.trim().is_empty() {
            continue;
        }
        let reply = handle_request(&agent, &line);
        if writer
            .write_all(format!("{reply}\n").as_bytes())
            .and_then(|_| writer.flush())
            .is_err()
        {
            break;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn freq_set() -> Vec<u32> {
        (2000..=3600).step_by(200).collect()
    }

    fn agent() -> NodeAgent {
        NodeAgent::new("n00", 4, freq_set(), 2000, 6.0, 80.0)
    }

    #[test]
    fn set_frequency_in_set_confirms() {
        let mut a = agent();
        assert_eq!(a.set_frequency(2800), Ok(()));
        assert_eq!(a.freq_mhz(), 2800);
        // Idempotent.
        assert_eq!(a.set_frequency(2800), Ok(()));
        assert_eq!(a.freq_mhz(), 2800);
    }

    #[test]
    fn set_frequency_outside_set_rejected_without_mutation() {
        let mut a = agent();
        assert_eq!(a.set_frequency(2500), Err(AgentError::UnknownFrequency(2500)));
        assert_eq!(a.freq_mhz(), 2000);
    }

    #[test]
    fn unavailable_agent_rejects_everything() {
        let mut a = agent();
        a.set_available(false);
        assert_eq!(a.set_frequency(2800), Err(AgentError::Unavailable));
        assert_eq!(a.pin("c1", 1), Err(AgentError::Unavailable));
        assert_eq!(a.freq_mhz(), 2000);
        assert!(a.core_map().is_empty());
    }

    #[test]
    fn pin_takes_lowest_free_cores() {
        let mut a = agent();
        assert_eq!(a.pin("a", 2).unwrap(), BTreeSet::from([0, 1]));
        assert_eq!(a.pin("b", 2).unwrap(), BTreeSet::from([2, 3]));
    }

    #[test]
    fn pin_without_room_fails_without_partial_assignment() {
        let mut a = agent();
        a.pin("a", 3).unwrap();
        assert_eq!(
            a.pin("b", 2),
            Err(AgentError::InsufficientCores {
                requested: 2,
                free: 1
            })
        );
        assert_eq!(a.core_map().len(), 1);
    }

    #[test]
    fn rotate_shifts_by_one_modulo_cores() {
        let mut a = agent();
        a.pin("a", 2).unwrap(); // {0,1}
        a.pin("b", 1).unwrap(); // {2}
        a.rotate();
        assert_eq!(a.core_map()["a"], BTreeSet::from([1, 2]));
        assert_eq!(a.core_map()["b"], BTreeSet::from([3]));
    }

    #[test]
    fn rotate_full_node_is_identity_on_sets() {
        let mut a = agent();
        a.pin("a", 4).unwrap();
        a.rotate();
        assert_eq!(a.core_map()["a"], BTreeSet::from([0, 1, 2, 3]));
    }

    #[test]
    fn rotate_empty_map_is_noop() {
        let mut a = agent();
        a.rotate();
        assert!(a.core_map().is_empty());
    }

    #[test]
    fn status_reads_back_frequency_and_temperature() {
        let mut a = agent();
        a.set_frequency(3000).unwrap();
        let s = a.status();
        assert_eq!(s.freq_mhz, 3000);
        // Idle power 6 W of 80 W max: 35 + 10 * 6/80 = 35.75 °C.
        assert!((s.temp_c - 35.75).abs() < 1e-12);
    }

    #[test]
    fn temperature_hits_45_at_full_power() {
        let mut a = agent();
        a.set_power(80.0);
        assert_eq!(a.status().temp_c, 45.0);
    }

    proptest! {
        #[test]
        fn core_map_stays_disjoint_under_random_ops(ops in prop::collection::vec(0u8..4, 1..60)) {
            let mut a = NodeAgent::new("n", 6, freq_set(), 2000, 6.0, 80.0);
            let mut next = 0u32;
            for op in ops {
                match op {
                    0 => {
                        let _ = a.pin(&format!("c{next}"), (next % 3) + 1);
                        next += 1;
                    }
                    1 => a.rotate(),
                    2 => {
                        let id = format!("c{}", next.saturating_sub(1));
                        let _ = a.unpin(&id);
                    }
                    _ => {
                        let _ = a.set_frequency(2000 + 200 * (next % 9));
                    }
                }
                let mut seen = BTreeSet::new();
                for cores in a.core_map().values() {
                    for c in cores {
                        prop_assert!(*c < 6);
                        prop_assert!(seen.insert(*c), "core {} assigned twice", c);
                    }
                }
            }
        }

        #[test]
        fn rotate_total_cores_times_is_identity(pins in prop::collection::vec(1u32..3, 1..4)) {
            let mut a = NodeAgent::new("n", 8, freq_set(), 2000, 6.0, 80.0);
            for (i, count) in pins.iter().enumerate() {
                let _ = a.pin(&format!("c{i}"), *count);
            }
            let before = a.core_map().clone();
            for _ in 0..8 {
                a.rotate();
            }
            prop_assert_eq!(a.core_map().clone(), before);
        }
    }

    #[test]
    fn wire_grammar_round_trips() {
        let agent = Mutex::new(agent());
        assert_eq!(handle_request(&agent, "SETFREQ 2800"), "CONFIRM");
        assert_eq!(
            handle_request(&agent, "SETFREQ 2500"),
            "ERR 400 unknown-frequency"
        );
        assert_eq!(handle_request(&agent, "PING"), "PONG");
        assert_eq!(handle_request(&agent, "STATUS"), "STATUS 2800 6.00 35.75");
        assert_eq!(handle_request(&agent, "NOPE"), "ERR 400 unknown-command");
        assert_eq!(handle_request(&agent, "SETFREQ abc"), "ERR 400 malformed-request");
    }

    #[test]
    fn wire_unavailable_maps_to_503() {
        let a = Mutex::new(agent());
        a.lock().unwrap().set_available(false);
        assert_eq!(
            handle_request(&a, "SETFREQ 2800"),
            "ERR 503 agent-unavailable"
        );
        assert_eq!(a.lock().unwrap().freq_mhz(), 2000);
    }
}
