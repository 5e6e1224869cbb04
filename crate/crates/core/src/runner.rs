//! Builds a topology from a [`RunConfig`] and executes it on either
//! transport.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

use crate::consensus::{seeded_rng, ConsensusError, NodeId, TiePool};
use crate::dataset::{BusDataset, DatasetTelemetry, Partition};
use crate::harness::tcp::{self, default_endpoints, RunOptions, TcpTransport, WireTap};
use crate::harness::{HarnessError, Latency, NetworkPolicy, Simulation, Tick, Trace};
use crate::ledger::{validate_chain, Chain, HashMode, Violation};
use crate::metrics::{cycle_metrics, CycleMetrics};
use crate::nodes::{
    aggregator_id, control_center_id, topology, Aggregator, Behavior, ControlCenter, CycleOutcome,
    Peer, ProtocolConfig, Relay, ShareRoute, DEFAULT_PERIOD, DEFAULT_PHASE_TIMEOUT,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Transport {
    #[default]
    Sim,
    Tcp,
}

impl FromStr for Transport {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sim" => Ok(Transport::Sim),
            "tcp" => Ok(Transport::Tcp),
            other => Err(format!("unknown transport `{other}` (sim|tcp)")),
        }
    }
}

impl fmt::Display for Transport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Transport::Sim => "sim",
            Transport::Tcp => "tcp",
        })
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Harness(#[from] HarnessError),
}

impl From<ConsensusError> for RunError {
    fn from(e: ConsensusError) -> Self {
        RunError::Config(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub relays: usize,
    pub cycles: u64,
    pub period_ms: Tick,
    pub seed: u64,
    pub challenge_lo: u64,
    pub challenge_hi: u64,
    pub k_eligible: Option<usize>,
    pub hash_mode: HashMode,
    pub tie_pool: TiePool,
    pub share_route: ShareRoute,
    pub transport: Transport,
    pub latency: Latency,
    /// Simulated uplink cost per DNP3m frame.
    pub per_frame_ms: Tick,
    pub drops: BTreeMap<NodeId, f64>,
    pub phase_timeout_ms: Tick,
    pub partition: Option<Partition>,
    pub behaviors: BTreeMap<NodeId, Behavior>,
    pub realtime: bool,
    /// First TCP port; 0 picks free ports.
    pub base_port: u16,
    pub record_trace: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            relays: 4,
            cycles: 10,
            period_ms: DEFAULT_PERIOD,
            seed: 0,
            challenge_lo: 0,
            challenge_hi: 9,
            k_eligible: None,
            hash_mode: HashMode::Single,
            tie_pool: TiePool::Tied,
            share_route: ShareRoute::Direct,
            transport: Transport::Sim,
            latency: Latency::Fixed(1),
            per_frame_ms: 1,
            drops: BTreeMap::new(),
            phase_timeout_ms: DEFAULT_PHASE_TIMEOUT,
            partition: None,
            behaviors: BTreeMap::new(),
            realtime: false,
            base_port: crate::harness::tcp::DEFAULT_BASE_PORT,
            record_trace: true,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), RunError> {
        let bad = |m: String| Err(RunError::Config(m));
        if self.relays < 2 {
            return bad(format!("need at least 2 relays, got {}", self.relays));
        }
        if self.cycles < 1 {
            return bad("need at least 1 cycle".into());
        }
        if let Some(k) = self.k_eligible {
            if k == 0 || k > self.relays {
                return bad(format!(
                    "k-eligible must be in 1..={}, got {k}",
                    self.relays
                ));
            }
        }
        if self.challenge_lo > self.challenge_hi {
            return bad(format!(
                "challenge range [{}, {}] is empty",
                self.challenge_lo, self.challenge_hi
            ));
        }
        if let Latency::Uniform { lo, hi } = self.latency {
            if lo > hi {
                return bad(format!("latency range [{lo}, {hi}] is empty"));
            }
        }
        let ids = self.node_ids();
        for (node, p) in &self.drops {
            if !(0.0..=1.0).contains(p) {
                return bad(format!(
                    "drop probability for {node} must be in [0, 1], got {p}"
                ));
            }
            if !ids.contains(node) {
                return bad(format!("cannot drop unknown node {node}"));
            }
        }
        for node in self.behaviors.keys() {
            if !self.relay_ids().contains(node) {
                return bad(format!("behavior set for unknown relay {node}"));
            }
        }
        if let Some(p) = &self.partition {
            if p.relays() != self.relays {
                return bad(format!(
                    "partition lists {} relays but {} are configured",
                    p.relays(),
                    self.relays
                ));
            }
        }
        if self.phase_timeout_ms == 0 {
            return bad("phase timeout must be positive".into());
        }
        Ok(())
    }

    pub fn relay_ids(&self) -> Vec<NodeId> {
        (1..=self.relays).map(NodeId::relay).collect()
    }

    /// Every node in topology order: CC, DA, relays.
    pub fn node_ids(&self) -> Vec<NodeId> {
        let mut ids = vec![control_center_id(), aggregator_id()];
        ids.extend(self.relay_ids());
        ids
    }

    pub fn protocol(&self) -> ProtocolConfig {
        ProtocolConfig {
            hash_mode: self.hash_mode,
            challenge_lo: self.challenge_lo,
            challenge_hi: self.challenge_hi,
            k_eligible: self.k_eligible,
            tie_pool: self.tie_pool,
            share_route: self.share_route,
            phase_timeout: self.phase_timeout_ms,
        }
    }

    pub fn policy(&self) -> NetworkPolicy {
        NetworkPolicy {
            latency: self.latency,
            per_frame: self.per_frame_ms,
            node_drop: self.drops.clone(),
            seed: self.seed,
            ..NetworkPolicy::default()
        }
    }

    pub fn is_fault_injected(&self) -> bool {
        self.drops.values().any(|p| *p > 0.0)
            || self.behaviors.values().any(|b| *b != Behavior::Honest)
    }

    fn peers(&self, dataset: &Arc<BusDataset>, back_to_back: bool) -> Result<Vec<Peer>, RunError> {
        self.validate()?;
        let protocol = self.protocol();
        let partition = self
            .partition
            .clone()
            .unwrap_or_else(|| Partition::contiguous(self.relays));
        let relays = self
            .relay_ids()
            .into_iter()
            .enumerate()
            .map(|(i, id)| {
                let telemetry =
                    DatasetTelemetry::new(dataset.clone(), partition.buses(i).to_vec(), self.seed);
                let behavior = self.behaviors.get(&id).copied().unwrap_or_default();
                Relay::new(id, protocol, Box::new(telemetry)).with_behavior(behavior)
            })
            .collect();
        // the challenge stream is independent of the network's drop stream
        let rng = seeded_rng(self.seed ^ 0x5eed_c0de);
        let da = Aggregator::new(aggregator_id(), self.relay_ids(), protocol, rng)?;
        let mut cc = ControlCenter::new(control_center_id(), self.cycles, self.hash_mode)
            .with_period(self.period_ms)
            .with_await_timeout(6 * self.phase_timeout_ms);
        if back_to_back {
            cc = cc.back_to_back();
        }
        Ok(topology(relays, da, cc))
    }
}

/// Everything a run leaves behind.
#[derive(Debug, Clone)]
pub struct RunReport {
    /// The aggregator's chain.
    pub chain: Chain,
    /// Relay replicas plus the aggregator's, keyed by node.
    pub replicas: BTreeMap<NodeId, Chain>,
    /// The control center's copy.
    pub control_chain: Chain,
    pub metrics: Vec<CycleMetrics>,
    pub trace: Trace,
    pub outcomes: Vec<CycleOutcome>,
}

impl RunReport {
    pub fn committed(&self) -> usize {
        self.metrics.iter().filter(|m| m.committed()).count()
    }

    /// True when every replica, the control center's included, is identical.
    pub fn replicas_identical(&self) -> bool {
        self.replicas.values().all(|c| *c == self.chain) && self.control_chain == self.chain
    }

    /// True when no two replicas disagree on a common prefix.
    pub fn replicas_consistent(&self) -> bool {
        let all: Vec<&Chain> = self
            .replicas
            .values()
            .chain(std::iter::once(&self.control_chain))
            .collect();
        all.iter().all(|a| {
            all.iter().all(|b| {
                let n = a.len().min(b.len());
                a.blocks[..n] == b.blocks[..n]
            })
        })
    }

    /// Validates every replica.
    pub fn validate(&self) -> Result<(), (NodeId, Vec<Violation>)> {
        for (node, chain) in &self.replicas {
            validate_chain(chain).map_err(|v| (node.clone(), v))?;
        }
        validate_chain(&self.control_chain).map_err(|v| (control_center_id(), v))
    }
}

fn report(peers: Vec<Peer>, trace: Trace) -> RunReport {
    let mut replicas = BTreeMap::new();
    let mut chain = None;
    let mut control_chain = None;
    let mut records = Vec::new();
    let mut log = Vec::new();
    let mut outcomes = Vec::new();
    for peer in peers {
        match peer {
            Peer::Relay(r) => {
                replicas.insert(crate::harness::Node::id(&r).clone(), r.chain().clone());
            }
            Peer::Aggregator(a) => {
                replicas.insert(aggregator_id(), a.chain().clone());
                chain = Some(a.chain().clone());
                log = a.phase_log().to_vec();
                outcomes = a.history().iter().map(|(_, o)| o.clone()).collect();
            }
            Peer::ControlCenter(c) => {
                control_chain = Some(c.chain().clone());
                records = c.records().to_vec();
            }
        }
    }
    RunReport {
        chain: chain.expect("topology has an aggregator"),
        replicas,
        control_chain: control_chain.expect("topology has a control center"),
        metrics: cycle_metrics(&records, &log),
        trace,
        outcomes,
    }
}

/// Runs on the deterministic simulator.
pub fn run_simulated(config: &RunConfig, dataset: Arc<BusDataset>) -> Result<RunReport, RunError> {
    let peers = config.peers(&dataset, false)?;
    let mut sim = Simulation::new(peers, config.policy())?;
    sim.record_trace(config.record_trace);
    sim.set_realtime(config.realtime);
    let trace = sim.run_until_idle(Tick::MAX);
    Ok(report(sim.into_nodes(), trace))
}

/// Runs over localhost TCP. Without `realtime` the control center starts
/// each cycle as soon as the previous one settles.
pub fn run_tcp(
    config: &RunConfig,
    dataset: Arc<BusDataset>,
    tap: Option<WireTap>,
) -> Result<RunReport, RunError> {
    let peers = config.peers(&dataset, !config.realtime)?;
    let endpoints = default_endpoints(&config.node_ids(), config.base_port);
    let transport = Arc::new(TcpTransport::bind(&endpoints, tap)?);
    let per_cycle = if config.realtime {
        config.period_ms
    } else {
        6 * config.phase_timeout_ms
    };
    let deadline = Duration::from_millis(per_cycle.saturating_mul(config.cycles + 1))
        .max(Duration::from_secs(5));
    let opts = RunOptions {
        deadline,
        record_trace: config.record_trace,
    };
    let (peers, trace) = tcp::run(peers, transport, opts)?;
    Ok(report(peers, trace))
}

pub fn run(config: &RunConfig, dataset: Arc<BusDataset>) -> Result<RunReport, RunError> {
    match config.transport {
        Transport::Sim => run_simulated(config, dataset),
        Transport::Tcp => run_tcp(config, dataset, None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(cycles: u64) -> RunConfig {
        RunConfig {
            cycles,
            ..RunConfig::default()
        }
    }

    #[test]
    fn default_run_commits_every_cycle() {
        let r = run_simulated(&quick(10), Arc::new(BusDataset::builtin())).unwrap();
        assert_eq!(r.chain.len(), 11);
        assert_eq!(r.committed(), 10);
        assert!(r.replicas_identical());
        assert_eq!(r.replicas.len(), 5);
        r.validate().unwrap();
        assert_eq!(r.metrics.len(), 10);
        for m in &r.metrics {
            assert!(m.selection_fraction > 0.0 && m.selection_fraction < 1.0);
            assert_eq!(m.phase_sum(), m.total_ms);
        }
        // scheduled stamps
        let stamps: Vec<u64> = r.chain.blocks.iter().map(|b| b.header.timestamp).collect();
        assert_eq!(
            stamps[1..],
            (0..10).map(|c| c * 15000).collect::<Vec<_>>()[..]
        );
    }

    #[test]
    fn dropped_relay_keeps_genesis() {
        let mut cfg = quick(3);
        cfg.drops.insert(NodeId::relay(2), 1.0);
        let r = run_simulated(&cfg, Arc::new(BusDataset::builtin())).unwrap();
        assert_eq!(r.chain.len(), 1);
        assert!(r.replicas_identical());
        assert!(r
            .metrics
            .iter()
            .all(|m| m.outcome.starts_with("aborted:timeout")));
    }

    #[test]
    fn double_hash_mode_runs() {
        let mut cfg = quick(2);
        cfg.hash_mode = HashMode::Double;
        let r = run_simulated(&cfg, Arc::new(BusDataset::builtin())).unwrap();
        assert_eq!(r.chain.hash_mode, HashMode::Double);
        assert_eq!(r.committed(), 2);
        r.validate().unwrap();
    }

    #[test]
    fn config_validation() {
        let ok = RunConfig::default();
        ok.validate().unwrap();
        let cases = [
            RunConfig {
                relays: 1,
                ..ok.clone()
            },
            RunConfig {
                cycles: 0,
                ..ok.clone()
            },
            RunConfig {
                k_eligible: Some(5),
                ..ok.clone()
            },
            RunConfig {
                k_eligible: Some(0),
                ..ok.clone()
            },
            RunConfig {
                challenge_lo: 3,
                challenge_hi: 2,
                ..ok.clone()
            },
            RunConfig {
                latency: Latency::Uniform { lo: 3, hi: 1 },
                ..ok.clone()
            },
            RunConfig {
                partition: Some(Partition::contiguous(3)),
                ..ok.clone()
            },
            RunConfig {
                phase_timeout_ms: 0,
                ..ok.clone()
            },
        ];
        for c in cases {
            assert!(matches!(c.validate(), Err(RunError::Config(_))), "{c:?}");
        }
        let mut bad_drop = ok.clone();
        bad_drop.drops.insert(NodeId::relay(9), 1.0);
        assert!(bad_drop.validate().is_err());
        let mut bad_p = ok;
        bad_p.drops.insert(NodeId::relay(1), 1.5);
        assert!(bad_p.validate().is_err());
    }

    #[test]
    fn transport_parses() {
        assert_eq!("tcp".parse::<Transport>().unwrap(), Transport::Tcp);
        assert_eq!("sim".parse::<Transport>().unwrap(), Transport::Sim);
        assert!("udp".parse::<Transport>().is_err());
    }
}
