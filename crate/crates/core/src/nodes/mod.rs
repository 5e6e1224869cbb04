//! Relay, aggregator and control-center state machines.
//!
//! One acquisition cycle runs: the control center asks the aggregator for
//! data, the aggregator collects every relay's measurements, checks that all
//! replicas agree on the chain tip, runs the random-count selection, hands
//! the aggregated payload to the elected miner, has everyone verify the new
//! block and finally tells every replica to append it.

mod aggregator;
mod control;
pub mod message;
mod relay;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use thiserror::Error;

pub use aggregator::{Aggregator, CycleState, PhaseEntry};
pub use control::{ControlCenter, CycleRecord, Pacing, StampMode};
pub use message::{Body, MessageError, MessageKind, ProtocolMessage, VoteChoice};
pub use relay::{Behavior, Relay};

use crate::consensus::{CountReport, NodeId, RandomChallenge, TiePool};
use crate::dnp3m::Message;
use crate::harness::{Context, Label, Node, Tick};
use crate::ledger::{sha256_hex, HashMode, MeasurementSet, ViolationKind};

pub const DEFAULT_PHASE_TIMEOUT: Tick = 2000;
pub const DEFAULT_PERIOD: Tick = 15_000;

pub fn aggregator_id() -> NodeId {
    NodeId::new("DA").expect("valid id")
}

pub fn control_center_id() -> NodeId {
    NodeId::new("CC").expect("valid id")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NodeRole {
    Relay,
    Aggregator,
    ControlCenter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub enum Phase {
    #[default]
    Idle,
    Acquiring,
    ChainChecking,
    Selecting,
    Mining,
    Verifying,
    Adding,
    Done,
    Aborted,
}

impl Phase {
    pub const ALL: [Phase; 9] = [
        Phase::Idle,
        Phase::Acquiring,
        Phase::ChainChecking,
        Phase::Selecting,
        Phase::Mining,
        Phase::Verifying,
        Phase::Adding,
        Phase::Done,
        Phase::Aborted,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Idle => "idle",
            Phase::Acquiring => "acquiring",
            Phase::ChainChecking => "chain-checking",
            Phase::Selecting => "selecting",
            Phase::Mining => "mining",
            Phase::Verifying => "verifying",
            Phase::Adding => "adding",
            Phase::Done => "done",
            Phase::Aborted => "aborted",
        }
    }

    /// Phases in which the aggregator is waiting on other nodes.
    pub fn is_active(self) -> bool {
        matches!(
            self,
            Phase::Acquiring
                | Phase::ChainChecking
                | Phase::Selecting
                | Phase::Mining
                | Phase::Verifying
                | Phase::Adding
        )
    }

    /// The declared phase order. A finished cycle (done or aborted) may only
    /// be followed by the next cycle's acquisition.
    pub fn can_transition(self, to: Phase) -> bool {
        use Phase::*;
        match (self, to) {
            (Idle | Done | Aborted, Acquiring) => true,
            (Acquiring, ChainChecking)
            | (ChainChecking, Selecting)
            | (Selecting, Mining)
            | (Mining, Verifying)
            | (Verifying, Adding)
            | (Adding, Done) => true,
            (from, Aborted) => from.is_active(),
            _ => false,
        }
    }

    fn ordinal(self) -> u64 {
        Phase::ALL.iter().position(|p| *p == self).expect("listed") as u64
    }

    fn from_ordinal(n: u64) -> Option<Phase> {
        Phase::ALL.get(n as usize).copied()
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Phase {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Phase::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| format!("unknown phase `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VerifyFault {
    Violation(ViolationKind),
    /// The block does not carry the payload the aggregator assigned.
    PayloadMismatch,
}

impl fmt::Display for VerifyFault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VerifyFault::Violation(v) => write!(f, "{v}"),
            VerifyFault::PayloadMismatch => f.write_str("PayloadMismatch"),
        }
    }
}

impl FromStr for VerifyFault {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "PayloadMismatch" {
            Ok(VerifyFault::PayloadMismatch)
        } else {
            s.parse().map(VerifyFault::Violation)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum AbortReason {
    /// A phase expired; `missing` lists the nodes that never answered.
    Timeout {
        phase: Phase,
        missing: Vec<NodeId>,
    },
    DuplicateResponse(NodeId),
    UnknownRelay(NodeId),
    /// A message that could not be decoded or did not fit the phase.
    Malformed(NodeId),
    ChainMismatch(NodeId),
    CountMismatch(NodeId),
    VoteDisagreement(NodeId),
    VerificationFailed(NodeId, VerifyFault),
    AddRejected(NodeId),
    /// The control center started a new cycle before this one finished.
    Superseded,
    /// The control center gave up waiting for the aggregator.
    NoUpdate,
}

impl AbortReason {
    /// The node blamed for the abort, if any.
    pub fn flagged(&self) -> Vec<NodeId> {
        match self {
            AbortReason::Timeout { missing, .. } => missing.clone(),
            AbortReason::DuplicateResponse(n)
            | AbortReason::UnknownRelay(n)
            | AbortReason::Malformed(n)
            | AbortReason::ChainMismatch(n)
            | AbortReason::CountMismatch(n)
            | AbortReason::VoteDisagreement(n)
            | AbortReason::VerificationFailed(n, _)
            | AbortReason::AddRejected(n) => vec![n.clone()],
            AbortReason::Superseded | AbortReason::NoUpdate => Vec::new(),
        }
    }
}

impl fmt::Display for AbortReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AbortReason::Timeout { phase, missing } => {
                write!(f, "timeout:{phase}")?;
                if !missing.is_empty() {
                    let names: Vec<&str> = missing.iter().map(NodeId::as_str).collect();
                    write!(f, ":{}", names.join("+"))?;
                }
                Ok(())
            }
            AbortReason::DuplicateResponse(n) => write!(f, "duplicate-response:{n}"),
            AbortReason::UnknownRelay(n) => write!(f, "unknown-relay:{n}"),
            AbortReason::Malformed(n) => write!(f, "malformed:{n}"),
            AbortReason::ChainMismatch(n) => write!(f, "chain-mismatch:{n}"),
            AbortReason::CountMismatch(n) => write!(f, "count-mismatch:{n}"),
            AbortReason::VoteDisagreement(n) => write!(f, "vote-disagreement:{n}"),
            AbortReason::VerificationFailed(n, k) => write!(f, "verification-failed:{n}:{k}"),
            AbortReason::AddRejected(n) => write!(f, "add-rejected:{n}"),
            AbortReason::Superseded => f.write_str("superseded"),
            AbortReason::NoUpdate => f.write_str("no-update"),
        }
    }
}

impl FromStr for AbortReason {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut parts = s.split(':');
        let tag = parts.next().unwrap_or_default();
        let mut node = || -> Result<NodeId, String> {
            let raw = parts.next().ok_or_else(|| format!("`{s}` lacks a node"))?;
            NodeId::new(raw).map_err(|e| e.to_string())
        };
        let reason = match tag {
            "duplicate-response" => AbortReason::DuplicateResponse(node()?),
            "unknown-relay" => AbortReason::UnknownRelay(node()?),
            "malformed" => AbortReason::Malformed(node()?),
            "chain-mismatch" => AbortReason::ChainMismatch(node()?),
            "count-mismatch" => AbortReason::CountMismatch(node()?),
            "vote-disagreement" => AbortReason::VoteDisagreement(node()?),
            "add-rejected" => AbortReason::AddRejected(node()?),
            "superseded" => AbortReason::Superseded,
            "no-update" => AbortReason::NoUpdate,
            "verification-failed" => {
                let n = node()?;
                let kind = parts.next().ok_or_else(|| format!("`{s}` lacks a fault"))?;
                AbortReason::VerificationFailed(n, kind.parse()?)
            }
            "timeout" => {
                let phase = parts
                    .next()
                    .ok_or_else(|| format!("`{s}` lacks a phase"))?
                    .parse()?;
                let missing = match parts.next() {
                    None => Vec::new(),
                    Some(list) => list
                        .split('+')
                        .map(|n| NodeId::new(n).map_err(|e| e.to_string()))
                        .collect::<Result<_, _>>()?,
                };
                AbortReason::Timeout { phase, missing }
            }
            other => return Err(format!("unknown abort reason `{other}`")),
        };
        if parts.next().is_some() {
            return Err(format!("trailing data in `{s}`"));
        }
        Ok(reason)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum CycleOutcome {
    Committed,
    Aborted(AbortReason),
}

impl CycleOutcome {
    pub fn is_committed(&self) -> bool {
        matches!(self, CycleOutcome::Committed)
    }
}

impl fmt::Display for CycleOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CycleOutcome::Committed => f.write_str("committed"),
            CycleOutcome::Aborted(r) => write!(f, "aborted:{r}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CipherError {
    #[error("ciphertext rejected: {0}")]
    Rejected(String),
}

/// Byte transform applied to the aggregated payload before it leaves the
/// aggregator.
pub trait Cipher: Send + Sync {
    fn seal(&self, plain: &[u8]) -> Vec<u8>;
    fn open(&self, sealed: &[u8]) -> Result<Vec<u8>, CipherError>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityCipher;

impl Cipher for IdentityCipher {
    fn seal(&self, plain: &[u8]) -> Vec<u8> {
        plain.to_vec()
    }

    fn open(&self, sealed: &[u8]) -> Result<Vec<u8>, CipherError> {
        Ok(sealed.to_vec())
    }
}

/// Source of a relay's readings.
pub trait Telemetry: Send {
    fn sample(&mut self, node: &NodeId, cycle: u64) -> MeasurementSet;
}

/// Always reports the same set, relabeled to the requested cycle.
#[derive(Debug, Clone)]
pub struct FixedTelemetry(pub MeasurementSet);

impl Telemetry for FixedTelemetry {
    fn sample(&mut self, node: &NodeId, cycle: u64) -> MeasurementSet {
        let mut set = self.0.clone();
        set.relabel(node.clone());
        set.set_cycle(cycle);
        set
    }
}

impl<F> Telemetry for F
where
    F: FnMut(&NodeId, u64) -> MeasurementSet + Send,
{
    fn sample(&mut self, node: &NodeId, cycle: u64) -> MeasurementSet {
        self(node, cycle)
    }
}

/// How count shares reach the other eligible relays.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ShareRoute {
    /// Each relay sends its share to every peer and to the aggregator.
    #[default]
    Direct,
    /// Relays send only to the aggregator, which forwards to the others.
    ViaAggregator,
}

/// Settings every node of a topology must agree on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProtocolConfig {
    pub hash_mode: HashMode,
    pub challenge_lo: u64,
    pub challenge_hi: u64,
    /// Eligible relays per cycle; `None` means all.
    pub k_eligible: Option<usize>,
    pub tie_pool: TiePool,
    pub share_route: ShareRoute,
    pub phase_timeout: Tick,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            hash_mode: HashMode::Single,
            challenge_lo: 0,
            challenge_hi: 9,
            k_eligible: None,
            tie_pool: TiePool::Tied,
            share_route: ShareRoute::Direct,
            phase_timeout: DEFAULT_PHASE_TIMEOUT,
        }
    }
}

/// Digest over the challenge and the shares a tally was built from, so votes
/// can be compared on their inputs and not just on the winner.
pub fn tally_fingerprint<'a>(
    challenge: &RandomChallenge,
    shares: impl IntoIterator<Item = &'a CountReport>,
) -> String {
    let mut lines: Vec<String> = shares
        .into_iter()
        .map(|r| format!("{},{},{}", r.node, r.digest, r.count))
        .collect();
    lines.sort();
    sha256_hex(format!("{}|{}", challenge.rendered(), lines.join(";")).as_bytes())
}

/// Timer tokens carry the cycle and the phase they guard.
fn timer_token(cycle: u64, phase: Phase) -> u64 {
    cycle * 16 + phase.ordinal()
}

fn split_token(token: u64) -> (u64, Option<Phase>) {
    (token / 16, Phase::from_ordinal(token % 16))
}

fn send(ctx: &mut Context, to: &NodeId, msg: &ProtocolMessage) {
    ctx.send(to.clone(), msg.to_message());
}

/// Kind and cycle read from the text header without a full parse.
fn label(msg: &Message) -> Label {
    let text = String::from_utf8_lossy(&msg.body);
    let mut parts = text.splitn(4, '|');
    let kind = parts.next().unwrap_or_default().to_string();
    let cycle = parts.nth(1).and_then(|c| c.parse().ok());
    Label { kind, cycle }
}

/// Any of the three roles, so a whole topology fits one simulation.
#[allow(clippy::large_enum_variant)]
pub enum Peer {
    Relay(Relay),
    Aggregator(Aggregator),
    ControlCenter(ControlCenter),
}

impl Peer {
    pub fn role(&self) -> NodeRole {
        match self {
            Peer::Relay(_) => NodeRole::Relay,
            Peer::Aggregator(_) => NodeRole::Aggregator,
            Peer::ControlCenter(_) => NodeRole::ControlCenter,
        }
    }

    pub fn as_relay(&self) -> Option<&Relay> {
        match self {
            Peer::Relay(r) => Some(r),
            _ => None,
        }
    }

    pub fn as_relay_mut(&mut self) -> Option<&mut Relay> {
        match self {
            Peer::Relay(r) => Some(r),
            _ => None,
        }
    }

    pub fn as_aggregator(&self) -> Option<&Aggregator> {
        match self {
            Peer::Aggregator(a) => Some(a),
            _ => None,
        }
    }

    pub fn as_control_center(&self) -> Option<&ControlCenter> {
        match self {
            Peer::ControlCenter(c) => Some(c),
            _ => None,
        }
    }

    fn inner(&self) -> &dyn Node {
        match self {
            Peer::Relay(r) => r,
            Peer::Aggregator(a) => a,
            Peer::ControlCenter(c) => c,
        }
    }

    fn inner_mut(&mut self) -> &mut dyn Node {
        match self {
            Peer::Relay(r) => r,
            Peer::Aggregator(a) => a,
            Peer::ControlCenter(c) => c,
        }
    }
}

impl Node for Peer {
    fn id(&self) -> &NodeId {
        self.inner().id()
    }

    fn on_start(&mut self, ctx: &mut Context) {
        self.inner_mut().on_start(ctx)
    }

    fn on_message(&mut self, ctx: &mut Context, from: &NodeId, msg: Message) {
        self.inner_mut().on_message(ctx, from, msg)
    }

    fn on_timer(&mut self, ctx: &mut Context, token: u64) {
        self.inner_mut().on_timer(ctx, token)
    }

    fn describe(&self, msg: &Message) -> Label {
        label(msg)
    }

    fn is_done(&self) -> bool {
        self.inner().is_done()
    }
}

/// Builds a full topology: `CC`, `DA` and the given relays.
pub fn topology(relays: Vec<Relay>, aggregator: Aggregator, control: ControlCenter) -> Vec<Peer> {
    let mut peers = vec![Peer::ControlCenter(control), Peer::Aggregator(aggregator)];
    peers.extend(relays.into_iter().map(Peer::Relay));
    peers
}

/// Shared handle for the cipher used by the aggregator and miners.
pub type SharedCipher = Arc<dyn Cipher>;

pub fn identity_cipher() -> SharedCipher {
    Arc::new(IdentityCipher)
}
