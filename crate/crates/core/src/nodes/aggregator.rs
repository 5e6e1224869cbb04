use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use super::message::{Body, ProtocolMessage, VoteChoice};
use super::{
    control_center_id, identity_cipher, label, send, split_token, tally_fingerprint, timer_token,
    AbortReason, CycleOutcome, Phase, ProtocolConfig, ShareRoute, SharedCipher, VerifyFault,
};
use crate::consensus::{
    build_tally_with, choose_eligible, generate_challenge, resolve, verify_report, ConsensusError,
    CountReport, Decision, EligibilityConfig, NodeId, RandomChallenge, SeededRng, SelectionTally,
};
use crate::dnp3m::Message;
use crate::harness::{Context, Label, Node, Tick};
use crate::ledger::{check_successor, encode_payload, Block, Chain, MeasurementSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("illegal phase transition {from} -> {to}")]
pub struct IllegalTransition {
    pub from: Phase,
    pub to: Phase,
}

/// The aggregator's view of the cycle in progress.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CycleState {
    pub phase: Phase,
    pub cycle: u64,
    /// Block timestamp handed down by the control center.
    pub stamp: u64,
    pub collected: BTreeMap<NodeId, MeasurementSet>,
    pub checked: BTreeSet<NodeId>,
    pub eligible: Vec<NodeId>,
    pub challenge: Option<RandomChallenge>,
    pub shares: BTreeMap<NodeId, CountReport>,
    pub votes: BTreeMap<NodeId, (VoteChoice, String)>,
    pub tally: Option<SelectionTally>,
    pub miner: Option<NodeId>,
    pub pending_block: Option<Block>,
    pub verified: BTreeSet<NodeId>,
    pub acked: BTreeSet<NodeId>,
    pub outcome: Option<CycleOutcome>,
}

impl CycleState {
    /// Moves to `to` if the phase order allows it.
    pub fn advance(&mut self, to: Phase) -> Result<(), IllegalTransition> {
        if self.phase.can_transition(to) {
            self.phase = to;
            Ok(())
        } else {
            Err(IllegalTransition {
                from: self.phase,
                to,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PhaseEntry {
    pub cycle: u64,
    pub phase: Phase,
    pub at: Tick,
}

pub struct Aggregator {
    id: NodeId,
    control: NodeId,
    relays: Vec<NodeId>,
    config: ProtocolConfig,
    eligibility: EligibilityConfig,
    chain: Chain,
    cipher: SharedCipher,
    rng: SeededRng,
    state: CycleState,
    log: Vec<PhaseEntry>,
    history: Vec<(u64, CycleOutcome)>,
}

impl Aggregator {
    pub fn new(
        id: NodeId,
        mut relays: Vec<NodeId>,
        config: ProtocolConfig,
        rng: SeededRng,
    ) -> Result<Self, ConsensusError> {
        relays.sort();
        relays.dedup();
        if relays.len() < 2 {
            return Err(ConsensusError::BadConfig(format!(
                "need at least 2 relays, got {}",
                relays.len()
            )));
        }
        let n = relays.len();
        let eligibility = EligibilityConfig::new(config.k_eligible.unwrap_or(n), n)?;
        if config.challenge_lo > config.challenge_hi {
            return Err(ConsensusError::BadRange {
                lo: config.challenge_lo,
                hi: config.challenge_hi,
            });
        }
        Ok(Self {
            id,
            control: control_center_id(),
            relays,
            eligibility,
            chain: Chain::new(config.hash_mode),
            config,
            cipher: identity_cipher(),
            rng,
            state: CycleState::default(),
            log: Vec::new(),
            history: Vec::new(),
        })
    }

    pub fn with_cipher(mut self, cipher: SharedCipher) -> Self {
        self.cipher = cipher;
        self
    }

    pub fn with_chain(mut self, chain: Chain) -> Self {
        self.chain = chain;
        self
    }

    pub fn chain(&self) -> &Chain {
        &self.chain
    }

    pub fn chain_mut(&mut self) -> &mut Chain {
        &mut self.chain
    }

    pub fn relays(&self) -> &[NodeId] {
        &self.relays
    }

    pub fn state(&self) -> &CycleState {
        &self.state
    }

    /// Every phase entered, with the tick it was entered at.
    pub fn phase_log(&self) -> &[PhaseEntry] {
        &self.log
    }

    pub fn history(&self) -> &[(u64, CycleOutcome)] {
        &self.history
    }

    fn enter(&mut self, ctx: &mut Context, to: Phase) {
        self.state
            .advance(to)
            .expect("aggregator only requests declared transitions");
        self.log.push(PhaseEntry {
            cycle: self.state.cycle,
            phase: to,
            at: ctx.now(),
        });
        ctx.note("phase", Some(self.state.cycle), to.as_str());
        if to.is_active() {
            ctx.set_timer(self.config.phase_timeout, timer_token(self.state.cycle, to));
        }
    }

    fn message(&self, body: Body) -> ProtocolMessage {
        ProtocolMessage::new(self.id.clone(), self.state.cycle, body)
    }

    fn broadcast<'a>(
        &self,
        ctx: &mut Context,
        to: impl IntoIterator<Item = &'a NodeId>,
        body: Body,
    ) {
        let msg = self.message(body);
        for node in to {
            send(ctx, node, &msg);
        }
    }

    fn abort(&mut self, ctx: &mut Context, reason: AbortReason) {
        ctx.note("abort", Some(self.state.cycle), reason.to_string());
        self.enter(ctx, Phase::Aborted);
        let outcome = CycleOutcome::Aborted(reason);
        self.finish(ctx, outcome, None, None);
    }

    fn finish(
        &mut self,
        ctx: &mut Context,
        outcome: CycleOutcome,
        miner: Option<NodeId>,
        block: Option<Block>,
    ) {
        self.state.outcome = Some(outcome.clone());
        self.history.push((self.state.cycle, outcome.clone()));
        let update = self.message(Body::ChainUpdate {
            outcome,
            length: self.chain.len() as u64,
            tip: self.chain.tip().current_hash.clone(),
            miner,
            block,
        });
        send(ctx, &self.control, &update);
    }

    fn start_cycle(&mut self, ctx: &mut Context, cycle: u64, stamp: u64) {
        if self.state.phase.is_active() {
            self.abort(ctx, AbortReason::Superseded);
        }
        let phase = self.state.phase;
        self.state = CycleState {
            phase,
            cycle,
            stamp,
            ..CycleState::default()
        };
        self.enter(ctx, Phase::Acquiring);
        let relays = self.relays.clone();
        self.broadcast(ctx, &relays, Body::DataRequest { stamp });
    }

    fn missing(&self) -> Vec<NodeId> {
        let s = &self.state;
        let absent = |pool: &[NodeId], have: &dyn Fn(&NodeId) -> bool| -> Vec<NodeId> {
            pool.iter().filter(|n| !have(n)).cloned().collect()
        };
        match s.phase {
            Phase::Acquiring => absent(&self.relays, &|n| s.collected.contains_key(n)),
            Phase::ChainChecking => absent(&self.relays, &|n| s.checked.contains(n)),
            Phase::Selecting => absent(&s.eligible, &|n| {
                s.shares.contains_key(n) && s.votes.contains_key(n)
            }),
            Phase::Mining => s.miner.iter().cloned().collect(),
            Phase::Verifying => absent(&self.relays, &|n| {
                s.verified.contains(n) || s.miner.as_ref() == Some(n)
            }),
            Phase::Adding => absent(&self.relays, &|n| s.acked.contains(n)),
            _ => Vec::new(),
        }
    }

    fn handle_relay(&mut self, ctx: &mut Context, from: &NodeId, msg: ProtocolMessage) {
        let phase = self.state.phase;
        match (phase, msg.body) {
            (Phase::Acquiring, Body::DataResponse { set }) => {
                if self.state.collected.contains_key(from) {
                    return self.abort(ctx, AbortReason::DuplicateResponse(from.clone()));
                }
                if set.node() != from || set.cycle() != self.state.cycle {
                    return self.abort(ctx, AbortReason::Malformed(from.clone()));
                }
                self.state.collected.insert(from.clone(), set);
                if self.state.collected.len() == self.relays.len() {
                    self.enter(ctx, Phase::ChainChecking);
                    let body = Body::ChainCheck {
                        tip: self.chain.tip().current_hash.clone(),
                        length: self.chain.len() as u64,
                    };
                    let relays = self.relays.clone();
                    self.broadcast(ctx, &relays, body);
                }
            }
            (Phase::ChainChecking, Body::ChainCheckReply { matches }) => {
                if !self.state.checked.insert(from.clone()) {
                    return self.abort(ctx, AbortReason::DuplicateResponse(from.clone()));
                }
                if !matches {
                    return self.abort(ctx, AbortReason::ChainMismatch(from.clone()));
                }
                if self.state.checked.len() == self.relays.len() {
                    self.start_selection(ctx);
                }
            }
            (
                Phase::Selecting,
                Body::CountShare {
                    node,
                    digest,
                    count,
                },
            ) => {
                if !self.state.eligible.contains(from) || node != *from {
                    return self.abort(ctx, AbortReason::Malformed(from.clone()));
                }
                if self.state.shares.contains_key(from) {
                    return self.abort(ctx, AbortReason::DuplicateResponse(from.clone()));
                }
                let report = CountReport {
                    node,
                    digest,
                    count,
                };
                let challenge = self.state.challenge.as_ref().expect("set on entry");
                if !verify_report(&report, &self.state.collected[from], challenge) {
                    return self.abort(ctx, AbortReason::CountMismatch(from.clone()));
                }
                if self.config.share_route == ShareRoute::ViaAggregator {
                    let forward = ProtocolMessage::new(
                        from.clone(),
                        self.state.cycle,
                        Body::CountShare {
                            node: report.node.clone(),
                            digest: report.digest.clone(),
                            count: report.count,
                        },
                    );
                    for peer in self.state.eligible.iter().filter(|p| *p != from) {
                        send(ctx, peer, &forward);
                    }
                }
                self.state.shares.insert(from.clone(), report);
                self.conclude_selection(ctx);
            }
            (Phase::Selecting, Body::Vote { choice, tally }) => {
                if !self.state.eligible.contains(from) {
                    return self.abort(ctx, AbortReason::Malformed(from.clone()));
                }
                if self.state.votes.contains_key(from) {
                    return self.abort(ctx, AbortReason::DuplicateResponse(from.clone()));
                }
                self.state.votes.insert(from.clone(), (choice, tally));
                self.conclude_selection(ctx);
            }
            (Phase::Mining, Body::NewBlock { block }) => {
                if self.state.miner.as_ref() != Some(from) {
                    return self.abort(ctx, AbortReason::Malformed(from.clone()));
                }
                self.state.pending_block = Some(block.clone());
                self.enter(ctx, Phase::Verifying);
                let others: Vec<NodeId> =
                    self.relays.iter().filter(|r| *r != from).cloned().collect();
                self.broadcast(ctx, &others, Body::VerifyRequest { block });
            }
            (Phase::Verifying, Body::VerifyReply { verdict }) => {
                if self.state.miner.as_ref() == Some(from) {
                    return self.abort(ctx, AbortReason::Malformed(from.clone()));
                }
                if !self.state.verified.insert(from.clone()) {
                    return self.abort(ctx, AbortReason::DuplicateResponse(from.clone()));
                }
                if let Err(fault) = verdict {
                    return self.abort(ctx, AbortReason::VerificationFailed(from.clone(), fault));
                }
                if self.state.verified.len() + 1 == self.relays.len() {
                    self.conclude_verification(ctx);
                }
            }
            (Phase::Adding, Body::AddAck { ok }) => {
                if !self.state.acked.insert(from.clone()) {
                    return self.abort(ctx, AbortReason::DuplicateResponse(from.clone()));
                }
                if !ok {
                    return self.abort(ctx, AbortReason::AddRejected(from.clone()));
                }
                if self.state.acked.len() == self.relays.len() {
                    self.commit(ctx);
                }
            }
            (_, body) => {
                ctx.note(
                    "ignored",
                    Some(msg.cycle),
                    format!("{} from {from} in {phase}", body.kind()),
                );
            }
        }
    }

    fn start_selection(&mut self, ctx: &mut Context) {
        self.enter(ctx, Phase::Selecting);
        let eligible = choose_eligible(self.eligibility, &self.relays, &mut self.rng)
            .expect("eligibility validated at construction");
        let challenge = generate_challenge(
            &mut self.rng,
            self.config.challenge_lo,
            self.config.challenge_hi,
        )
        .expect("range validated at construction");
        let body = Body::Challenge {
            value: challenge.value(),
            eligible: eligible.clone(),
        };
        self.broadcast(ctx, &eligible, body);
        self.state.eligible = eligible;
        self.state.challenge = Some(challenge);
    }

    fn conclude_selection(&mut self, ctx: &mut Context) {
        let k = self.state.eligible.len();
        if self.state.shares.len() < k || self.state.votes.len() < k {
            return;
        }
        let shares: Vec<CountReport> = self.state.shares.values().cloned().collect();
        let tally = build_tally_with(&shares, self.config.tie_pool).expect("k >= 1 shares");
        let challenge = self.state.challenge.as_ref().expect("set on entry");
        let fingerprint = tally_fingerprint(challenge, &shares);
        let expected = match &tally.decision {
            Decision::Unique(n) => VoteChoice::Node(n.clone()),
            _ => VoteChoice::Random,
        };
        let dissent = self
            .state
            .votes
            .iter()
            .find(|(_, (choice, fp))| *choice != expected || *fp != fingerprint)
            .map(|(n, _)| n.clone());
        if let Some(voter) = dissent {
            let mut tally = tally;
            tally.abort();
            self.state.tally = Some(tally);
            return self.abort(ctx, AbortReason::VoteDisagreement(voter));
        }
        let miner = resolve(&tally, &mut self.rng).expect("tally has candidates");
        self.state.tally = Some(tally);
        self.state.miner = Some(miner.clone());
        self.enter(ctx, Phase::Mining);
        let sets: Vec<MeasurementSet> = self.state.collected.values().cloned().collect();
        let payload = self.cipher.seal(&encode_payload(&sets));
        let body = Body::MiningAssign {
            miner: miner.clone(),
            stamp: self.state.stamp,
            payload,
        };
        self.broadcast(ctx, [&miner], body);
    }

    fn conclude_verification(&mut self, ctx: &mut Context) {
        let block = self.state.pending_block.clone().expect("set in mining");
        let faults = check_successor(self.chain.tip(), &block, self.chain.hash_mode);
        let fault = if let Some(kind) = faults.first() {
            Some(VerifyFault::Violation(*kind))
        } else if !block.payload.iter().eq(self.state.collected.values()) {
            Some(VerifyFault::PayloadMismatch)
        } else {
            None
        };
        if let Some(fault) = fault {
            return self.abort(ctx, AbortReason::VerificationFailed(self.id.clone(), fault));
        }
        self.enter(ctx, Phase::Adding);
        let relays = self.relays.clone();
        self.broadcast(
            ctx,
            &relays,
            Body::AddBlock {
                hash: block.current_hash,
            },
        );
    }

    fn commit(&mut self, ctx: &mut Context) {
        let block = self.state.pending_block.clone().expect("set in mining");
        if self.chain.append(block.clone()).is_err() {
            return self.abort(
                ctx,
                AbortReason::VerificationFailed(
                    self.id.clone(),
                    VerifyFault::Violation(crate::ledger::ViolationKind::BadLink),
                ),
            );
        }
        self.enter(ctx, Phase::Done);
        let miner = self.state.miner.clone();
        self.finish(ctx, CycleOutcome::Committed, miner, Some(block));
    }
}

impl Node for Aggregator {
    fn id(&self) -> &NodeId {
        &self.id
    }

    fn on_start(&mut self, _ctx: &mut Context) {}

    fn on_message(&mut self, ctx: &mut Context, from: &NodeId, msg: Message) {
        let parsed = match ProtocolMessage::from_message(&msg) {
            Ok(p) => p,
            Err(e) => {
                ctx.note("malformed", None, format!("from {from}: {e}"));
                if self.state.phase.is_active() && self.relays.contains(from) {
                    self.abort(ctx, AbortReason::Malformed(from.clone()));
                }
                return;
            }
        };
        if *from == self.control {
            if let Body::DataRequest { stamp } = parsed.body {
                if parsed.cycle > self.state.cycle {
                    self.start_cycle(ctx, parsed.cycle, stamp);
                } else {
                    ctx.note("stale", Some(parsed.cycle), "DataRequest");
                }
            }
            return;
        }
        if parsed.cycle != self.state.cycle || !self.state.phase.is_active() {
            ctx.note(
                "late",
                Some(parsed.cycle),
                format!("{} from {from}", parsed.kind()),
            );
            return;
        }
        if !self.relays.contains(from) {
            return self.abort(ctx, AbortReason::UnknownRelay(from.clone()));
        }
        if parsed.sender != *from {
            return self.abort(ctx, AbortReason::Malformed(from.clone()));
        }
        self.handle_relay(ctx, from, parsed);
    }

    fn on_timer(&mut self, ctx: &mut Context, token: u64) {
        let (cycle, phase) = split_token(token);
        if cycle == self.state.cycle
            && phase == Some(self.state.phase)
            && self.state.phase.is_active()
        {
            let missing = self.missing();
            self.abort(
                ctx,
                AbortReason::Timeout {
                    phase: self.state.phase,
                    missing,
                },
            );
        }
    }

    fn describe(&self, msg: &Message) -> Label {
        label(msg)
    }

    fn is_done(&self) -> bool {
        !self.state.phase.is_active()
    }
}
