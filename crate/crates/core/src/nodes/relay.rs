use std::collections::BTreeMap;

use super::message::{Body, ProtocolMessage, VoteChoice};
use super::{
    aggregator_id, identity_cipher, label, send, tally_fingerprint, ProtocolConfig, ShareRoute,
    SharedCipher, Telemetry, VerifyFault,
};
use crate::consensus::{
    build_tally_with, count_occurrences, CountReport, Decision, NodeId, RandomChallenge,
};
use crate::dnp3m::Message;
use crate::harness::{Context, Label, Node};
use crate::ledger::{
    block_hash, check_successor, decode_payload, sha256_hex, Block, Chain, MeasurementSet, Value,
};

/// Fault injected into a relay, for testing the protocol's defenses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Behavior {
    #[default]
    Honest,
    /// Reports one more occurrence than its digest holds.
    InflateCount,
    /// Reports a digest of data it never sent, with a matching count.
    ForeignDigest,
    /// Votes for itself whatever the tally says.
    VoteForSelf,
    /// As miner, alters a payload value after building the block.
    TamperBlock,
    /// As miner, builds on a made-up parent.
    ForgeBlock,
}

#[derive(Debug, Default)]
struct Round {
    cycle: u64,
    data: Option<MeasurementSet>,
    challenge: Option<RandomChallenge>,
    eligible: Vec<NodeId>,
    shares: BTreeMap<NodeId, CountReport>,
    suspicious: bool,
    voted: bool,
    pending: Option<Block>,
}

pub struct Relay {
    id: NodeId,
    aggregator: NodeId,
    config: ProtocolConfig,
    chain: Chain,
    telemetry: Box<dyn Telemetry>,
    cipher: SharedCipher,
    behavior: Behavior,
    round: Round,
}

impl Relay {
    pub fn new(id: NodeId, config: ProtocolConfig, telemetry: Box<dyn Telemetry>) -> Self {
        Self {
            id,
            aggregator: aggregator_id(),
            chain: Chain::new(config.hash_mode),
            config,
            telemetry,
            cipher: identity_cipher(),
            behavior: Behavior::Honest,
            round: Round::default(),
        }
    }

    pub fn with_behavior(mut self, behavior: Behavior) -> Self {
        self.behavior = behavior;
        self
    }

    pub fn with_cipher(mut self, cipher: SharedCipher) -> Self {
        self.cipher = cipher;
        self
    }

    pub fn with_chain(mut self, chain: Chain) -> Self {
        self.chain = chain;
        self
    }

    pub fn behavior(&self) -> Behavior {
        self.behavior
    }

    pub fn chain(&self) -> &Chain {
        &self.chain
    }

    pub fn chain_mut(&mut self) -> &mut Chain {
        &mut self.chain
    }

    fn reply(&self, ctx: &mut Context, body: Body) {
        let msg = ProtocolMessage::new(self.id.clone(), self.round.cycle, body);
        send(ctx, &self.aggregator, &msg);
    }

    fn handle(&mut self, ctx: &mut Context, from: &NodeId, msg: ProtocolMessage) {
        if msg.cycle < self.round.cycle {
            ctx.note(
                "stale",
                Some(msg.cycle),
                format!("{} from {from}", msg.kind()),
            );
            return;
        }
        if msg.cycle > self.round.cycle {
            self.round = Round {
                cycle: msg.cycle,
                ..Round::default()
            };
        }
        match msg.body {
            Body::DataRequest { .. } => {
                let set = self.telemetry.sample(&self.id, msg.cycle);
                self.round.data = Some(set.clone());
                self.reply(ctx, Body::DataResponse { set });
            }
            Body::ChainCheck { tip, length } => {
                let matches =
                    self.chain.tip().current_hash == tip && self.chain.len() as u64 == length;
                self.reply(ctx, Body::ChainCheckReply { matches });
            }
            Body::Challenge { value, eligible } => self.on_challenge(ctx, value, eligible),
            Body::CountShare {
                node,
                digest,
                count,
            } => {
                let report = CountReport {
                    node,
                    digest,
                    count,
                };
                if self.round.shares.contains_key(&report.node) {
                    self.round.suspicious = true;
                } else {
                    self.round.shares.insert(report.node.clone(), report);
                }
                self.maybe_vote(ctx);
            }
            Body::MiningAssign {
                miner,
                stamp,
                payload,
            } if miner == self.id => self.mine(ctx, stamp, &payload),
            Body::VerifyRequest { block } => {
                let faults = check_successor(self.chain.tip(), &block, self.chain.hash_mode);
                let verdict = match faults.first() {
                    None => {
                        self.round.pending = Some(block);
                        Ok(())
                    }
                    Some(kind) => Err(VerifyFault::Violation(*kind)),
                };
                self.reply(ctx, Body::VerifyReply { verdict });
            }
            Body::AddBlock { hash } => {
                let ok = match self.round.pending.take() {
                    Some(block) if block.current_hash == hash => self.chain.append(block).is_ok(),
                    _ => false,
                };
                self.reply(ctx, Body::AddAck { ok });
            }
            other => {
                ctx.note(
                    "ignored",
                    Some(msg.cycle),
                    format!("{} from {from}", other.kind()),
                );
            }
        }
    }

    fn on_challenge(&mut self, ctx: &mut Context, value: u64, eligible: Vec<NodeId>) {
        let challenge = RandomChallenge::new(value);
        self.round.challenge = Some(challenge.clone());
        self.round.eligible = eligible;
        if !self.round.eligible.contains(&self.id) {
            return;
        }
        let Some(data) = &self.round.data else {
            ctx.note("no-data", Some(self.round.cycle), "challenge before data");
            return;
        };
        let mut share = CountReport::compute(data, &challenge);
        match self.behavior {
            Behavior::InflateCount => share.count += 1,
            Behavior::ForeignDigest => {
                share.digest = sha256_hex(format!("forged:{}", data.canonical()).as_bytes());
                share.count = count_occurrences(&share.digest, &challenge).unwrap_or(0);
            }
            _ => {}
        }
        let body = Body::CountShare {
            node: share.node.clone(),
            digest: share.digest.clone(),
            count: share.count,
        };
        let msg = ProtocolMessage::new(self.id.clone(), self.round.cycle, body);
        if self.config.share_route == ShareRoute::Direct {
            for peer in self.round.eligible.iter().filter(|p| **p != self.id) {
                send(ctx, peer, &msg);
            }
        }
        send(ctx, &self.aggregator, &msg);
        self.round.shares.insert(self.id.clone(), share);
        self.maybe_vote(ctx);
    }

    /// Votes once the challenge is known and every eligible share is in.
    fn maybe_vote(&mut self, ctx: &mut Context) {
        let round = &mut self.round;
        let Some(challenge) = &round.challenge else {
            return;
        };
        if round.voted
            || !round.eligible.contains(&self.id)
            || round.eligible.iter().any(|n| !round.shares.contains_key(n))
        {
            return;
        }
        round.voted = true;
        let consistent = !round.suspicious
            && round.shares.len() == round.eligible.len()
            && round
                .shares
                .values()
                .all(|s| count_occurrences(&s.digest, challenge).ok() == Some(s.count));
        let fingerprint = tally_fingerprint(challenge, round.shares.values());
        let shares: Vec<CountReport> = round.shares.values().cloned().collect();
        let choice = if !consistent {
            VoteChoice::Reject
        } else if self.behavior == Behavior::VoteForSelf {
            VoteChoice::Node(self.id.clone())
        } else {
            match build_tally_with(&shares, self.config.tie_pool).map(|t| t.decision) {
                Ok(Decision::Unique(n)) => VoteChoice::Node(n),
                Ok(Decision::RandomAmong(_)) => VoteChoice::Random,
                _ => VoteChoice::Reject,
            }
        };
        self.reply(
            ctx,
            Body::Vote {
                choice,
                tally: fingerprint,
            },
        );
    }

    fn mine(&mut self, ctx: &mut Context, stamp: u64, sealed: &[u8]) {
        let cycle = self.round.cycle;
        let sets = match self
            .cipher
            .open(sealed)
            .map_err(|e| e.to_string())
            .and_then(|p| decode_payload(&p).map_err(|e| e.to_string()))
        {
            Ok(sets) => sets,
            Err(e) => {
                ctx.note("mine-failed", Some(cycle), e);
                return;
            }
        };
        let mut block = match self.chain.next_block(sets, stamp) {
            Ok(b) => b,
            Err(e) => {
                ctx.note("mine-failed", Some(cycle), e.to_string());
                return;
            }
        };
        match self.behavior {
            Behavior::TamperBlock => {
                if let Some(v) = block.payload.iter_mut().flat_map(|s| s.values_mut()).next() {
                    *v = Value::from_micros(v.micros() + 1);
                }
            }
            Behavior::ForgeBlock => {
                block.header.previous_hash = sha256_hex(b"forged parent");
                block.current_hash = block_hash(&block.header, self.chain.hash_mode);
            }
            _ => {}
        }
        self.round.pending = Some(block.clone());
        self.reply(ctx, Body::NewBlock { block });
    }
}

impl Node for Relay {
    fn id(&self) -> &NodeId {
        &self.id
    }

    fn on_start(&mut self, _ctx: &mut Context) {}

    fn on_message(&mut self, ctx: &mut Context, from: &NodeId, msg: Message) {
        match ProtocolMessage::from_message(&msg) {
            Ok(parsed) => self.handle(ctx, from, parsed),
            Err(e) => ctx.note("malformed", None, format!("from {from}: {e}")),
        }
    }

    fn on_timer(&mut self, _ctx: &mut Context, _token: u64) {}

    fn describe(&self, msg: &Message) -> Label {
        label(msg)
    }
}
