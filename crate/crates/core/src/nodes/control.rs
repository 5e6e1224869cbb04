use super::message::{Body, ProtocolMessage};
use super::{aggregator_id, label, send, AbortReason, CycleOutcome, DEFAULT_PERIOD};
use crate::consensus::NodeId;
use crate::dnp3m::Message;
use crate::harness::{Context, Label, Node, Tick};
use crate::ledger::{Chain, HashMode};

/// When the next cycle starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pacing {
    /// One cycle every `period` ticks.
    Periodic(Tick),
    /// As soon as the previous cycle is settled.
    BackToBack,
}

/// Where block timestamps come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StampMode {
    /// `(cycle - 1) * period`, independent of the transport's clock.
    #[default]
    Scheduled,
    /// The node's clock at cycle start.
    Clock,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CycleRecord {
    pub cycle: u64,
    pub started: Tick,
    pub ended: Option<Tick>,
    pub outcome: Option<CycleOutcome>,
    pub miner: Option<NodeId>,
}

const START: u64 = 0;
const AWAIT: u64 = 1;

pub struct ControlCenter {
    id: NodeId,
    aggregator: NodeId,
    cycles: u64,
    pacing: Pacing,
    period: Tick,
    stamp_mode: StampMode,
    await_timeout: Tick,
    chain: Chain,
    records: Vec<CycleRecord>,
    in_flight: bool,
}

impl ControlCenter {
    pub fn new(id: NodeId, cycles: u64, hash_mode: HashMode) -> Self {
        Self {
            id,
            aggregator: aggregator_id(),
            cycles,
            pacing: Pacing::Periodic(DEFAULT_PERIOD),
            period: DEFAULT_PERIOD,
            stamp_mode: StampMode::Scheduled,
            await_timeout: 6 * super::DEFAULT_PHASE_TIMEOUT,
            chain: Chain::new(hash_mode),
            records: Vec::new(),
            in_flight: false,
        }
    }

    /// Sets the nominal period; used for pacing when periodic and for
    /// scheduled stamps in either case.
    pub fn with_period(mut self, period: Tick) -> Self {
        self.period = period;
        if let Pacing::Periodic(_) = self.pacing {
            self.pacing = Pacing::Periodic(period);
        }
        self
    }

    pub fn back_to_back(mut self) -> Self {
        self.pacing = Pacing::BackToBack;
        self
    }

    pub fn with_stamp_mode(mut self, mode: StampMode) -> Self {
        self.stamp_mode = mode;
        self
    }

    pub fn with_await_timeout(mut self, ticks: Tick) -> Self {
        self.await_timeout = ticks;
        self
    }

    pub fn pacing(&self) -> Pacing {
        self.pacing
    }

    pub fn chain(&self) -> &Chain {
        &self.chain
    }

    pub fn records(&self) -> &[CycleRecord] {
        &self.records
    }

    fn next_cycle(&self) -> u64 {
        self.records.len() as u64 + 1
    }

    /// Starts the next cycle if one is due at `ctx.now()`.
    pub fn poll(&mut self, ctx: &mut Context) {
        let cycle = self.next_cycle();
        if cycle > self.cycles {
            return;
        }
        let due = match (self.pacing, self.records.last()) {
            (_, None) => true,
            (Pacing::Periodic(p), Some(last)) => ctx.now() >= last.started + p,
            (Pacing::BackToBack, Some(_)) => !self.in_flight,
        };
        if !due {
            if let (Pacing::Periodic(p), Some(last)) = (self.pacing, self.records.last()) {
                ctx.set_timer(last.started + p - ctx.now(), cycle * 2 + START);
            }
            return;
        }
        if self.in_flight {
            self.settle(ctx, CycleOutcome::Aborted(AbortReason::Superseded), None);
        }
        self.start(ctx, cycle);
    }

    fn start(&mut self, ctx: &mut Context, cycle: u64) {
        let stamp = match self.stamp_mode {
            StampMode::Scheduled => (cycle - 1) * self.period,
            StampMode::Clock => ctx.now(),
        };
        self.records.push(CycleRecord {
            cycle,
            started: ctx.now(),
            ended: None,
            outcome: None,
            miner: None,
        });
        self.in_flight = true;
        let msg = ProtocolMessage::new(self.id.clone(), cycle, Body::DataRequest { stamp });
        send(ctx, &self.aggregator, &msg);
        ctx.set_timer(self.await_timeout, cycle * 2 + AWAIT);
        if let Pacing::Periodic(p) = self.pacing {
            if cycle < self.cycles {
                ctx.set_timer(p, (cycle + 1) * 2 + START);
            }
        }
    }

    fn settle(&mut self, ctx: &mut Context, outcome: CycleOutcome, miner: Option<NodeId>) {
        let record = self.records.last_mut().expect("a cycle is in flight");
        record.ended = Some(ctx.now());
        ctx.note("cycle-end", Some(record.cycle), outcome.to_string());
        record.outcome = Some(outcome);
        record.miner = miner;
        self.in_flight = false;
    }

    fn on_update(&mut self, ctx: &mut Context, cycle: u64, body: Body) {
        let current = self.records.last().map(|r| r.cycle);
        if !self.in_flight || current != Some(cycle) {
            ctx.note("late", Some(cycle), "ChainUpdate");
            return;
        }
        let Body::ChainUpdate {
            outcome,
            tip,
            miner,
            block,
            ..
        } = body
        else {
            ctx.note("ignored", Some(cycle), body.kind().as_str());
            return;
        };
        if let (CycleOutcome::Committed, Some(block)) = (&outcome, block) {
            if let Err(faults) = self.chain.append(block) {
                ctx.note("replica-divergence", Some(cycle), format!("{faults:?}"));
            } else if self.chain.tip().current_hash != tip {
                ctx.note(
                    "replica-divergence",
                    Some(cycle),
                    "tip differs from aggregator",
                );
            }
        }
        self.settle(ctx, outcome, miner);
        if self.pacing == Pacing::BackToBack {
            self.poll(ctx);
        }
    }
}

impl Node for ControlCenter {
    fn id(&self) -> &NodeId {
        &self.id
    }

    fn on_start(&mut self, ctx: &mut Context) {
        self.poll(ctx);
    }

    fn on_message(&mut self, ctx: &mut Context, from: &NodeId, msg: Message) {
        match ProtocolMessage::from_message(&msg) {
            Ok(parsed) if *from == self.aggregator => {
                self.on_update(ctx, parsed.cycle, parsed.body)
            }
            Ok(parsed) => ctx.note("ignored", Some(parsed.cycle), format!("from {from}")),
            Err(e) => ctx.note("malformed", None, format!("from {from}: {e}")),
        }
    }

    fn on_timer(&mut self, ctx: &mut Context, token: u64) {
        let cycle = token / 2;
        match token % 2 {
            START if cycle == self.next_cycle() => self.poll(ctx),
            AWAIT if self.in_flight && self.records.last().map(|r| r.cycle) == Some(cycle) => {
                self.settle(ctx, CycleOutcome::Aborted(AbortReason::NoUpdate), None);
                if self.pacing == Pacing::BackToBack {
                    self.poll(ctx);
                }
            }
            _ => {}
        }
    }

    fn describe(&self, msg: &Message) -> Label {
        label(msg)
    }

    fn is_done(&self) -> bool {
        !self.in_flight && self.records.len() as u64 >= self.cycles
    }
}
