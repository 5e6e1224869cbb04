//! Deterministic discrete-event network.
//!
//! Events are ordered by `(tick, enqueue sequence)`. Links are reliable and
//! FIFO like a TCP connection; a drop loses a whole message. Each sender
//! owns one uplink that serializes its frames at `per_frame` ticks apiece
//! before the link latency applies.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::time::{Duration, Instant};

use rand::Rng;

use super::trace::{Trace, TraceEvent};
use super::{Action, Context, HarnessError, Node, Tick};
use crate::consensus::{seeded_rng, NodeId, SeededRng};
use crate::dnp3m::{decode_message, encode_message, Message};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Latency {
    Fixed(Tick),
    /// Uniform over the inclusive range.
    Uniform {
        lo: Tick,
        hi: Tick,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkPolicy {
    pub latency: Latency,
    /// Uplink serialization time per frame.
    pub per_frame: Tick,
    /// Drop probability applied to every link.
    pub drop_probability: f64,
    /// Drop probability for every link touching the node.
    pub node_drop: BTreeMap<NodeId, f64>,
    /// Drop probability for one directed link; overrides the others.
    pub link_drop: BTreeMap<(NodeId, NodeId), f64>,
    pub seed: u64,
}

impl Default for NetworkPolicy {
    fn default() -> Self {
        Self {
            latency: Latency::Fixed(1),
            per_frame: 1,
            drop_probability: 0.0,
            node_drop: BTreeMap::new(),
            link_drop: BTreeMap::new(),
            seed: 0,
        }
    }
}

impl NetworkPolicy {
    /// Zero latency, zero serialization cost, no drops.
    pub fn instant() -> Self {
        Self {
            latency: Latency::Fixed(0),
            per_frame: 0,
            ..Self::default()
        }
    }

    pub fn drop_for(&self, from: &NodeId, to: &NodeId) -> f64 {
        if let Some(p) = self.link_drop.get(&(from.clone(), to.clone())) {
            return *p;
        }
        let touching = [self.node_drop.get(from), self.node_drop.get(to)]
            .into_iter()
            .flatten()
            .copied();
        touching.fold(self.drop_probability, f64::max)
    }

    /// True when some message may be lost.
    pub fn is_lossy(&self) -> bool {
        self.drop_probability > 0.0
            || self.node_drop.values().any(|p| *p > 0.0)
            || self.link_drop.values().any(|p| *p > 0.0)
    }
}

enum What {
    Start(usize),
    Deliver {
        from: usize,
        to: usize,
        frames: Vec<Vec<u8>>,
    },
    Timer {
        node: usize,
        token: u64,
    },
}

struct Event {
    tick: Tick,
    seq: u64,
    what: What,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        (self.tick, self.seq) == (other.tick, other.seq)
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.tick, self.seq).cmp(&(other.tick, other.seq))
    }
}

type Interceptor = Box<dyn FnMut(&NodeId, &NodeId, &mut Message) + Send>;

pub struct Simulation<N: Node> {
    nodes: Vec<N>,
    ids: Vec<NodeId>,
    index: HashMap<NodeId, usize>,
    policy: NetworkPolicy,
    rng: SeededRng,
    queue: BinaryHeap<Reverse<Event>>,
    seq: u64,
    now: Tick,
    uplink_free: Vec<Tick>,
    link_last: HashMap<(usize, usize), Tick>,
    trace: Option<Vec<TraceEvent>>,
    interceptor: Option<Interceptor>,
    realtime: Option<Instant>,
}

impl<N: Node> Simulation<N> {
    /// Registers the nodes and schedules their start events at tick 0.
    pub fn new(nodes: Vec<N>, policy: NetworkPolicy) -> Result<Self, HarnessError> {
        let ids: Vec<NodeId> = nodes.iter().map(|n| n.id().clone()).collect();
        let mut index = HashMap::new();
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(HarnessError::DuplicateEndpoint(id.to_string()));
            }
        }
        let mut sim = Self {
            uplink_free: vec![0; nodes.len()],
            nodes,
            ids,
            index,
            rng: seeded_rng(policy.seed),
            policy,
            queue: BinaryHeap::new(),
            seq: 0,
            now: 0,
            link_last: HashMap::new(),
            trace: Some(Vec::new()),
            interceptor: None,
            realtime: None,
        };
        for i in 0..sim.nodes.len() {
            sim.push(0, What::Start(i));
        }
        Ok(sim)
    }

    /// Turns trace recording on or off. Long runs can skip it to save memory.
    pub fn record_trace(&mut self, on: bool) {
        self.trace = on.then(Vec::new);
    }

    /// Pace event processing so that one tick takes one wall-clock millisecond.
    pub fn set_realtime(&mut self, on: bool) {
        self.realtime = on.then(Instant::now);
    }

    /// Hook that may rewrite each message before it is framed and sent.
    pub fn set_interceptor(
        &mut self,
        f: impl FnMut(&NodeId, &NodeId, &mut Message) + Send + 'static,
    ) {
        self.interceptor = Some(Box::new(f));
    }

    pub fn now(&self) -> Tick {
        self.now
    }

    pub fn policy(&self) -> &NetworkPolicy {
        &self.policy
    }

    pub fn nodes(&self) -> &[N] {
        &self.nodes
    }

    pub fn node(&self, id: &NodeId) -> Option<&N> {
        self.index.get(id).map(|&i| &self.nodes[i])
    }

    pub fn node_mut(&mut self, id: &NodeId) -> Option<&mut N> {
        self.index.get(id).map(|&i| &mut self.nodes[i])
    }

    pub fn into_nodes(self) -> Vec<N> {
        self.nodes
    }

    fn push(&mut self, tick: Tick, what: What) {
        self.seq += 1;
        self.queue.push(Reverse(Event {
            tick,
            seq: self.seq,
            what,
        }));
    }

    fn record(&mut self, event: TraceEvent) {
        if let Some(t) = self.trace.as_mut() {
            t.push(event);
        }
    }

    fn lookup(&self, id: &NodeId) -> Result<usize, HarnessError> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| HarnessError::UnknownEndpoint(id.clone()))
    }

    /// Enqueues encoded frames on the `from -> to` link.
    pub fn send(
        &mut self,
        from: &NodeId,
        to: &NodeId,
        frames: Vec<Vec<u8>>,
    ) -> Result<(), HarnessError> {
        let (f, t) = (self.lookup(from)?, self.lookup(to)?);
        self.enqueue(f, t, frames, String::new(), None);
        Ok(())
    }

    fn enqueue(
        &mut self,
        from: usize,
        to: usize,
        frames: Vec<Vec<u8>>,
        label: String,
        cycle: Option<u64>,
    ) {
        let p = self.policy.drop_for(&self.ids[from], &self.ids[to]);
        let dropped = if p >= 1.0 {
            true
        } else if p <= 0.0 {
            false
        } else {
            self.rng.gen_bool(p)
        };
        let bytes: usize = frames.iter().map(Vec::len).sum();
        let detail = format!("{label} frames={} bytes={bytes}", frames.len());
        self.record(TraceEvent {
            tick: self.now,
            kind: if dropped { "drop" } else { "send" }.into(),
            from: Some(self.ids[from].to_string()),
            to: Some(self.ids[to].to_string()),
            cycle,
            detail: detail.trim_start().to_string(),
        });
        if dropped {
            return;
        }
        let start = self.now.max(self.uplink_free[from]);
        let sent = start + self.policy.per_frame * frames.len() as Tick;
        self.uplink_free[from] = sent;
        let latency = match self.policy.latency {
            Latency::Fixed(l) => l,
            Latency::Uniform { lo, hi } => self.rng.gen_range(lo..=hi.max(lo)),
        };
        let last = self.link_last.entry((from, to)).or_insert(0);
        let at = (sent + latency).max(*last);
        *last = at;
        self.push(at, What::Deliver { from, to, frames });
    }

    fn apply(&mut self, node: usize, actions: Vec<Action>) {
        for action in actions {
            match action {
                Action::Send { to, mut msg } => {
                    let Some(&t) = self.index.get(&to) else {
                        self.record(TraceEvent {
                            tick: self.now,
                            kind: "unroutable".into(),
                            from: Some(self.ids[node].to_string()),
                            to: Some(to.to_string()),
                            cycle: None,
                            detail: String::new(),
                        });
                        continue;
                    };
                    if let Some(f) = self.interceptor.as_mut() {
                        f(&self.ids[node], &to, &mut msg);
                    }
                    let label = self.nodes[node].describe(&msg);
                    self.enqueue(node, t, encode_message(&msg), label.kind, label.cycle);
                }
                Action::Timer { after, token } => {
                    self.push(self.now + after, What::Timer { node, token });
                }
                Action::Note {
                    kind,
                    cycle,
                    detail,
                } => self.record(TraceEvent {
                    tick: self.now,
                    kind,
                    from: Some(self.ids[node].to_string()),
                    to: None,
                    cycle,
                    detail,
                }),
            }
        }
    }

    /// Processes every event due before `max_ticks`, returning the trace
    /// recorded during this call.
    pub fn run_until_idle(&mut self, max_ticks: Tick) -> Trace {
        while let Some(Reverse(next)) = self.queue.peek() {
            if next.tick >= max_ticks {
                break;
            }
            let Reverse(event) = self.queue.pop().expect("peeked");
            debug_assert!(event.tick >= self.now);
            self.now = event.tick;
            if let Some(origin) = self.realtime {
                let due = origin + Duration::from_millis(self.now);
                if let Some(wait) = due.checked_duration_since(Instant::now()) {
                    std::thread::sleep(wait);
                }
            }
            self.dispatch(event.what);
        }
        Trace {
            events: self.trace.as_mut().map(std::mem::take).unwrap_or_default(),
        }
    }

    fn dispatch(&mut self, what: What) {
        let mut ctx = Context::new(self.now);
        let node = match what {
            What::Start(i) => {
                self.nodes[i].on_start(&mut ctx);
                i
            }
            What::Timer { node, token } => {
                self.record(TraceEvent {
                    tick: self.now,
                    kind: "timer".into(),
                    from: Some(self.ids[node].to_string()),
                    to: None,
                    cycle: None,
                    detail: token.to_string(),
                });
                self.nodes[node].on_timer(&mut ctx, token);
                node
            }
            What::Deliver { from, to, frames } => {
                let msg = match decode_message(&frames) {
                    Ok(m) => m,
                    Err(e) => {
                        self.record(TraceEvent {
                            tick: self.now,
                            kind: "corrupt".into(),
                            from: Some(self.ids[from].to_string()),
                            to: Some(self.ids[to].to_string()),
                            cycle: None,
                            detail: e.to_string(),
                        });
                        return;
                    }
                };
                let label = self.nodes[to].describe(&msg);
                self.record(TraceEvent {
                    tick: self.now,
                    kind: "deliver".into(),
                    from: Some(self.ids[from].to_string()),
                    to: Some(self.ids[to].to_string()),
                    cycle: label.cycle,
                    detail: label.kind,
                });
                let sender = self.ids[from].clone();
                self.nodes[to].on_message(&mut ctx, &sender, msg);
                to
            }
        };
        let actions = ctx.into_actions();
        self.apply(node, actions);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dnp3m::Direction;

    /// Records deliveries; optionally sends a scripted burst at start.
    struct Probe {
        id: NodeId,
        script: Vec<(NodeId, &'static str)>,
        got: Vec<(Tick, NodeId, String)>,
    }

    impl Probe {
        fn new(id: &str, script: Vec<(&str, &'static str)>) -> Self {
            Self {
                id: NodeId::new(id).unwrap(),
                script: script
                    .into_iter()
                    .map(|(to, body)| (NodeId::new(to).unwrap(), body))
                    .collect(),
                got: Vec::new(),
            }
        }
    }

    impl Node for Probe {
        fn id(&self) -> &NodeId {
            &self.id
        }

        fn on_start(&mut self, ctx: &mut Context) {
            for (to, body) in &self.script {
                ctx.send(
                    to.clone(),
                    Message::new(Direction::Request, body.as_bytes()),
                );
            }
        }

        fn on_message(&mut self, ctx: &mut Context, from: &NodeId, msg: Message) {
            self.got.push((
                ctx.now(),
                from.clone(),
                String::from_utf8(msg.body).unwrap(),
            ));
        }

        fn on_timer(&mut self, _ctx: &mut Context, _token: u64) {}
    }

    fn id(s: &str) -> NodeId {
        NodeId::new(s).unwrap()
    }

    #[test]
    fn fifo_per_link() {
        let policy = NetworkPolicy {
            latency: Latency::Uniform { lo: 0, hi: 50 },
            per_frame: 0,
            seed: 3,
            ..NetworkPolicy::default()
        };
        let script: Vec<(&str, &'static str)> = vec![
            ("B", "1"),
            ("B", "2"),
            ("B", "3"),
            ("B", "4"),
            ("B", "5"),
            ("B", "6"),
        ];
        let mut sim = Simulation::new(
            vec![Probe::new("A", script), Probe::new("B", vec![])],
            policy,
        )
        .unwrap();
        sim.run_until_idle(Tick::MAX);
        let b = sim.node(&id("B")).unwrap();
        let bodies: Vec<&str> = b.got.iter().map(|(_, _, s)| s.as_str()).collect();
        assert_eq!(bodies, ["1", "2", "3", "4", "5", "6"]);
        assert!(b.got.windows(2).all(|w| w[0].0 <= w[1].0));
    }

    #[test]
    fn fixed_latency_arithmetic() {
        let policy = NetworkPolicy {
            latency: Latency::Fixed(5),
            per_frame: 0,
            ..NetworkPolicy::default()
        };
        let mut sim = Simulation::new(
            vec![Probe::new("A", vec![]), Probe::new("B", vec![])],
            policy,
        )
        .unwrap();
        sim.run_until_idle(10);
        assert_eq!(sim.now(), 0);
        // inject at t=10 by advancing the clock with an external send
        sim.now = 10;
        sim.send(
            &id("A"),
            &id("B"),
            encode_message(&Message::new(Direction::Request, "x")),
        )
        .unwrap();
        sim.run_until_idle(Tick::MAX);
        assert_eq!(sim.node(&id("B")).unwrap().got[0].0, 15);
    }

    #[test]
    fn uplink_serializes_frames() {
        let policy = NetworkPolicy {
            latency: Latency::Fixed(2),
            per_frame: 3,
            ..NetworkPolicy::default()
        };
        let mut sim = Simulation::new(
            vec![
                Probe::new("A", vec![("B", "x"), ("C", "y")]),
                Probe::new("B", vec![]),
                Probe::new("C", vec![]),
            ],
            policy,
        )
        .unwrap();
        sim.run_until_idle(Tick::MAX);
        assert_eq!(sim.node(&id("B")).unwrap().got[0].0, 5);
        assert_eq!(sim.node(&id("C")).unwrap().got[0].0, 8);
    }

    #[test]
    fn total_drop_delivers_nothing() {
        let mut policy = NetworkPolicy::default();
        policy.link_drop.insert((id("A"), id("B")), 1.0);
        let mut sim = Simulation::new(
            vec![
                Probe::new("A", vec![("B", "x")]),
                Probe::new("B", vec![("A", "y")]),
            ],
            policy,
        )
        .unwrap();
        let trace = sim.run_until_idle(Tick::MAX);
        assert!(sim.node(&id("B")).unwrap().got.is_empty());
        assert_eq!(sim.node(&id("A")).unwrap().got.len(), 1);
        assert_eq!(trace.of_kind("drop").count(), 1);
    }

    #[test]
    fn unknown_endpoint() {
        let mut sim =
            Simulation::new(vec![Probe::new("A", vec![])], NetworkPolicy::default()).unwrap();
        assert!(matches!(
            sim.send(&id("A"), &id("Z"), vec![]),
            Err(HarnessError::UnknownEndpoint(_))
        ));
        assert!(Simulation::new(
            vec![Probe::new("A", vec![]), Probe::new("A", vec![])],
            NetworkPolicy::default()
        )
        .is_err());
    }

    #[test]
    fn zero_budget_is_empty() {
        let mut sim = Simulation::new(
            vec![Probe::new("A", vec![("B", "x")]), Probe::new("B", vec![])],
            NetworkPolicy::default(),
        )
        .unwrap();
        assert!(sim.run_until_idle(0).is_empty());
        assert!(!sim.run_until_idle(Tick::MAX).is_empty());
    }

    #[test]
    fn drop_policy_precedence() {
        let mut p = NetworkPolicy::default();
        p.node_drop.insert(id("R2"), 1.0);
        assert_eq!(p.drop_for(&id("DA"), &id("R2")), 1.0);
        assert_eq!(p.drop_for(&id("R2"), &id("DA")), 1.0);
        assert_eq!(p.drop_for(&id("DA"), &id("R1")), 0.0);
        p.link_drop.insert((id("DA"), id("R2")), 0.0);
        assert_eq!(p.drop_for(&id("DA"), &id("R2")), 0.0);
        assert!(p.is_lossy());
    }

    #[test]
    fn same_seed_same_schedule() {
        let run = || {
            let policy = NetworkPolicy {
                latency: Latency::Uniform { lo: 1, hi: 9 },
                drop_probability: 0.3,
                seed: 11,
                ..NetworkPolicy::default()
            };
            let script: Vec<(&str, &'static str)> =
                vec![("B", "1"), ("C", "2"), ("B", "3"), ("C", "4"), ("B", "5")];
            let mut sim = Simulation::new(
                vec![
                    Probe::new("A", script),
                    Probe::new("B", vec![]),
                    Probe::new("C", vec![]),
                ],
                policy,
            )
            .unwrap();
            sim.run_until_idle(Tick::MAX).to_jsonl()
        };
        assert_eq!(run(), run());
    }
}
