//! Localhost TCP transport and a threaded runtime for [`Node`]s.
//!
//! Every node listens on its own endpoint. A directed connection is opened
//! lazily on the first send and starts with a hello message naming the
//! sender; everything after it is plain DNP3m frames. Each node runs on its
//! own thread and sees a single-threaded stream of events.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::io::{Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use super::trace::{Trace, TraceEvent};
use super::{Action, Context, HarnessError, Node, Tick};
use crate::consensus::NodeId;
use crate::dnp3m::{encode_message, Direction, Message, StreamDecoder};

/// First port handed out by [`default_endpoints`].
pub const DEFAULT_BASE_PORT: u16 = 20000;

const HELLO: &str = "HELLO ";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Endpoint {
    pub node: NodeId,
    pub address: String,
    /// 0 asks the OS for a free port.
    pub port: u16,
}

/// Loopback endpoints on consecutive ports from `base` (all ephemeral when
/// `base` is 0).
pub fn default_endpoints(nodes: &[NodeId], base: u16) -> Vec<Endpoint> {
    nodes
        .iter()
        .enumerate()
        .map(|(i, node)| Endpoint {
            node: node.clone(),
            address: "127.0.0.1".into(),
            port: if base == 0 { 0 } else { base + i as u16 },
        })
        .collect()
}

/// Observer of raw bytes read from sockets, keyed by receiving node and
/// connection number.
pub type WireTap = Arc<dyn Fn(&NodeId, usize, &[u8]) + Send + Sync>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Inbound {
    pub from: NodeId,
    pub message: Message,
}

type Links = HashMap<(NodeId, NodeId), Arc<Mutex<TcpStream>>>;

pub struct TcpTransport {
    addrs: BTreeMap<NodeId, SocketAddr>,
    inboxes: Mutex<HashMap<NodeId, Receiver<Inbound>>>,
    outgoing: Mutex<Links>,
    stop: Arc<AtomicBool>,
    threads: Mutex<Vec<JoinHandle<()>>>,
}

/// Binds a listener for every endpoint.
pub fn tcp_transport(endpoints: &[Endpoint]) -> Result<TcpTransport, HarnessError> {
    TcpTransport::bind(endpoints, None)
}

impl TcpTransport {
    pub fn bind(endpoints: &[Endpoint], tap: Option<WireTap>) -> Result<Self, HarnessError> {
        let mut seen = std::collections::HashSet::new();
        for ep in endpoints {
            if ep.port != 0 && !seen.insert((ep.address.clone(), ep.port)) {
                return Err(HarnessError::DuplicateEndpoint(format!(
                    "{}:{}",
                    ep.address, ep.port
                )));
            }
        }
        let stop = Arc::new(AtomicBool::new(false));
        let mut listeners = Vec::new();
        for ep in endpoints {
            let addr_text = format!("{}:{}", ep.address, ep.port);
            let listener =
                TcpListener::bind(&addr_text).map_err(|source| HarnessError::BindFailure {
                    addr: addr_text.clone(),
                    source,
                })?;
            listeners.push((ep.node.clone(), listener));
        }
        let mut addrs = BTreeMap::new();
        let mut inboxes = HashMap::new();
        let mut threads = Vec::new();
        for (node, listener) in listeners {
            let addr = listener.local_addr()?;
            if addrs.insert(node.clone(), addr).is_some() {
                return Err(HarnessError::DuplicateEndpoint(node.to_string()));
            }
            let (tx, rx) = mpsc::channel();
            inboxes.insert(node.clone(), rx);
            let stop = stop.clone();
            let tap = tap.clone();
            threads.push(thread::spawn(move || {
                accept_loop(node, listener, tx, stop, tap)
            }));
        }
        Ok(Self {
            addrs,
            inboxes: Mutex::new(inboxes),
            outgoing: Mutex::new(HashMap::new()),
            stop,
            threads: Mutex::new(threads),
        })
    }

    pub fn local_addr(&self, node: &NodeId) -> Option<SocketAddr> {
        self.addrs.get(node).copied()
    }

    pub fn nodes(&self) -> impl Iterator<Item = &NodeId> {
        self.addrs.keys()
    }

    /// Hands out the receiving side for `node`; `None` once taken.
    pub fn take_inbox(&self, node: &NodeId) -> Option<Receiver<Inbound>> {
        self.inboxes.lock().expect("inbox lock").remove(node)
    }

    fn connection(
        &self,
        from: &NodeId,
        to: &NodeId,
    ) -> Result<Arc<Mutex<TcpStream>>, HarnessError> {
        let key = (from.clone(), to.clone());
        let mut out = self.outgoing.lock().expect("outgoing lock");
        if let Some(conn) = out.get(&key) {
            return Ok(conn.clone());
        }
        self.addrs
            .get(from)
            .ok_or_else(|| HarnessError::UnknownEndpoint(from.clone()))?;
        let addr = *self
            .addrs
            .get(to)
            .ok_or_else(|| HarnessError::UnknownEndpoint(to.clone()))?;
        let mut stream =
            TcpStream::connect(addr).map_err(|source| HarnessError::ConnectFailure {
                addr: addr.to_string(),
                source,
            })?;
        stream.set_nodelay(true)?;
        let hello = Message::new(Direction::Request, format!("{HELLO}{from}"));
        stream.write_all(&encode_message(&hello).concat())?;
        let conn = Arc::new(Mutex::new(stream));
        out.insert(key, conn.clone());
        Ok(conn)
    }

    /// Writes already encoded frames on the `from -> to` connection.
    pub fn send(&self, from: &NodeId, to: &NodeId, frames: &[Vec<u8>]) -> Result<(), HarnessError> {
        let conn = self.connection(from, to)?;
        let mut stream = conn.lock().expect("stream lock");
        stream.write_all(&frames.concat())?;
        Ok(())
    }

    pub fn send_message(
        &self,
        from: &NodeId,
        to: &NodeId,
        msg: &Message,
    ) -> Result<(), HarnessError> {
        self.send(from, to, &encode_message(msg))
    }

    /// Closes every connection and stops the listener threads.
    pub fn shutdown(&self) {
        if self.stop.swap(true, Ordering::SeqCst) {
            return;
        }
        for conn in self
            .outgoing
            .lock()
            .expect("outgoing lock")
            .drain()
            .map(|(_, c)| c)
        {
            let _ = conn.lock().map(|s| s.shutdown(Shutdown::Both));
        }
        for addr in self.addrs.values() {
            // wake the blocking accept
            let _ = TcpStream::connect(addr);
        }
        for handle in self.threads.lock().expect("thread lock").drain(..) {
            let _ = handle.join();
        }
    }
}

impl Drop for TcpTransport {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn accept_loop(
    node: NodeId,
    listener: TcpListener,
    inbox: Sender<Inbound>,
    stop: Arc<AtomicBool>,
    tap: Option<WireTap>,
) {
    let mut readers = Vec::new();
    for (conn_no, stream) in listener.incoming().enumerate() {
        if stop.load(Ordering::SeqCst) {
            break;
        }
        let Ok(stream) = stream else { continue };
        let (node, inbox, tap, stop) = (node.clone(), inbox.clone(), tap.clone(), stop.clone());
        readers.push(thread::spawn(move || {
            read_loop(node, conn_no, stream, inbox, tap, stop)
        }));
    }
    for r in readers {
        let _ = r.join();
    }
}

fn read_loop(
    node: NodeId,
    conn_no: usize,
    mut stream: TcpStream,
    inbox: Sender<Inbound>,
    tap: Option<WireTap>,
    stop: Arc<AtomicBool>,
) {
    let _ = stream.set_read_timeout(Some(Duration::from_millis(50)));
    let mut decoder = StreamDecoder::new();
    let mut peer: Option<NodeId> = None;
    let mut buf = [0u8; 4096];
    loop {
        let n = match stream.read(&mut buf) {
            Ok(0) => return,
            Ok(n) => n,
            Err(e)
                if matches!(
                    e.kind(),
                    std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut
                ) =>
            {
                if stop.load(Ordering::SeqCst) {
                    return;
                }
                continue;
            }
            Err(_) => return,
        };
        if let Some(tap) = &tap {
            tap(&node, conn_no, &buf[..n]);
        }
        decoder.extend(&buf[..n]);
        loop {
            let message = match decoder.next_message() {
                Ok(Some(m)) => m,
                Ok(None) => break,
                Err(_) => return,
            };
            match &peer {
                None => {
                    let name = std::str::from_utf8(&message.body)
                        .ok()
                        .and_then(|s| s.strip_prefix(HELLO))
                        .and_then(|s| NodeId::new(s).ok());
                    match name {
                        Some(name) => peer = Some(name),
                        None => return,
                    }
                }
                Some(from) => {
                    if inbox
                        .send(Inbound {
                            from: from.clone(),
                            message,
                        })
                        .is_err()
                    {
                        return;
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Wall-clock limit for the whole run.
    pub deadline: Duration,
    pub record_trace: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            deadline: Duration::from_secs(60),
            record_trace: true,
        }
    }
}

/// Runs each node on its own thread over `transport` until every node reports
/// done or the deadline passes. Returns the nodes in their original order.
pub fn run<N: Node + 'static>(
    nodes: Vec<N>,
    transport: Arc<TcpTransport>,
    opts: RunOptions,
) -> Result<(Vec<N>, Trace), HarnessError> {
    let origin = Instant::now();
    let stop = Arc::new(AtomicBool::new(false));
    let trace = Arc::new(Mutex::new(Vec::new()));
    let mut handles = Vec::new();
    let mut flags = Vec::new();
    for node in nodes {
        let inbox = transport
            .take_inbox(node.id())
            .ok_or_else(|| HarnessError::UnknownEndpoint(node.id().clone()))?;
        let done = Arc::new(AtomicBool::new(false));
        flags.push(done.clone());
        let worker = Worker {
            node,
            inbox,
            transport: transport.clone(),
            origin,
            stop: stop.clone(),
            done,
            trace: opts.record_trace.then(|| trace.clone()),
            timers: BinaryHeap::new(),
            timer_seq: 0,
        };
        handles.push(thread::spawn(move || worker.run()));
    }
    while origin.elapsed() < opts.deadline {
        if flags.iter().all(|f| f.load(Ordering::SeqCst)) {
            break;
        }
        thread::sleep(Duration::from_millis(1));
    }
    stop.store(true, Ordering::SeqCst);
    let nodes = handles
        .into_iter()
        .map(|h| h.join().expect("node thread panicked"))
        .collect();
    transport.shutdown();
    let mut events = std::mem::take(&mut *trace.lock().expect("trace lock"));
    events.sort_by_key(|e: &TraceEvent| e.tick);
    Ok((nodes, Trace { events }))
}

struct Worker<N> {
    node: N,
    inbox: Receiver<Inbound>,
    transport: Arc<TcpTransport>,
    origin: Instant,
    stop: Arc<AtomicBool>,
    done: Arc<AtomicBool>,
    trace: Option<Arc<Mutex<Vec<TraceEvent>>>>,
    timers: BinaryHeap<Reverse<(Tick, u64, u64)>>,
    timer_seq: u64,
}

impl<N: Node> Worker<N> {
    fn now(&self) -> Tick {
        self.origin.elapsed().as_millis() as Tick
    }

    fn record(&self, event: TraceEvent) {
        if let Some(t) = &self.trace {
            t.lock().expect("trace lock").push(event);
        }
    }

    fn run(mut self) -> N {
        let mut ctx = Context::new(self.now());
        self.node.on_start(&mut ctx);
        self.apply(ctx);
        while !self.stop.load(Ordering::SeqCst) {
            let now = self.now();
            let wait = self
                .timers
                .peek()
                .map(|Reverse((at, _, _))| at.saturating_sub(now))
                .unwrap_or(5)
                .min(5);
            match self.inbox.recv_timeout(Duration::from_millis(wait)) {
                Ok(inbound) => {
                    let mut ctx = Context::new(self.now());
                    let label = self.node.describe(&inbound.message);
                    self.record(TraceEvent {
                        tick: ctx.now(),
                        kind: "deliver".into(),
                        from: Some(inbound.from.to_string()),
                        to: Some(self.node.id().to_string()),
                        cycle: label.cycle,
                        detail: label.kind,
                    });
                    self.node
                        .on_message(&mut ctx, &inbound.from, inbound.message);
                    self.apply(ctx);
                }
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => break,
            }
            while let Some(Reverse((at, _, token))) = self.timers.peek().copied() {
                if at > self.now() {
                    break;
                }
                self.timers.pop();
                let mut ctx = Context::new(self.now());
                self.node.on_timer(&mut ctx, token);
                self.apply(ctx);
            }
        }
        self.node
    }

    fn apply(&mut self, ctx: Context) {
        let now = ctx.now();
        for action in ctx.into_actions() {
            match action {
                Action::Send { to, msg } => {
                    let label = self.node.describe(&msg);
                    let frames = encode_message(&msg);
                    let outcome = self.transport.send(self.node.id(), &to, &frames);
                    self.record(TraceEvent {
                        tick: now,
                        kind: if outcome.is_ok() { "send" } else { "drop" }.into(),
                        from: Some(self.node.id().to_string()),
                        to: Some(to.to_string()),
                        cycle: label.cycle,
                        detail: format!("{} frames={}", label.kind, frames.len()),
                    });
                }
                Action::Timer { after, token } => {
                    self.timer_seq += 1;
                    self.timers
                        .push(Reverse((now + after, self.timer_seq, token)));
                }
                Action::Note {
                    kind,
                    cycle,
                    detail,
                } => self.record(TraceEvent {
                    tick: now,
                    kind,
                    from: Some(self.node.id().to_string()),
                    to: None,
                    cycle,
                    detail,
                }),
            }
        }
        self.done.store(self.node.is_done(), Ordering::SeqCst);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn id(s: &str) -> NodeId {
        NodeId::new(s).unwrap()
    }

    #[test]
    fn loopback_echo_is_transparent() {
        let eps = default_endpoints(&[id("A"), id("B")], 0);
        let t = tcp_transport(&eps).unwrap();
        let rx = t.take_inbox(&id("B")).unwrap();
        let msg = Message::new(
            Direction::Response,
            (0..=255u8).cycle().take(700).collect::<Vec<_>>(),
        );
        t.send_message(&id("A"), &id("B"), &msg).unwrap();
        let got = rx.recv_timeout(Duration::from_secs(5)).unwrap();
        assert_eq!(
            got,
            Inbound {
                from: id("A"),
                message: msg
            }
        );
        t.shutdown();
    }

    #[test]
    fn port_collision_is_bind_failure() {
        let first = tcp_transport(&default_endpoints(&[id("A")], 0)).unwrap();
        let port = first.local_addr(&id("A")).unwrap().port();
        let clash = vec![Endpoint {
            node: id("B"),
            address: "127.0.0.1".into(),
            port,
        }];
        assert!(matches!(
            tcp_transport(&clash),
            Err(HarnessError::BindFailure { .. })
        ));
    }

    #[test]
    fn duplicate_endpoint_rejected() {
        let eps = vec![
            Endpoint {
                node: id("A"),
                address: "127.0.0.1".into(),
                port: 20999,
            },
            Endpoint {
                node: id("B"),
                address: "127.0.0.1".into(),
                port: 20999,
            },
        ];
        assert!(matches!(
            tcp_transport(&eps),
            Err(HarnessError::DuplicateEndpoint(_))
        ));
    }

    #[test]
    fn default_ports_are_consecutive() {
        let eps = default_endpoints(&[id("DA"), id("R1"), id("R2")], DEFAULT_BASE_PORT);
        let ports: Vec<u16> = eps.iter().map(|e| e.port).collect();
        assert_eq!(ports, [20000, 20001, 20002]);
    }

    #[test]
    fn unknown_peer_errors() {
        let t = tcp_transport(&default_endpoints(&[id("A")], 0)).unwrap();
        assert!(matches!(
            t.send(&id("A"), &id("Q"), &[]),
            Err(HarnessError::UnknownEndpoint(_))
        ));
    }
}
