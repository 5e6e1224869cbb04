//! Execution of node state machines over a transport.
//!
//! Nodes are sans-IO: they react to start, message and timer events through a
//! [`Context`] that collects their sends, timers and trace notes. The same
//! node runs unchanged under the deterministic [`Simulation`] or the
//! [`tcp`] runtime.

mod sim;
pub mod tcp;
mod trace;

pub use sim::{Latency, NetworkPolicy, Simulation};
pub use trace::{Trace, TraceEvent};

use thiserror::Error;

use crate::consensus::NodeId;
use crate::dnp3m::Message;

/// Modeled time; one tick is one millisecond.
pub type Tick = u64;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("unknown endpoint {0}")]
    UnknownEndpoint(NodeId),
    #[error("duplicate endpoint {0}")]
    DuplicateEndpoint(String),
    #[error("failed to bind {addr}: {source}")]
    BindFailure {
        addr: String,
        source: std::io::Error,
    },
    #[error("failed to connect to {addr}: {source}")]
    ConnectFailure {
        addr: String,
        source: std::io::Error,
    },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Kind and cycle of a message, for the trace.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Label {
    pub kind: String,
    pub cycle: Option<u64>,
}

pub trait Node: Send {
    fn id(&self) -> &NodeId;

    fn on_start(&mut self, ctx: &mut Context);

    fn on_message(&mut self, ctx: &mut Context, from: &NodeId, msg: Message);

    fn on_timer(&mut self, ctx: &mut Context, token: u64);

    fn describe(&self, _msg: &Message) -> Label {
        Label::default()
    }

    /// False while the node still expects to make progress.
    fn is_done(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum Action {
    Send {
        to: NodeId,
        msg: Message,
    },
    Timer {
        after: Tick,
        token: u64,
    },
    Note {
        kind: String,
        cycle: Option<u64>,
        detail: String,
    },
}

/// Handle passed to a node while it processes one event.
#[derive(Debug)]
pub struct Context {
    now: Tick,
    actions: Vec<Action>,
}

impl Context {
    pub fn new(now: Tick) -> Self {
        Self {
            now,
            actions: Vec::new(),
        }
    }

    pub fn now(&self) -> Tick {
        self.now
    }

    pub fn send(&mut self, to: NodeId, msg: Message) {
        self.actions.push(Action::Send { to, msg });
    }

    pub fn set_timer(&mut self, after: Tick, token: u64) {
        self.actions.push(Action::Timer { after, token });
    }

    pub fn note(&mut self, kind: impl Into<String>, cycle: Option<u64>, detail: impl Into<String>) {
        self.actions.push(Action::Note {
            kind: kind.into(),
            cycle,
            detail: detail.into(),
        });
    }

    /// Messages sent so far in this event, in order.
    pub fn sent(&self) -> impl Iterator<Item = (&NodeId, &Message)> {
        self.actions.iter().filter_map(|a| match a {
            Action::Send { to, msg } => Some((to, msg)),
            _ => None,
        })
    }

    /// Timers requested so far, as `(after, token)`.
    pub fn timers(&self) -> impl Iterator<Item = (Tick, u64)> + '_ {
        self.actions.iter().filter_map(|a| match a {
            Action::Timer { after, token } => Some((*after, *token)),
            _ => None,
        })
    }

    pub(crate) fn into_actions(self) -> Vec<Action> {
        self.actions
    }
}
