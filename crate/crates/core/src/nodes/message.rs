//! Text protocol carried inside DNP3m messages.
//!
//! Layout: `kind|sender|cycle|field=value;field=value`, UTF-8. Field values
//! are percent-escaped for `%`, `|`, `;`, `=`, CR and LF, so measurement sets
//! and JSON blocks can travel verbatim.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use super::{AbortReason, CycleOutcome, VerifyFault};
use crate::consensus::NodeId;
use crate::dnp3m::{Direction, Message};
use crate::ledger::{Block, MeasurementSet};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MessageError {
    #[error("message body is not UTF-8")]
    NotUtf8,
    #[error("unknown message kind `{0}`")]
    UnknownKind(String),
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("missing field `{0}`")]
    MissingField(&'static str),
    #[error("bad field `{field}`: {reason}")]
    BadField { field: &'static str, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MessageKind {
    DataRequest,
    DataResponse,
    ChainCheck,
    ChainCheckReply,
    Challenge,
    CountShare,
    Vote,
    MiningAssign,
    NewBlock,
    VerifyRequest,
    VerifyReply,
    AddBlock,
    AddAck,
    ChainUpdate,
}

impl MessageKind {
    pub const ALL: [MessageKind; 14] = [
        MessageKind::DataRequest,
        MessageKind::DataResponse,
        MessageKind::ChainCheck,
        MessageKind::ChainCheckReply,
        MessageKind::Challenge,
        MessageKind::CountShare,
        MessageKind::Vote,
        MessageKind::MiningAssign,
        MessageKind::NewBlock,
        MessageKind::VerifyRequest,
        MessageKind::VerifyReply,
        MessageKind::AddBlock,
        MessageKind::AddAck,
        MessageKind::ChainUpdate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MessageKind::DataRequest => "DataRequest",
            MessageKind::DataResponse => "DataResponse",
            MessageKind::ChainCheck => "ChainCheck",
            MessageKind::ChainCheckReply => "ChainCheckReply",
            MessageKind::Challenge => "Challenge",
            MessageKind::CountShare => "CountShare",
            MessageKind::Vote => "Vote",
            MessageKind::MiningAssign => "MiningAssign",
            MessageKind::NewBlock => "NewBlock",
            MessageKind::VerifyRequest => "VerifyRequest",
            MessageKind::VerifyReply => "VerifyReply",
            MessageKind::AddBlock => "AddBlock",
            MessageKind::AddAck => "AddAck",
            MessageKind::ChainUpdate => "ChainUpdate",
        }
    }

    /// Commands travel as requests; answers and reports as responses.
    pub fn direction(self) -> Direction {
        match self {
            MessageKind::DataRequest
            | MessageKind::ChainCheck
            | MessageKind::Challenge
            | MessageKind::MiningAssign
            | MessageKind::VerifyRequest
            | MessageKind::AddBlock => Direction::Request,
            _ => Direction::Response,
        }
    }
}

impl fmt::Display for MessageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MessageKind {
    type Err = MessageError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MessageKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| MessageError::UnknownKind(s.to_string()))
    }
}

/// A relay's vote on the selection outcome.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum VoteChoice {
    /// The unique node with the largest count.
    Node(NodeId),
    /// The aggregator must draw the miner at random.
    Random,
    /// The shares seen were inconsistent.
    Reject,
}

impl fmt::Display for VoteChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VoteChoice::Node(n) => write!(f, "{n}"),
            VoteChoice::Random => f.write_str("*"),
            VoteChoice::Reject => f.write_str("!"),
        }
    }
}

impl FromStr for VoteChoice {
    type Err = MessageError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "*" => Ok(VoteChoice::Random),
            "!" => Ok(VoteChoice::Reject),
            other => NodeId::new(other)
                .map(VoteChoice::Node)
                .map_err(|e| MessageError::BadField {
                    field: "choice",
                    reason: e.to_string(),
                }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Body {
    DataRequest {
        stamp: u64,
    },
    DataResponse {
        set: MeasurementSet,
    },
    ChainCheck {
        tip: String,
        length: u64,
    },
    ChainCheckReply {
        matches: bool,
    },
    Challenge {
        value: u64,
        eligible: Vec<NodeId>,
    },
    CountShare {
        node: NodeId,
        digest: String,
        count: u32,
    },
    Vote {
        choice: VoteChoice,
        /// Fingerprint of the shares the vote was computed from.
        tally: String,
    },
    MiningAssign {
        miner: NodeId,
        stamp: u64,
        /// Cipher output over the aggregated payload.
        payload: Vec<u8>,
    },
    NewBlock {
        block: Block,
    },
    VerifyRequest {
        block: Block,
    },
    VerifyReply {
        verdict: Result<(), VerifyFault>,
    },
    AddBlock {
        hash: String,
    },
    AddAck {
        ok: bool,
    },
    ChainUpdate {
        outcome: CycleOutcome,
        length: u64,
        tip: String,
        miner: Option<NodeId>,
        block: Option<Block>,
    },
}

impl Body {
    pub fn kind(&self) -> MessageKind {
        match self {
            Body::DataRequest { .. } => MessageKind::DataRequest,
            Body::DataResponse { .. } => MessageKind::DataResponse,
            Body::ChainCheck { .. } => MessageKind::ChainCheck,
            Body::ChainCheckReply { .. } => MessageKind::ChainCheckReply,
            Body::Challenge { .. } => MessageKind::Challenge,
            Body::CountShare { .. } => MessageKind::CountShare,
            Body::Vote { .. } => MessageKind::Vote,
            Body::MiningAssign { .. } => MessageKind::MiningAssign,
            Body::NewBlock { .. } => MessageKind::NewBlock,
            Body::VerifyRequest { .. } => MessageKind::VerifyRequest,
            Body::VerifyReply { .. } => MessageKind::VerifyReply,
            Body::AddBlock { .. } => MessageKind::AddBlock,
            Body::AddAck { .. } => MessageKind::AddAck,
            Body::ChainUpdate { .. } => MessageKind::ChainUpdate,
        }
    }

    fn fields(&self) -> Vec<(&'static str, String)> {
        match self {
            Body::DataRequest { stamp } => vec![("stamp", stamp.to_string())],
            Body::DataResponse { set } => vec![("set", set.canonical())],
            Body::ChainCheck { tip, length } => {
                vec![("tip", tip.clone()), ("length", length.to_string())]
            }
            Body::ChainCheckReply { matches } => vec![(
                "status",
                if *matches { "match" } else { "mismatch" }.to_string(),
            )],
            Body::Challenge { value, eligible } => vec![
                ("value", value.to_string()),
                ("eligible", join_nodes(eligible)),
            ],
            Body::CountShare {
                node,
                digest,
                count,
            } => vec![
                ("node", node.to_string()),
                ("digest", digest.clone()),
                ("count", count.to_string()),
            ],
            Body::Vote { choice, tally } => {
                vec![("choice", choice.to_string()), ("tally", tally.clone())]
            }
            Body::MiningAssign {
                miner,
                stamp,
                payload,
            } => vec![
                ("miner", miner.to_string()),
                ("stamp", stamp.to_string()),
                ("payload", hex::encode(payload)),
            ],
            Body::NewBlock { block } | Body::VerifyRequest { block } => {
                vec![("block", block_json(block))]
            }
            Body::VerifyReply { verdict } => match verdict {
                Ok(()) => vec![("ok", "true".into())],
                Err(fault) => vec![("ok", "false".into()), ("kind", fault.to_string())],
            },
            Body::AddBlock { hash } => vec![("hash", hash.clone())],
            Body::AddAck { ok } => vec![("ok", ok.to_string())],
            Body::ChainUpdate {
                outcome,
                length,
                tip,
                miner,
                block,
            } => {
                let mut f = vec![
                    ("outcome", outcome.to_string()),
                    ("length", length.to_string()),
                    ("tip", tip.clone()),
                ];
                if let Some(m) = miner {
                    f.push(("miner", m.to_string()));
                }
                if let Some(b) = block {
                    f.push(("block", block_json(b)));
                }
                f
            }
        }
    }

    fn parse(kind: MessageKind, fields: &Fields<'_>) -> Result<Self, MessageError> {
        Ok(match kind {
            MessageKind::DataRequest => Body::DataRequest {
                stamp: fields.parse("stamp")?,
            },
            MessageKind::DataResponse => Body::DataResponse {
                set: MeasurementSet::parse_canonical(&fields.get("set")?).map_err(|e| {
                    MessageError::BadField {
                        field: "set",
                        reason: e.to_string(),
                    }
                })?,
            },
            MessageKind::ChainCheck => Body::ChainCheck {
                tip: fields.get("tip")?,
                length: fields.parse("length")?,
            },
            MessageKind::ChainCheckReply => Body::ChainCheckReply {
                matches: match fields.get("status")?.as_str() {
                    "match" => true,
                    "mismatch" => false,
                    other => {
                        return Err(MessageError::BadField {
                            field: "status",
                            reason: other.to_string(),
                        })
                    }
                },
            },
            MessageKind::Challenge => Body::Challenge {
                value: fields.parse("value")?,
                eligible: split_nodes(&fields.get("eligible")?)?,
            },
            MessageKind::CountShare => Body::CountShare {
                node: fields.parse("node")?,
                digest: fields.get("digest")?,
                count: fields.parse("count")?,
            },
            MessageKind::Vote => Body::Vote {
                choice: fields.parse("choice")?,
                tally: fields.get("tally")?,
            },
            MessageKind::MiningAssign => Body::MiningAssign {
                miner: fields.parse("miner")?,
                stamp: fields.parse("stamp")?,
                payload: hex::decode(fields.get("payload")?).map_err(|e| {
                    MessageError::BadField {
                        field: "payload",
                        reason: e.to_string(),
                    }
                })?,
            },
            MessageKind::NewBlock => Body::NewBlock {
                block: parse_block(&fields.get("block")?)?,
            },
            MessageKind::VerifyRequest => Body::VerifyRequest {
                block: parse_block(&fields.get("block")?)?,
            },
            MessageKind::VerifyReply => Body::VerifyReply {
                verdict: if fields.parse::<bool>("ok")? {
                    Ok(())
                } else {
                    Err(fields.parse("kind")?)
                },
            },
            MessageKind::AddBlock => Body::AddBlock {
                hash: fields.get("hash")?,
            },
            MessageKind::AddAck => Body::AddAck {
                ok: fields.parse("ok")?,
            },
            MessageKind::ChainUpdate => Body::ChainUpdate {
                outcome: fields.parse("outcome")?,
                length: fields.parse("length")?,
                tip: fields.get("tip")?,
                miner: fields
                    .opt("miner")
                    .map(|m| {
                        NodeId::new(m).map_err(|e| MessageError::BadField {
                            field: "miner",
                            reason: e.to_string(),
                        })
                    })
                    .transpose()?,
                block: fields.opt("block").map(|b| parse_block(&b)).transpose()?,
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProtocolMessage {
    pub sender: NodeId,
    pub cycle: u64,
    pub body: Body,
}

impl ProtocolMessage {
    pub fn new(sender: NodeId, cycle: u64, body: Body) -> Self {
        Self {
            sender,
            cycle,
            body,
        }
    }

    pub fn kind(&self) -> MessageKind {
        self.body.kind()
    }

    pub fn to_text(&self) -> String {
        let fields: Vec<String> = self
            .body
            .fields()
            .into_iter()
            .map(|(k, v)| format!("{k}={}", escape(&v)))
            .collect();
        format!(
            "{}|{}|{}|{}",
            self.kind(),
            self.sender,
            self.cycle,
            fields.join(";")
        )
    }

    pub fn parse_text(text: &str) -> Result<Self, MessageError> {
        let mut parts = text.splitn(4, '|');
        let (Some(kind), Some(sender), Some(cycle), Some(rest)) =
            (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(MessageError::Malformed(
                "expected kind|sender|cycle|fields".into(),
            ));
        };
        let kind: MessageKind = kind.parse()?;
        let sender = NodeId::new(sender).map_err(|e| MessageError::BadField {
            field: "sender",
            reason: e.to_string(),
        })?;
        let cycle = cycle.parse().map_err(|_| MessageError::BadField {
            field: "cycle",
            reason: cycle.to_string(),
        })?;
        let fields = Fields::split(rest)?;
        Ok(Self {
            sender,
            cycle,
            body: Body::parse(kind, &fields)?,
        })
    }

    pub fn to_message(&self) -> Message {
        Message::new(self.kind().direction(), self.to_text())
    }

    pub fn from_message(msg: &Message) -> Result<Self, MessageError> {
        let text = std::str::from_utf8(&msg.body).map_err(|_| MessageError::NotUtf8)?;
        let parsed = Self::parse_text(text)?;
        if parsed.kind().direction() != msg.direction {
            return Err(MessageError::Malformed(format!(
                "{} sent with the wrong direction",
                parsed.kind()
            )));
        }
        Ok(parsed)
    }
}

struct Fields<'a> {
    pairs: Vec<(&'a str, &'a str)>,
}

impl<'a> Fields<'a> {
    fn split(rest: &'a str) -> Result<Self, MessageError> {
        let mut pairs = Vec::new();
        if !rest.is_empty() {
            for item in rest.split(';') {
                let (k, v) = item
                    .split_once('=')
                    .ok_or_else(|| MessageError::Malformed(format!("field without `=`: {item}")))?;
                pairs.push((k, v));
            }
        }
        Ok(Self { pairs })
    }

    fn opt(&self, name: &'static str) -> Option<String> {
        self.pairs
            .iter()
            .find(|(k, _)| *k == name)
            .map(|(_, v)| unescape(v))
    }

    fn get(&self, name: &'static str) -> Result<String, MessageError> {
        self.opt(name).ok_or(MessageError::MissingField(name))
    }

    fn parse<T: FromStr>(&self, name: &'static str) -> Result<T, MessageError>
    where
        T::Err: fmt::Display,
    {
        self.get(name)?
            .parse()
            .map_err(|e: T::Err| MessageError::BadField {
                field: name,
                reason: e.to_string(),
            })
    }
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '%' => out.push_str("%25"),
            '|' => out.push_str("%7C"),
            ';' => out.push_str("%3B"),
            '=' => out.push_str("%3D"),
            '\n' => out.push_str("%0A"),
            '\r' => out.push_str("%0D"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut rest = s;
    while let Some(pos) = rest.find('%') {
        out.push_str(&rest[..pos]);
        let code = rest.get(pos + 1..pos + 3);
        match code.and_then(|c| u8::from_str_radix(c, 16).ok()) {
            Some(b) if b.is_ascii() => {
                out.push(b as char);
                rest = &rest[pos + 3..];
            }
            _ => {
                out.push('%');
                rest = &rest[pos + 1..];
            }
        }
    }
    out.push_str(rest);
    out
}

fn join_nodes(nodes: &[NodeId]) -> String {
    nodes
        .iter()
        .map(NodeId::as_str)
        .collect::<Vec<_>>()
        .join(",")
}

fn split_nodes(s: &str) -> Result<Vec<NodeId>, MessageError> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|n| {
            NodeId::new(n).map_err(|e| MessageError::BadField {
                field: "eligible",
                reason: e.to_string(),
            })
        })
        .collect()
}

fn block_json(block: &Block) -> String {
    serde_json::to_string(block).expect("block serializes")
}

fn parse_block(s: &str) -> Result<Block, MessageError> {
    serde_json::from_str(s).map_err(|e| MessageError::BadField {
        field: "block",
        reason: e.to_string(),
    })
}

impl FromStr for CycleOutcome {
    type Err = MessageError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "committed" {
            return Ok(CycleOutcome::Committed);
        }
        let reason = s
            .strip_prefix("aborted:")
            .ok_or_else(|| MessageError::BadField {
                field: "outcome",
                reason: s.to_string(),
            })?;
        reason
            .parse::<AbortReason>()
            .map(CycleOutcome::Aborted)
            .map_err(|reason| MessageError::BadField {
                field: "outcome",
                reason,
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ledger::{Chain, HashMode, MeasurementRecord, Quantity, Value};
    use crate::nodes::Phase;

    fn n(s: &str) -> NodeId {
        NodeId::new(s).unwrap()
    }

    fn set() -> MeasurementSet {
        MeasurementSet::new(
            n("R1"),
            4,
            vec![
                MeasurementRecord::new(1, Quantity::Vm, 11, Value::from_f64(1.0)),
                MeasurementRecord::new(1, Quantity::P, 13, Value::from_f64(-71.25)),
            ],
        )
        .unwrap()
    }

    fn block() -> Block {
        Chain::new(HashMode::Single)
            .next_block(vec![set()], 30)
            .unwrap()
    }

    fn samples() -> Vec<Body> {
        vec![
            Body::DataRequest { stamp: 15000 },
            Body::DataResponse { set: set() },
            Body::ChainCheck {
                tip: "ab".repeat(32),
                length: 3,
            },
            Body::ChainCheckReply { matches: false },
            Body::Challenge {
                value: 7,
                eligible: vec![n("R1"), n("R3")],
            },
            Body::Challenge {
                value: 7,
                eligible: vec![],
            },
            Body::CountShare {
                node: n("R2"),
                digest: "cd".repeat(32),
                count: 4,
            },
            Body::Vote {
                choice: VoteChoice::Node(n("R2")),
                tally: "ef".repeat(32),
            },
            Body::Vote {
                choice: VoteChoice::Random,
                tally: String::new(),
            },
            Body::Vote {
                choice: VoteChoice::Reject,
                tally: "00".into(),
            },
            Body::MiningAssign {
                miner: n("R4"),
                stamp: 0,
                payload: vec![0, 1, 2, 255],
            },
            Body::NewBlock { block: block() },
            Body::VerifyRequest { block: block() },
            Body::VerifyReply { verdict: Ok(()) },
            Body::VerifyReply {
                verdict: Err(VerifyFault::PayloadMismatch),
            },
            Body::AddBlock {
                hash: "12".repeat(32),
            },
            Body::AddAck { ok: true },
            Body::ChainUpdate {
                outcome: CycleOutcome::Committed,
                length: 2,
                tip: "34".repeat(32),
                miner: Some(n("R1")),
                block: Some(block()),
            },
            Body::ChainUpdate {
                outcome: CycleOutcome::Aborted(AbortReason::Timeout {
                    phase: Phase::Acquiring,
                    missing: vec![n("R2"), n("R3")],
                }),
                length: 1,
                tip: "34".repeat(32),
                miner: None,
                block: None,
            },
        ]
    }

    #[test]
    fn every_kind_round_trips() {
        for body in samples() {
            let msg = ProtocolMessage::new(n("DA"), 9, body);
            let wire = msg.to_message();
            assert_eq!(wire.direction, msg.kind().direction());
            assert_eq!(ProtocolMessage::from_message(&wire).unwrap(), msg);
        }
    }

    #[test]
    fn text_layout() {
        let msg = ProtocolMessage::new(
            n("R2"),
            3,
            Body::CountShare {
                node: n("R2"),
                digest: "abc".into(),
                count: 1,
            },
        );
        assert_eq!(msg.to_text(), "CountShare|R2|3|node=R2;digest=abc;count=1");
        let data = ProtocolMessage::new(n("R1"), 4, Body::DataResponse { set: set() });
        assert_eq!(
            data.to_text(),
            "DataResponse|R1|4|set=R1:4%7C1,Vm,11,1.000000%3B1,P,13,-71.250000"
        );
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(
            ProtocolMessage::parse_text("Nope|R1|1|"),
            Err(MessageError::UnknownKind(_))
        ));
        assert!(ProtocolMessage::parse_text("Vote|R1|x|choice=R1;tally=").is_err());
        assert!(matches!(
            ProtocolMessage::parse_text("AddAck|R1|1|"),
            Err(MessageError::MissingField("ok"))
        ));
        assert!(ProtocolMessage::parse_text("AddAck|R1").is_err());
        let wrong_dir = Message::new(Direction::Request, "AddAck|R1|1|ok=true");
        assert!(ProtocolMessage::from_message(&wrong_dir).is_err());
        let not_utf8 = Message::new(Direction::Response, vec![0xff, 0xfe]);
        assert_eq!(
            ProtocolMessage::from_message(&not_utf8),
            Err(MessageError::NotUtf8)
        );
    }

    #[test]
    fn escaping_round_trip() {
        for s in ["", "a|b;c=d%e", "%%7C", "line\nbreak\r", "100%", "%zz"] {
            assert_eq!(unescape(&escape(s)), s);
        }
    }
}
