use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::hash::{hash_with, is_digest, merkle_root, sha256_hex, HashMode, ZERO_HASH};
use super::measurement::MeasurementSet;

/// Merkle-root seed string of the genesis block.
pub const GENESIS_SEED: &str = "GENESIS";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BlockError {
    #[error("block payload is empty")]
    EmptyPayload,
    #[error("timestamp {timestamp} precedes parent timestamp {parent}")]
    TimestampRegression { parent: u64, timestamp: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BlockHeader {
    pub index: u64,
    pub timestamp: u64,
    pub previous_hash: String,
    pub merkle_root: String,
    pub nonce: u64,
}

impl BlockHeader {
    /// `index|timestamp|previous_hash|merkle_root|nonce`
    pub fn canonical(&self) -> String {
        format!(
            "{}|{}|{}|{}|{}",
            self.index, self.timestamp, self.previous_hash, self.merkle_root, self.nonce
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Block {
    #[serde(flatten)]
    pub header: BlockHeader,
    pub current_hash: String,
    pub payload: Vec<MeasurementSet>,
}

impl Block {
    pub fn genesis(mode: HashMode) -> Self {
        let header = BlockHeader {
            index: 0,
            timestamp: 0,
            previous_hash: ZERO_HASH.to_string(),
            merkle_root: sha256_hex(GENESIS_SEED.as_bytes()),
            nonce: 0,
        };
        let current_hash = block_hash(&header, mode);
        Block {
            header,
            current_hash,
            payload: Vec::new(),
        }
    }

    pub fn index(&self) -> u64 {
        self.header.index
    }
}

pub fn block_hash(header: &BlockHeader, mode: HashMode) -> String {
    hash_with(mode, header.canonical().as_bytes())
}

/// Merkle root over the canonical form of each set, `None` for an empty payload.
pub fn payload_root(payload: &[MeasurementSet]) -> Option<String> {
    let leaves: Vec<String> = payload.iter().map(MeasurementSet::canonical).collect();
    merkle_root(&leaves).ok()
}

pub fn create_block(
    parent: &Block,
    payload: Vec<MeasurementSet>,
    timestamp: u64,
    mode: HashMode,
) -> Result<Block, BlockError> {
    let merkle_root = payload_root(&payload).ok_or(BlockError::EmptyPayload)?;
    if timestamp < parent.header.timestamp {
        return Err(BlockError::TimestampRegression {
            parent: parent.header.timestamp,
            timestamp,
        });
    }
    let header = BlockHeader {
        index: parent.header.index + 1,
        timestamp,
        previous_hash: parent.current_hash.clone(),
        merkle_root,
        nonce: 0,
    };
    let current_hash = block_hash(&header, mode);
    Ok(Block {
        header,
        current_hash,
        payload,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ViolationKind {
    BadLink,
    BadIndex,
    BadRoot,
    BadHash,
    BadTimestamp,
}

impl std::fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        std::fmt::Debug::fmt(self, f)
    }
}

impl std::str::FromStr for ViolationKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "BadLink" => ViolationKind::BadLink,
            "BadIndex" => ViolationKind::BadIndex,
            "BadRoot" => ViolationKind::BadRoot,
            "BadHash" => ViolationKind::BadHash,
            "BadTimestamp" => ViolationKind::BadTimestamp,
            other => return Err(format!("unknown violation `{other}`")),
        })
    }
}

/// A failed check at a given position in the chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Violation {
    pub position: usize,
    pub kind: ViolationKind,
}

/// Checks that `block`'s own contents are self-consistent: root and hash.
pub fn check_contents(block: &Block, mode: HashMode) -> Vec<ViolationKind> {
    let mut out = Vec::new();
    let root_ok = match payload_root(&block.payload) {
        Some(root) => root == block.header.merkle_root,
        None => false,
    };
    if !root_ok {
        out.push(ViolationKind::BadRoot);
    }
    if !is_digest(&block.current_hash) || block_hash(&block.header, mode) != block.current_hash {
        out.push(ViolationKind::BadHash);
    }
    out
}

/// Checks that `block` may directly follow `parent`, and that its contents are
/// consistent.
pub fn check_successor(parent: &Block, block: &Block, mode: HashMode) -> Vec<ViolationKind> {
    let mut out = Vec::new();
    if block.header.previous_hash != parent.current_hash {
        out.push(ViolationKind::BadLink);
    }
    if block.header.index != parent.header.index + 1 {
        out.push(ViolationKind::BadIndex);
    }
    out.extend(check_contents(block, mode));
    if block.header.timestamp < parent.header.timestamp {
        out.push(ViolationKind::BadTimestamp);
    }
    out
}

fn check_genesis(block: &Block, mode: HashMode) -> Vec<ViolationKind> {
    let expected = Block::genesis(mode);
    let mut out = Vec::new();
    if block.header.previous_hash != expected.header.previous_hash {
        out.push(ViolationKind::BadLink);
    }
    if block.header.index != 0 {
        out.push(ViolationKind::BadIndex);
    }
    if block.header.merkle_root != expected.header.merkle_root || !block.payload.is_empty() {
        out.push(ViolationKind::BadRoot);
    }
    if block.current_hash != block_hash(&block.header, mode) {
        out.push(ViolationKind::BadHash);
    }
    out
}

/// An append-only sequence of blocks starting from the fixed genesis block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chain {
    pub hash_mode: HashMode,
    pub blocks: Vec<Block>,
}

impl Chain {
    pub fn new(hash_mode: HashMode) -> Self {
        Self {
            hash_mode,
            blocks: vec![Block::genesis(hash_mode)],
        }
    }

    pub fn tip(&self) -> &Block {
        self.blocks.last().expect("chain always holds genesis")
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Builds the next block on the current tip.
    pub fn next_block(
        &self,
        payload: Vec<MeasurementSet>,
        timestamp: u64,
    ) -> Result<Block, BlockError> {
        create_block(self.tip(), payload, timestamp, self.hash_mode)
    }

    /// Appends `block` if it is a valid successor of the tip.
    pub fn append(&mut self, block: Block) -> Result<(), Vec<ViolationKind>> {
        let problems = check_successor(self.tip(), &block, self.hash_mode);
        if problems.is_empty() {
            self.blocks.push(block);
            Ok(())
        } else {
            Err(problems)
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("chain serializes")
    }

    pub fn from_json(s: &str) -> serde_json::Result<Self> {
        serde_json::from_str(s)
    }
}

/// Re-derives every root, hash and link. Violations are returned sorted by
/// position.
pub fn validate_chain(chain: &Chain) -> Result<(), Vec<Violation>> {
    let mode = chain.hash_mode;
    let mut violations = Vec::new();
    let mut push = |position: usize, kinds: Vec<ViolationKind>| {
        violations.extend(kinds.into_iter().map(|kind| Violation { position, kind }));
    };
    match chain.blocks.first() {
        Some(genesis) => push(0, check_genesis(genesis, mode)),
        None => push(0, vec![ViolationKind::BadLink]),
    }
    for (i, pair) in chain.blocks.windows(2).enumerate() {
        push(i + 1, check_successor(&pair[0], &pair[1], mode));
    }
    if violations.is_empty() {
        Ok(())
    } else {
        violations.sort();
        Err(violations)
    }
}
