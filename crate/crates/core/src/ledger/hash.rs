use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Hex encoded all-zero digest, used as the genesis parent.
pub const ZERO_HASH: &str = "0000000000000000000000000000000000000000000000000000000000000000";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HashMode {
    #[default]
    Single,
    Double,
}

impl std::str::FromStr for HashMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "single" => Ok(HashMode::Single),
            "double" => Ok(HashMode::Double),
            other => Err(format!(
                "unknown hash mode `{other}` (expected single|double)"
            )),
        }
    }
}

impl std::fmt::Display for HashMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            HashMode::Single => "single",
            HashMode::Double => "double",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MerkleError {
    #[error("merkle tree needs at least one leaf")]
    EmptyLeaves,
}

pub fn sha256_hex(data: &[u8]) -> String {
    hex::encode(Sha256::digest(data))
}

/// SHA-256 over the raw 32 digest bytes of SHA-256(data).
pub fn double_sha256_hex(data: &[u8]) -> String {
    hex::encode(Sha256::digest(Sha256::digest(data)))
}

pub fn hash_with(mode: HashMode, data: &[u8]) -> String {
    match mode {
        HashMode::Single => sha256_hex(data),
        HashMode::Double => double_sha256_hex(data),
    }
}

/// True for a 64 character lowercase hex string.
pub fn is_digest(s: &str) -> bool {
    s.len() == 64 && s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'))
}

/// Merkle root over the leaves.
///
/// Leaves are hashed with SHA-256; each parent is the SHA-256 of the two
/// child hex strings concatenated. An odd node at any level is paired with
/// itself.
pub fn merkle_root<L: AsRef<[u8]>>(leaves: &[L]) -> Result<String, MerkleError> {
    if leaves.is_empty() {
        return Err(MerkleError::EmptyLeaves);
    }
    let mut level: Vec<String> = leaves.iter().map(|l| sha256_hex(l.as_ref())).collect();
    let mut joined = String::with_capacity(128);
    while level.len() > 1 {
        level = level
            .chunks(2)
            .map(|pair| {
                let left = &pair[0];
                let right = pair.get(1).unwrap_or(left);
                joined.clear();
                joined.push_str(left);
                joined.push_str(right);
                sha256_hex(joined.as_bytes())
            })
            .collect();
    }
    Ok(level.pop().expect("non-empty level"))
}
