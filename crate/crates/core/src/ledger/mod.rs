//! Blocks, hashing, Merkle roots and chain validation.

mod block;
mod hash;
mod measurement;

pub use block::{
    block_hash, check_contents, check_successor, create_block, payload_root, validate_chain, Block,
    BlockError, BlockHeader, Chain, Violation, ViolationKind, GENESIS_SEED,
};
pub use hash::{
    double_sha256_hex, hash_with, is_digest, merkle_root, sha256_hex, HashMode, MerkleError,
    ZERO_HASH,
};
pub use measurement::{
    decode_payload, encode_payload, MeasurementError, MeasurementRecord, MeasurementSet, Quantity,
    Value,
};
