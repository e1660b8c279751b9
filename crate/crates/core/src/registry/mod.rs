//! Versioned model lineage with content-addressed, bit-exact checkpoints.

pub mod blobs;
pub mod checkpoint;
pub mod tree;

pub use blobs::{digest, is_valid_hash, BlobStore};
pub use checkpoint::{Checkpoint, CheckpointError, FORMAT_VERSION};
pub use tree::{ModelNode, ModelRegistry, NodeId, NodeKind};
