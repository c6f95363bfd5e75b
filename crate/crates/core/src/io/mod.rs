//! File formats: tensor containers, dataset manifests, checkpoints, graymaps.
//!
//! Everything here is bit-specified so that identical inputs produce
//! byte-identical files: fixed little-endian layouts, deterministic JSON
//! field order, and no timestamps.

pub mod checkpoint;
pub mod ct01;
pub mod manifest;
pub mod pgm;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointParam};
pub use ct01::{read_ct01, write_ct01};
pub use manifest::{load_manifest, save_manifest, ManifestEntry};
pub use pgm::write_pgm;
