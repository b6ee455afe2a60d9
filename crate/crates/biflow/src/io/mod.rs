//! Configuration parsing and checkpoint persistence.

pub mod checkpoint;
pub mod config;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointKind, MAGIC, VERSION};
pub use config::{parse_config, ExperimentConfig};
