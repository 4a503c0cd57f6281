//! Persistence: checkpoint format, run configuration, and report files.

mod checkpoint;
mod config;
mod report;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, CHECKPOINT_VERSION};
pub use config::RunConfig;
pub use report::{write_report, ClassRoc};
