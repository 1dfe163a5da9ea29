//! File formats: checkpoints, calibration JSONL, run configuration, reports.

pub mod checkpoint;
pub mod config;
pub mod jsonl;
pub mod report;

pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use config::RunConfig;
pub use jsonl::{read_calibration, write_calibration};
