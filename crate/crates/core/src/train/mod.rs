//! Two-stage training: optimizer, unfreezing plan, loop and checkpoints.

pub mod checkpoint;
pub mod optim;
pub mod schedule;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use optim::{AdamW, AdamWConfig, OptimizerState};
pub use schedule::{Decision, EarlyStopper, Stage, StagePlan};
pub use trainer::{train, EpochRecord, Sample, TrainConfig, TrainOutcome, Trainer};

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Appends one JSON object per record.
pub fn append_log(path: &Path, records: &[EpochRecord]) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::format(path, e.to_string()))?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
