//! Two-stage unfreezing plan and early stopping.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    A,
    B,
}

/// Name prefixes frozen during stage A: the token embedding, every transformer
/// block with its adapters and norms, and the reverse-pathway projections and gates.
pub const STAGE_A_FROZEN: [&str; 3] = ["sam.patch_embed.", "sam.block", "bridge.deep"];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StagePlan {
    pub stage_a_epochs: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
}

impl Default for StagePlan {
    fn default() -> Self {
        Self {
            stage_a_epochs: 30,
            max_epochs: 200,
            patience: 20,
            min_delta: 1e-6,
        }
    }
}

impl StagePlan {
    pub fn stage(&self, epoch: usize) -> Stage {
        if epoch < self.stage_a_epochs {
            Stage::A
        } else {
            Stage::B
        }
    }

    pub fn frozen_in_stage_a(name: &str) -> bool {
        STAGE_A_FROZEN.iter().any(|p| name.starts_with(p))
    }

    pub fn trainable(&self, name: &str, epoch: usize) -> bool {
        self.stage(epoch) == Stage::B || !Self::frozen_in_stage_a(name)
    }

    /// The reverse pathway runs only once its gates can learn.
    pub fn reverse_enabled(&self, epoch: usize) -> bool {
        self.stage(epoch) == Stage::B
    }

    /// Names from `names` trainable at `epoch`.
    pub fn trainable_set<'a>(&self, names: impl IntoIterator<Item = &'a str>, epoch: usize) -> Vec<&'a str> {
        names.into_iter().filter(|n| self.trainable(n, epoch)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    Continue,
    Stop,
}

/// Stops after `patience` consecutive epochs without an improvement larger than `min_delta`.
#[derive(Clone, Debug)]
pub struct EarlyStopper {
    pub patience: usize,
    pub min_delta: f64,
    best: f64,
    stale: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        Self {
            patience,
            min_delta,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    /// Records one validation loss; returns whether it improved on the best so far.
    pub fn improved(&mut self, loss: f64) -> bool {
        if loss < self.best - self.min_delta {
            self.best = loss;
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    pub fn observe(&mut self, loss: f64) -> Decision {
        self.improved(loss);
        self.decision()
    }

    pub fn decision(&self) -> Decision {
        if self.stale >= self.patience {
            Decision::Stop
        } else {
            Decision::Continue
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn stale_epochs(&self) -> usize {
        self.stale
    }
}
