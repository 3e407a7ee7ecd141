//! Epoch-indexed learning-rate decay, gradient-accumulation intervals and
//! early stopping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Step decay: the base rate is multiplied by `factor` at each milestone
/// epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub factor: f64,
    pub milestones: Vec<usize>,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            base_lr: 2e-4,
            factor: 0.25,
            milestones: vec![35, 45],
        }
    }
}

impl LrSchedule {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.milestones.iter().filter(|m| epoch >= **m).count();
        (0..decays).fold(self.base_lr, |lr, _| lr * self.factor)
    }
}

/// Optimizer-step interval per epoch. An entry `(epoch, steps)` applies
/// from `epoch` until the next entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccumulationSchedule {
    pub entries: Vec<(usize, usize)>,
}

impl Default for AccumulationSchedule {
    fn default() -> Self {
        Self {
            entries: vec![(0, 32), (4, 16), (8, 8)],
        }
    }
}

impl AccumulationSchedule {
    pub fn constant(steps: usize) -> Self {
        Self {
            entries: vec![(0, steps)],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.first().map(|e| e.0) != Some(0) {
            return Err(Error::InvalidArgument(
                "accumulation schedule must start at epoch 0".into(),
            ));
        }
        if self.entries.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::InvalidArgument(
                "accumulation epochs must be ascending".into(),
            ));
        }
        if self.entries.iter().any(|e| e.1 == 0) {
            return Err(Error::InvalidArgument(
                "accumulation interval must be >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn interval_at(&self, epoch: usize) -> usize {
        self.entries
            .iter()
            .take_while(|(e, _)| *e <= epoch)
            .last()
            .map(|(_, s)| *s)
            .unwrap_or(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Tracks the best validation metric (lower is better). Only a strictly
/// lower value counts as an improvement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<f64>,
    pub best_epoch: Option<usize>,
    pub epochs_since_improvement: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Result<Self> {
        if patience == 0 {
            return Err(Error::InvalidArgument("patience must be >= 1".into()));
        }
        Ok(Self {
            patience,
            best: None,
            best_epoch: None,
            epochs_since_improvement: 0,
        })
    }

    pub fn observe(&mut self, epoch: usize, metric: f64) -> StopDecision {
        if self.best.is_none_or(|b| metric < b) {
            self.best = Some(metric);
            self.best_epoch = Some(epoch);
            self.epochs_since_improvement = 0;
            return StopDecision::Improved;
        }
        self.epochs_since_improvement += 1;
        if self.epochs_since_improvement >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }
}
