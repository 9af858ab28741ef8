//! Contiguous train / validation / test ranges in whole weeks.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::STEPS_PER_WEEK;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub train_weeks: usize,
    pub val_weeks: usize,
    pub test_weeks: usize,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_weeks: 20,
            val_weeks: 1,
            test_weeks: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

impl SplitSpec {
    pub fn weeks(&self) -> usize {
        self.train_weeks + self.val_weeks + self.test_weeks
    }

    /// Step ranges from the start of a panel with `steps` steps.
    pub fn ranges(&self, steps: usize) -> Result<Splits> {
        if self.train_weeks == 0 || self.val_weeks == 0 || self.test_weeks == 0 {
            return Err(Error::Config("every split needs at least one week".into()));
        }
        let need = self.weeks() * STEPS_PER_WEEK;
        if steps < need {
            return Err(Error::Config(format!("splits need {need} steps but the panel has {steps}")));
        }
        let a = self.train_weeks * STEPS_PER_WEEK;
        let b = a + self.val_weeks * STEPS_PER_WEEK;
        Ok(Splits {
            train: 0..a,
            val: a..b,
            test: b..need,
        })
    }
}

/// Origins `o` in `range` with `o ≥ lookback`, `o + horizon ≤ range.end` and
/// `o` on the `stride` grid.
pub fn origins(range: Range<usize>, lookback: usize, horizon: usize, stride: usize) -> Vec<usize> {
    let first = range.start.max(lookback).next_multiple_of(stride.max(1));
    (first..=range.end.saturating_sub(horizon)).step_by(stride.max(1)).collect()
}
