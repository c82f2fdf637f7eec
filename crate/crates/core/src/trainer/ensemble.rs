use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-sample exponential moving average of network predictions.
///
/// `z` accumulates `Z <- alpha Z + (1 - alpha) z_epoch` once per epoch and the
/// training targets are the startup-corrected `Z / (1 - alpha^t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleState {
    pub alpha: f64,
    pub classes: usize,
    /// Completed updates.
    pub t: u32,
    z: Vec<f64>,
    z_epoch: Vec<f64>,
    filled: Vec<bool>,
}

impl EnsembleState {
    pub fn new(samples: usize, classes: usize, alpha: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&alpha) {
            return Err(Error::InvalidConfig(format!("alpha must lie in [0, 1), got {alpha}")));
        }
        if classes == 0 {
            return Err(Error::InvalidConfig("ensemble needs at least one class".into()));
        }
        Ok(Self {
            alpha,
            classes,
            t: 0,
            z: vec![0.0; samples * classes],
            z_epoch: vec![0.0; samples * classes],
            filled: vec![false; samples],
        })
    }

    pub fn samples(&self) -> usize {
        self.filled.len()
    }

    /// The accumulator `Z`, `[N, C]` row-major.
    pub fn accumulator(&self) -> &[f64] {
        &self.z
    }

    /// Stores this epoch's prediction for sample `index`.
    pub fn record(&mut self, index: usize, prediction: &[f64]) -> Result<()> {
        if prediction.len() != self.classes {
            return Err(Error::ShapeMismatch {
                what: "ensemble prediction row",
                expected: self.classes,
                actual: prediction.len(),
            });
        }
        if index >= self.samples() {
            return Err(Error::ShapeMismatch {
                what: "ensemble sample index",
                expected: self.samples(),
                actual: index,
            });
        }
        let c = self.classes;
        self.z_epoch[index * c..(index + 1) * c].copy_from_slice(prediction);
        self.filled[index] = true;
        Ok(())
    }

    /// Folds the epoch buffer into `Z` and clears it.
    pub fn update(&mut self) -> Result<()> {
        let missing = self.filled.iter().filter(|&&f| !f).count();
        if missing > 0 {
            return Err(Error::IncompleteEpochBuffer { missing });
        }
        let a = self.alpha;
        for (z, &p) in self.z.iter_mut().zip(&self.z_epoch) {
            *z = a * *z + (1.0 - a) * p;
        }
        self.z_epoch.fill(0.0);
        self.filled.fill(false);
        self.t += 1;
        Ok(())
    }

    /// `Z / (1 - alpha^t)`; undefined before the first update.
    pub fn bias_corrected_targets(&self) -> Result<Vec<f64>> {
        if self.t == 0 {
            return Err(Error::ZeroUpdates);
        }
        let divisor = 1.0 - self.alpha.powi(self.t as i32);
        Ok(self.z.iter().map(|z| z / divisor).collect())
    }

    /// Targets for the coming epoch: all zeros before any update, otherwise
    /// the bias-corrected ensemble.
    pub fn targets_for_next_epoch(&self) -> Vec<f64> {
        if self.t == 0 {
            vec![0.0; self.z.len()]
        } else {
            self.bias_corrected_targets().expect("t >= 1")
        }
    }
}
