//! Semi-supervised objective: masked cross-entropy on labeled samples plus a
//! ramped consistency penalty towards ensemble targets.
//!
//! Both terms take softmax probabilities `z` (`[B, C]` row-major). The
//! gradients returned here are with respect to `z`; the targets are constants.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

/// Floor added inside the logarithm of the cross-entropy.
pub const LOG_FLOOR: f64 = 1e-12;

/// `true` where the batch sample belongs to the labeled set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledMask(pub Vec<bool>);

impl LabeledMask {
    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&m| m).count()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn check_len(what: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::ShapeMismatch { what, expected, actual })
    }
}

fn check_inputs<S>(z: &[S], labels: &[u8], mask: &LabeledMask, classes: usize) -> Result<usize> {
    if classes == 0 || !z.len().is_multiple_of(classes) {
        return Err(Error::ShapeMismatch {
            what: "probabilities",
            expected: classes,
            actual: z.len(),
        });
    }
    let batch = z.len() / classes;
    check_len("labels", batch, labels.len())?;
    check_len("labeled mask", batch, mask.len())?;
    if let Some((index, &label)) = labels
        .iter()
        .zip(&mask.0)
        .enumerate()
        .find(|(_, (&y, &m))| m && y as usize >= classes)
        .map(|(i, (y, _))| (i, y))
    {
        return Err(Error::LabelOutOfRange {
            index,
            label,
            num_classes: classes,
        });
    }
    Ok(batch)
}

/// Mean of `-ln z[i][y_i]` over the labeled samples of the batch; 0 when the
/// batch holds no labeled sample.
pub fn masked_cross_entropy<S: Real>(z: &[S], labels: &[u8], mask: &LabeledMask, classes: usize) -> Result<f64> {
    check_inputs(z, labels, mask, classes)?;
    let labeled = mask.count();
    if labeled == 0 {
        return Ok(0.0);
    }
    let sum: f64 = z
        .chunks_exact(classes)
        .zip(labels)
        .zip(&mask.0)
        .filter(|(_, &m)| m)
        .map(|((row, &y), _)| -(row[y as usize] + S::from_f64(LOG_FLOOR)).as_f64().ln())
        .sum();
    Ok(sum / labeled as f64)
}

pub fn masked_cross_entropy_grad<S: Real>(
    z: &[S],
    labels: &[u8],
    mask: &LabeledMask,
    classes: usize,
) -> Result<Vec<S>> {
    check_inputs(z, labels, mask, classes)?;
    let mut grad = vec![S::zero(); z.len()];
    let labeled = mask.count();
    if labeled == 0 {
        return Ok(grad);
    }
    let scale = S::from_f64(1.0 / labeled as f64);
    let floor = S::from_f64(LOG_FLOOR);
    for (i, (&y, &m)) in labels.iter().zip(&mask.0).enumerate() {
        if m {
            let idx = i * classes + y as usize;
            grad[idx] = -scale / (z[idx] + floor);
        }
    }
    Ok(grad)
}

/// `sum ||z_i - target_i||^2 / (C * B)` over every sample of the batch.
pub fn consistency_mse<S: Real>(z: &[S], targets: &[S], classes: usize) -> Result<f64> {
    check_len("consistency targets", z.len(), targets.len())?;
    if classes == 0 || !z.len().is_multiple_of(classes) {
        return Err(Error::ShapeMismatch {
            what: "probabilities",
            expected: classes,
            actual: z.len(),
        });
    }
    if z.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = z
        .iter()
        .zip(targets)
        .map(|(&a, &b)| {
            let d = a.as_f64() - b.as_f64();
            d * d
        })
        .sum();
    // B * C == z.len()
    Ok(sum / z.len() as f64)
}

pub fn consistency_mse_grad<S: Real>(z: &[S], targets: &[S]) -> Result<Vec<S>> {
    check_len("consistency targets", z.len(), targets.len())?;
    let scale = S::from_f64(2.0 / z.len().max(1) as f64);
    Ok(z.iter().zip(targets).map(|(&a, &b)| scale * (a - b)).collect())
}

/// Gaussian ramp-up of the consistency weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RampSchedule {
    pub max_weight: f64,
    pub ramp_length: usize,
    pub labeled_fraction: f64,
}

impl RampSchedule {
    pub fn new(max_weight: f64, ramp_length: usize, labeled_fraction: f64) -> Result<Self> {
        if !(max_weight >= 0.0) || ramp_length == 0 || !(0.0..=1.0).contains(&labeled_fraction) {
            return Err(Error::InvalidConfig(format!(
                "ramp schedule needs max_weight >= 0, ramp_length >= 1, labeled fraction in [0,1]; \
                 got {max_weight}, {ramp_length}, {labeled_fraction}"
            )));
        }
        Ok(Self {
            max_weight,
            ramp_length,
            labeled_fraction,
        })
    }

    /// `w(t) = max_weight * labeled_fraction * exp(-5 (1 - min(t, T)/T)^2)`,
    /// with `t` the zero-based epoch.
    pub fn weight(&self, epoch: usize) -> f64 {
        let progress = epoch.min(self.ramp_length) as f64 / self.ramp_length as f64;
        let ramp = if progress >= 1.0 {
            1.0
        } else {
            (-5.0 * (1.0 - progress).powi(2)).exp()
        };
        self.max_weight * self.labeled_fraction * ramp
    }
}

pub fn ramp_weight(epoch: usize, schedule: &RampSchedule) -> f64 {
    schedule.weight(epoch)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub supervised: f64,
    pub unsupervised: f64,
    pub weight: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(supervised: f64, unsupervised: f64, weight: f64) -> Self {
        Self {
            supervised,
            unsupervised,
            weight,
            total: supervised + weight * unsupervised,
        }
    }
}

/// Combined loss at epoch `epoch` with the schedule's weight.
pub fn combined_loss<S: Real>(
    z: &[S],
    labels: &[u8],
    mask: &LabeledMask,
    targets: &[S],
    epoch: usize,
    schedule: &RampSchedule,
    classes: usize,
) -> Result<LossBreakdown> {
    weighted_loss(z, labels, mask, targets, schedule.weight(epoch), classes)
}

/// Combined loss for an explicit consistency weight.
pub fn weighted_loss<S: Real>(
    z: &[S],
    labels: &[u8],
    mask: &LabeledMask,
    targets: &[S],
    weight: f64,
    classes: usize,
) -> Result<LossBreakdown> {
    let supervised = masked_cross_entropy(z, labels, mask, classes)?;
    let unsupervised = consistency_mse(z, targets, classes)?;
    Ok(LossBreakdown::new(supervised, unsupervised, weight))
}

/// Loss and its gradient with respect to `z` (targets held constant).
pub fn weighted_loss_with_grad<S: Real>(
    z: &[S],
    labels: &[u8],
    mask: &LabeledMask,
    targets: &[S],
    weight: f64,
    classes: usize,
) -> Result<(LossBreakdown, Vec<S>)> {
    let breakdown = weighted_loss(z, labels, mask, targets, weight, classes)?;
    let mut grad = masked_cross_entropy_grad(z, labels, mask, classes)?;
    if weight != 0.0 {
        let w = S::from_f64(weight);
        for (g, u) in grad.iter_mut().zip(consistency_mse_grad(z, targets)?) {
            *g = *g + w * u;
        }
    }
    Ok((breakdown, grad))
}
