//! Central-difference verification of the analytic gradients, run in double
//! precision.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::layers::softmax_backward;
use super::network::{Gradients, Mode, Network, TENSOR_NAMES};
use crate::error::Result;
use crate::objectives::{weighted_loss, weighted_loss_with_grad, LabeledMask};

/// A scalar loss of the network parameters with an analytic gradient.
pub trait Objective {
    fn loss(&self, net: &Network<f64>) -> Result<f64>;
    fn gradients(&self, net: &Network<f64>) -> Result<Gradients<f64>>;
}

/// The combined semi-supervised loss on a fixed batch. Dropout masks are
/// re-drawn from `dropout_seed` on every evaluation so the loss is a
/// deterministic function of the parameters.
#[derive(Debug, Clone)]
pub struct BatchObjective {
    pub inputs: Vec<f64>,
    pub labels: Vec<u8>,
    pub mask: LabeledMask,
    pub targets: Vec<f64>,
    pub weight: f64,
    pub dropout_seed: u64,
}

impl Objective for BatchObjective {
    fn loss(&self, net: &Network<f64>) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.dropout_seed);
        let (probs, _) = net.forward(&self.inputs, Mode::Train, &mut rng)?;
        let b = weighted_loss(&probs, &self.labels, &self.mask, &self.targets, self.weight, net.cfg.num_classes)?;
        Ok(b.total)
    }

    fn gradients(&self, net: &Network<f64>) -> Result<Gradients<f64>> {
        let classes = net.cfg.num_classes;
        let mut rng = ChaCha8Rng::seed_from_u64(self.dropout_seed);
        let (probs, cache) = net.forward(&self.inputs, Mode::Train, &mut rng)?;
        let cache = cache.expect("train-mode forward keeps its cache");
        let (_, grad_probs) =
            weighted_loss_with_grad(&probs, &self.labels, &self.mask, &self.targets, self.weight, classes)?;
        let grad_logits = softmax_backward(&probs, &grad_probs, classes);
        net.backward(&cache, &grad_logits)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Check at most this many randomly chosen entries per tensor.
    pub max_entries_per_tensor: Option<usize>,
    pub sample_seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            max_entries_per_tensor: None,
            sample_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorCheck {
    pub name: &'static str,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerCheck {
    pub layer: &'static str,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub tensors: Vec<TensorCheck>,
    pub layers: Vec<LayerCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.layers.iter().all(|l| l.passed)
    }

    pub fn layer(&self, name: &str) -> Option<&LayerCheck> {
        self.layers.iter().find(|l| l.layer == name)
    }
}

/// `|a - n| / max(|a|, |n|)`, defined as 0 when both are below 1e-12.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    if analytic.abs() < 1e-12 && numeric.abs() < 1e-12 {
        0.0
    } else {
        (analytic - numeric).abs() / analytic.abs().max(numeric.abs())
    }
}

/// Compares `analytic` against central differences of `objective` entry by
/// entry and reports the worst relative error per tensor and per layer.
pub fn finite_diff_check<O: Objective + ?Sized>(
    net: &Network<f64>,
    objective: &O,
    analytic: &Gradients<f64>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut probe = net.clone();
    let mut sampler = ChaCha8Rng::seed_from_u64(opts.sample_seed);
    let mut tensors = Vec::with_capacity(TENSOR_NAMES.len());

    for (t, (&name, grad)) in TENSOR_NAMES.iter().zip(analytic.tensors()).enumerate() {
        let len = grad.len();
        let entries: Vec<usize> = match opts.max_entries_per_tensor {
            Some(cap) if cap < len => {
                let mut idx = sample(&mut sampler, len, cap).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..len).collect(),
        };
        let mut report = TensorCheck {
            name,
            checked: entries.len(),
            max_rel_error: 0.0,
            worst_index: 0,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
        };
        for i in entries {
            let original = probe.tensors()[t][i];
            probe.tensors_mut()[t][i] = original + opts.step;
            let plus = objective.loss(&probe)?;
            probe.tensors_mut()[t][i] = original - opts.step;
            let minus = objective.loss(&probe)?;
            probe.tensors_mut()[t][i] = original;

            let numeric = (plus - minus) / (2.0 * opts.step);
            let err = relative_error(grad[i], numeric);
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = err;
                report.worst_index = i;
                report.worst_analytic = grad[i];
                report.worst_numeric = numeric;
            }
        }
        tensors.push(report);
    }

    let layers = ["conv1", "conv2", "dense"]
        .into_iter()
        .enumerate()
        .map(|(l, layer)| {
            let worst = tensors[3 * l..3 * l + 3]
                .iter()
                .map(|t| t.max_rel_error)
                .fold(0.0f64, |a, e| if e.is_nan() { f64::NAN } else { a.max(e) });
            LayerCheck {
                layer,
                max_rel_error: worst,
                passed: worst < opts.tolerance,
            }
        })
        .collect();

    Ok(GradCheckReport {
        tolerance: opts.tolerance,
        tensors,
        layers,
    })
}

/// Runs [`finite_diff_check`] against the objective's own analytic gradient.
pub fn check_objective<O: Objective + ?Sized>(
    net: &Network<f64>,
    objective: &O,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let analytic = objective.gradients(net)?;
    finite_diff_check(net, objective, &analytic, opts)
}

/// A random batch objective for the given network, used by the CLI and tests.
pub fn random_batch_objective(net: &Network<f64>, batch: usize, seed: u64) -> BatchObjective {
    use rand::Rng;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = net.cfg.num_classes;
    // pixel-range inputs keep the loss O(1), so central-difference roundoff
    // stays well below the tolerance even for tiny gradient entries
    let inputs = (0..batch * net.cfg.input_len()).map(|_| rng.random::<f64>()).collect();
    let labels = (0..batch).map(|_| rng.random_range(0..classes) as u8).collect();
    // first sample always labeled so the supervised term is exercised
    let mask = LabeledMask((0..batch).map(|i| i == 0 || rng.random_bool(0.5)).collect());
    let mut targets: Vec<f64> = (0..batch * classes).map(|_| rng.random::<f64>()).collect();
    for row in targets.chunks_exact_mut(classes) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= s);
    }
    BatchObjective {
        inputs,
        labels,
        mask,
        targets,
        weight: 0.5 + rng.random::<f64>(),
        dropout_seed: rng.random(),
    }
}
