use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ensemble::EnsembleState;
use crate::data::{augment_gaussian, sample_seeds, AugmentationConfig, Dataset, SeedSelection, IMAGE_PIXELS};
use crate::error::{Error, Result};
use crate::nn::layers::softmax_backward;
use crate::nn::{adam_step, AdamConfig, AdamState, Checkpoint, Mode, Network, NetworkConfig};
use crate::objectives::{weighted_loss_with_grad, LabeledMask, RampSchedule};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "f32" => Some(Self::F32),
            "f64" => Some(Self::F64),
            _ => None,
        }
    }
}

/// Which predictions are folded into the ensemble each epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnsembleSource {
    /// The noisy, dropout-perturbed training pass.
    Noisy,
    /// A separate eval-mode pass over the training set after the epoch.
    Clean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub network: NetworkConfig,
    pub adam: AdamConfig,
    pub alpha: f64,
    pub batch_size: usize,
    pub noise_std: f64,
    pub ramp_length: usize,
    pub max_weight: f64,
    pub epochs: usize,
    pub seed_size: usize,
    pub balanced: bool,
    pub ensemble_source: EnsembleSource,
    /// Train on every sample's label with the consistency term switched off.
    pub supervised_only: bool,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            network: NetworkConfig::default(),
            adam: AdamConfig::default(),
            alpha: 0.6,
            batch_size: 100,
            noise_std: 0.15,
            ramp_length: 80,
            max_weight: 30.0,
            epochs: 30,
            seed_size: 100,
            balanced: true,
            ensemble_source: EnsembleSource::Noisy,
            supervised_only: false,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        AugmentationConfig::new(self.noise_std)?;
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(0.0..1.0).contains(&self.alpha) {
            return bad(format!("alpha must lie in [0, 1), got {}", self.alpha));
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.ramp_length == 0 {
            return bad("ramp length must be positive".into());
        }
        if !(self.max_weight >= 0.0) {
            return bad(format!("w_max must be non-negative, got {}", self.max_weight));
        }
        if !(self.adam.learning_rate >= 0.0) {
            return bad(format!("learning rate must be non-negative, got {}", self.adam.learning_rate));
        }
        if !self.supervised_only && self.seed_size == 0 {
            return bad("seed size must be positive".into());
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(json))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Normalized train and test splits for one episode.
#[derive(Debug, Clone)]
pub struct EpisodeData {
    pub train: Dataset,
    pub test: Dataset,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// One-based.
    pub epoch: usize,
    pub supervised_loss: f64,
    pub unsupervised_loss: f64,
    pub w_t: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub config_fingerprint: String,
    pub sampling_seed: u64,
    pub rng_seed: u64,
    pub seeds: SeedSelection,
    pub epochs: Vec<EpochMetrics>,
    pub final_accuracy: f64,
    pub best_accuracy: f64,
    /// One-based epoch of the first best accuracy.
    pub best_epoch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLosses {
    pub supervised: f64,
    pub unsupervised: f64,
}

// independent generator streams derived from one rng seed
const STREAM_INIT: u64 = 0;
const STREAM_SHUFFLE: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_DROPOUT: u64 = 3;

pub(crate) fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Generators consumed by [`train_epoch`].
#[derive(Debug, Clone)]
pub struct EpochRngs {
    pub shuffle: ChaCha8Rng,
    pub noise: ChaCha8Rng,
    pub dropout: ChaCha8Rng,
}

impl EpochRngs {
    pub fn from_seed(seed: u64) -> Self {
        Self {
            shuffle: stream(seed, STREAM_SHUFFLE),
            noise: stream(seed, STREAM_NOISE),
            dropout: stream(seed, STREAM_DROPOUT),
        }
    }
}

fn gather<S: Real>(data: &Dataset, indices: &[usize]) -> Vec<S> {
    let mut out = Vec::with_capacity(indices.len() * IMAGE_PIXELS);
    for &i in indices {
        out.extend(data.image(i).iter().map(|&x| S::from_f64(x as f64)));
    }
    out
}

/// One pass over a uniform permutation of the whole training set.
///
/// `labeled` marks the samples whose labels enter the loss, `targets` holds
/// one ensemble target row per training sample and `weight` is the
/// consistency weight for this epoch. Predictions from the noisy pass are
/// recorded into `ensemble` when it is given. Returns the mean supervised
/// loss over batches that hold a labeled sample and the mean consistency loss
/// over all batches.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch<S: Real>(
    net: &mut Network<S>,
    adam: &mut AdamState<S>,
    train: &Dataset,
    labeled: &[bool],
    targets: &[f64],
    weight: f64,
    cfg: &TrainConfig,
    rngs: &mut EpochRngs,
    mut ensemble: Option<&mut EnsembleState>,
) -> Result<EpochLosses> {
    let n = train.len();
    let classes = net.cfg.num_classes;
    if labeled.len() != n {
        return Err(Error::ShapeMismatch { what: "labeled mask", expected: n, actual: labeled.len() });
    }
    if targets.len() != n * classes {
        return Err(Error::ShapeMismatch { what: "ensemble targets", expected: n * classes, actual: targets.len() });
    }
    let augmentation = AugmentationConfig::new(cfg.noise_std)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rngs.shuffle);

    let (mut sup_sum, mut sup_batches) = (0.0, 0usize);
    let (mut unsup_sum, mut batches) = (0.0, 0usize);
    let mut row = vec![0.0f64; classes];
    for chunk in order.chunks(cfg.batch_size) {
        let clean: Vec<S> = gather(train, chunk);
        let inputs = augment_gaussian(&clean, &augmentation, &mut rngs.noise);
        let (probs, cache) = net.forward(&inputs, Mode::Train, &mut rngs.dropout)?;
        let cache = cache.expect("train-mode forward keeps its cache");

        let labels: Vec<u8> = chunk.iter().map(|&i| train.labels[i]).collect();
        let mask = LabeledMask(chunk.iter().map(|&i| labeled[i]).collect());
        let batch_targets: Vec<S> = chunk
            .iter()
            .flat_map(|&i| targets[i * classes..(i + 1) * classes].iter().map(|&t| S::from_f64(t)))
            .collect();
        let (loss, grad_probs) = weighted_loss_with_grad(&probs, &labels, &mask, &batch_targets, weight, classes)?;
        let grad_logits = softmax_backward(&probs, &grad_probs, classes);
        let grads = net.backward(&cache, &grad_logits)?;
        adam_step(net, &grads, adam);

        if mask.count() > 0 {
            sup_sum += loss.supervised;
            sup_batches += 1;
        }
        unsup_sum += loss.unsupervised;
        batches += 1;

        if let Some(ens) = ensemble.as_deref_mut() {
            for (&i, p) in chunk.iter().zip(probs.chunks_exact(classes)) {
                for (r, &x) in row.iter_mut().zip(p) {
                    *r = x.as_f64();
                }
                ens.record(i, &row)?;
            }
        }
    }
    Ok(EpochLosses {
        supervised: if sup_batches == 0 { 0.0 } else { sup_sum / sup_batches as f64 },
        unsupervised: if batches == 0 { 0.0 } else { unsup_sum / batches as f64 },
    })
}

/// Eval-mode class probabilities for every sample of `data`.
pub fn predict_all<S: Real>(net: &Network<S>, data: &Dataset, batch_size: usize) -> Result<Vec<S>> {
    let mut out = Vec::with_capacity(data.len() * net.cfg.num_classes);
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        out.extend(net.predict(&gather::<S>(data, chunk))?);
    }
    Ok(out)
}

/// Index of the largest entry, the lowest index among ties.
pub fn argmax<S: Real>(row: &[S]) -> usize {
    let mut best = 0;
    for (j, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = j;
        }
    }
    best
}

pub fn accuracy_from_probs<S: Real>(probs: &[S], labels: &[u8], classes: usize) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    if probs.len() != labels.len() * classes {
        return Err(Error::ShapeMismatch {
            what: "prediction matrix",
            expected: labels.len() * classes,
            actual: probs.len(),
        });
    }
    let correct = probs
        .chunks_exact(classes)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y as usize)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Test accuracy in eval mode (no dropout, no noise).
pub fn evaluate<S: Real>(net: &Network<S>, test: &Dataset, batch_size: usize) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    let probs = predict_all(net, test, batch_size)?;
    accuracy_from_probs(&probs, &test.labels, net.cfg.num_classes)
}

/// Draws the labeled seeds for an episode, or selects every sample when the
/// configuration is fully supervised.
pub fn select_seeds(cfg: &TrainConfig, train: &Dataset, sampling_seed: u64) -> Result<SeedSelection> {
    if cfg.supervised_only {
        return Ok(SeedSelection {
            labeled_indices: (0..train.len()).collect(),
            seed_size: train.len(),
            sampling_seed,
            balanced: false,
        });
    }
    sample_seeds(train, cfg.seed_size, sampling_seed, cfg.balanced)
}

/// Samples seeds and trains one episode. Results depend only on the
/// configuration, the data and the two seeds.
pub fn run_episode(cfg: &TrainConfig, data: &EpisodeData, sampling_seed: u64, rng_seed: u64) -> Result<EpisodeResult> {
    let seeds = select_seeds(cfg, &data.train, sampling_seed)?;
    run_episode_with_seeds(cfg, data, &seeds, rng_seed)
}

/// Trains one episode on an explicit seed selection.
pub fn run_episode_with_seeds(
    cfg: &TrainConfig,
    data: &EpisodeData,
    seeds: &SeedSelection,
    rng_seed: u64,
) -> Result<EpisodeResult> {
    let mut silent = |_: &EpochMetrics| {};
    match cfg.precision {
        Precision::F32 => train_episode::<f32>(cfg, data, seeds, rng_seed, &mut silent).map(|(r, _)| r),
        Precision::F64 => train_episode::<f64>(cfg, data, seeds, rng_seed, &mut silent).map(|(r, _)| r),
    }
}

/// The full episode loop in precision `S`. `observe` sees every epoch's
/// metrics as soon as they are computed. Also returns the final parameters and
/// optimizer state.
pub fn train_episode<S: Real>(
    cfg: &TrainConfig,
    data: &EpisodeData,
    seeds: &SeedSelection,
    rng_seed: u64,
    observe: &mut dyn FnMut(&EpochMetrics),
) -> Result<(EpisodeResult, Checkpoint<S>)> {
    cfg.validate()?;
    let train = &data.train;
    if data.test.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    seeds.validate(train.len())?;
    let classes = cfg.network.num_classes;
    if train.num_classes != classes {
        return Err(Error::InvalidConfig(format!(
            "dataset has {} classes but the network predicts {classes}",
            train.num_classes
        )));
    }

    let labeled = seeds.membership(train.len());
    let fraction = if train.is_empty() { 0.0 } else { seeds.labeled_indices.len() as f64 / train.len() as f64 };
    let max_weight = if cfg.supervised_only { 0.0 } else { cfg.max_weight };
    let schedule = RampSchedule::new(max_weight, cfg.ramp_length, fraction)?;

    let mut net: Network<S> = Network::init(cfg.network, &mut stream(rng_seed, STREAM_INIT))?;
    let mut adam = AdamState::new(cfg.adam, &net);
    let mut ensemble = EnsembleState::new(train.len(), classes, cfg.alpha)?;
    let mut rngs = EpochRngs::from_seed(rng_seed);
    let mut metrics = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let abort = |e: Error| Error::EpisodeAborted { epoch: epoch + 1, source: Box::new(e) };
        let targets = ensemble.targets_for_next_epoch();
        let weight = schedule.weight(epoch);
        let record_noisy = cfg.ensemble_source == EnsembleSource::Noisy;
        let losses = train_epoch(
            &mut net,
            &mut adam,
            train,
            &labeled,
            &targets,
            weight,
            cfg,
            &mut rngs,
            record_noisy.then_some(&mut ensemble),
        )
        .map_err(abort)?;
        if !record_noisy {
            let probs = predict_all(&net, train, cfg.batch_size).map_err(abort)?;
            let mut row = vec![0.0; classes];
            for (i, p) in probs.chunks_exact(classes).enumerate() {
                for (r, &x) in row.iter_mut().zip(p) {
                    *r = x.as_f64();
                }
                ensemble.record(i, &row)?;
            }
        }
        ensemble.update()?;
        let test_accuracy = evaluate(&net, &data.test, cfg.batch_size).map_err(abort)?;
        let m = EpochMetrics {
            epoch: epoch + 1,
            supervised_loss: losses.supervised,
            unsupervised_loss: losses.unsupervised,
            w_t: weight,
            test_accuracy,
        };
        observe(&m);
        metrics.push(m);
    }

    let (best_epoch, best_accuracy) = best_of(&metrics);
    let result = EpisodeResult {
        config_fingerprint: cfg.fingerprint(),
        sampling_seed: seeds.sampling_seed,
        rng_seed,
        seeds: seeds.clone(),
        final_accuracy: metrics.last().map_or(0.0, |m| m.test_accuracy),
        best_accuracy,
        best_epoch,
        epochs: metrics,
    };
    Ok((result, Checkpoint::new(net, adam, cfg.epochs)))
}

/// First epoch attaining the highest test accuracy.
fn best_of(metrics: &[EpochMetrics]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for m in metrics {
        if m.test_accuracy > best.1 {
            best = (m.epoch, m.test_accuracy);
        }
    }
    best
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> Option<MeanStd> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some(MeanStd { mean, std: var.sqrt() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeAggregate {
    pub episodes: usize,
    pub final_accuracy: MeanStd,
    pub best_accuracy: MeanStd,
}

pub fn aggregate_episodes(results: &[EpisodeResult]) -> Result<EpisodeAggregate> {
    let finals: Vec<f64> = results.iter().map(|r| r.final_accuracy).collect();
    let bests: Vec<f64> = results.iter().map(|r| r.best_accuracy).collect();
    let empty = || Error::InvalidConfig("cannot aggregate zero episodes".into());
    Ok(EpisodeAggregate {
        episodes: results.len(),
        final_accuracy: mean_std(&finals).ok_or_else(empty)?,
        best_accuracy: mean_std(&bests).ok_or_else(empty)?,
    })
}

/// Seed for the episode generator when none is given explicitly.
pub fn default_rng_seed(sampling_seed: u64) -> u64 {
    sampling_seed
}
