//! Datasets, channel-wise normalization, labeled-seed sampling and input noise.

use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::idx::{read_idx_file, RawIdxTensor};
use crate::real::Real;

pub const IMAGE_SIDE: usize = 28;
pub const IMAGE_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;
pub const NUM_CLASSES: usize = 10;

/// Environment variable naming the default data directory.
pub const DATA_DIR_ENV: &str = "TEMPENS_DATA_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Train,
    Test,
}

/// The three MNIST-family datasets, each stored as four IDX files in
/// `<data_dir>/<name>/`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Mnist,
    Kmnist,
    FashionMnist,
}

impl DatasetKind {
    pub const ALL: [DatasetKind; 3] = [DatasetKind::Mnist, DatasetKind::Kmnist, DatasetKind::FashionMnist];

    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Kmnist => "kmnist",
            DatasetKind::FashionMnist => "fashion-mnist",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Resolved paths of the image and label files for one split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitFiles {
    pub images: PathBuf,
    pub labels: PathBuf,
}

fn locate(dir: &Path, stem: &str, dataset: DatasetKind) -> Result<PathBuf> {
    let gz = dir.join(format!("{stem}.gz"));
    if gz.is_file() {
        return Ok(gz);
    }
    let plain = dir.join(stem);
    if plain.is_file() {
        return Ok(plain);
    }
    Err(Error::MissingDataset {
        dataset: dataset.name().to_string(),
        path: gz,
    })
}

/// Finds the IDX files of `role` for `dataset` below `data_dir`, preferring the
/// gzipped variant when both exist.
pub fn split_files(data_dir: &Path, dataset: DatasetKind, role: Role) -> Result<SplitFiles> {
    let dir = data_dir.join(dataset.name());
    let prefix = match role {
        Role::Train => "train",
        Role::Test => "t10k",
    };
    Ok(SplitFiles {
        images: locate(&dir, &format!("{prefix}-images-idx3-ubyte"), dataset)?,
        labels: locate(&dir, &format!("{prefix}-labels-idx1-ubyte"), dataset)?,
    })
}

/// Default data directory: `$TEMPENS_DATA_DIR`, falling back to `./data`.
pub fn default_data_dir() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

/// Images stored as `[N, 1, 28, 28]` in a flat row-major buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<f32>,
    pub labels: Vec<u8>,
    pub num_classes: usize,
    pub role: Role,
    pub normalization: Option<NormStats>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.images[i * IMAGE_PIXELS..(i + 1) * IMAGE_PIXELS]
    }

    /// Copies the selected samples, in the given order, into a new dataset.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut images = Vec::with_capacity(indices.len() * IMAGE_PIXELS);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            images,
            labels,
            num_classes: self.num_classes,
            role: self.role,
            normalization: self.normalization,
        }
    }

    pub fn class_histogram(&self, indices: &[usize]) -> Vec<usize> {
        let mut hist = vec![0; self.num_classes];
        for &i in indices {
            hist[self.labels[i] as usize] += 1;
        }
        hist
    }

    /// Indices of each class, ascending.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.num_classes];
        for (i, &y) in self.labels.iter().enumerate() {
            by_class[y as usize].push(i);
        }
        by_class
    }
}

/// Converts decoded IDX tensors into a dataset with pixels scaled to `[0, 1]`.
pub fn load_dataset(images: &RawIdxTensor, labels: &RawIdxTensor, role: Role) -> Result<Dataset> {
    if images.dims.len() != 3 || images.dims[1] != IMAGE_SIDE || images.dims[2] != IMAGE_SIDE {
        return Err(Error::BadImageShape(images.dims.clone()));
    }
    if labels.dims.len() != 1 {
        return Err(Error::InvalidTensor(format!(
            "label tensor must be rank 1, got dims {:?}",
            labels.dims
        )));
    }
    let n = images.dims[0];
    if n != labels.dims[0] {
        return Err(Error::SizeMismatch {
            images: n,
            labels: labels.dims[0],
        });
    }
    if let Some((index, &label)) = labels
        .data
        .iter()
        .enumerate()
        .find(|(_, &y)| y as usize >= NUM_CLASSES)
    {
        return Err(Error::LabelOutOfRange {
            index,
            label,
            num_classes: NUM_CLASSES,
        });
    }
    Ok(Dataset {
        images: images.data.iter().map(|&b| b as f32 / 255.0).collect(),
        labels: labels.data.clone(),
        num_classes: NUM_CLASSES,
        role,
        normalization: None,
    })
}

/// Reads one split of `dataset` from disk.
pub fn load_split(data_dir: &Path, dataset: DatasetKind, role: Role) -> Result<Dataset> {
    let files = split_files(data_dir, dataset, role)?;
    let images = read_idx_file(&files.images)?;
    let labels = read_idx_file(&files.labels)?;
    load_dataset(&images, &labels, role)
}

/// Standardizes every dataset with the mean and population standard deviation
/// of the training split (a single channel for these datasets).
pub fn normalize_channelwise(
    train: Dataset,
    others: Vec<Dataset>,
) -> Result<(Dataset, Vec<Dataset>, NormStats)> {
    if train.role != Role::Train {
        return Err(Error::NotTrainSplit);
    }
    let stats = channel_stats(&train.images)?;
    let apply = |mut d: Dataset| {
        let (mean, std) = (stats.mean, stats.std);
        for x in &mut d.images {
            *x = ((*x as f64 - mean) / std) as f32;
        }
        d.normalization = Some(stats);
        d
    };
    let train = apply(train);
    let others = others.into_iter().map(apply).collect();
    Ok((train, others, stats))
}

fn channel_stats(values: &[f32]) -> Result<NormStats> {
    if values.is_empty() {
        return Err(Error::DegenerateStd(0.0));
    }
    let n = values.len() as f64;
    let mean = values.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = values
        .iter()
        .map(|&x| {
            let d = x as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    let std = var.sqrt();
    if !(std >= 1e-12) {
        return Err(Error::DegenerateStd(std));
    }
    Ok(NormStats { mean, std })
}

/// Deterministic class-stratified subset of at most `cap` samples.
///
/// Each class keeps `floor(cap * n_c / N)` samples, with the remainder going
/// to the classes with the largest fractional parts (lowest class on ties).
/// Selected indices are returned in ascending order.
pub fn stratified_subset(dataset: &Dataset, cap: usize, seed: u64) -> Vec<usize> {
    let n = dataset.len();
    if cap >= n {
        return (0..n).collect();
    }
    let by_class = dataset.indices_by_class();
    let mut quota: Vec<usize> = by_class.iter().map(|c| c.len() * cap / n).collect();
    let mut remainder: Vec<(usize, usize)> = by_class
        .iter()
        .enumerate()
        .map(|(c, idx)| (idx.len() * cap % n, c))
        .collect();
    remainder.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let missing = cap - quota.iter().sum::<usize>();
    for &(_, c) in remainder.iter().take(missing) {
        quota[c] += 1;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = by_class
        .iter()
        .zip(&quota)
        .flat_map(|(idx, &q)| {
            sample(&mut rng, idx.len(), q)
                .into_iter()
                .map(|j| idx[j])
                .collect::<Vec<_>>()
        })
        .collect();
    picked.sort_unstable();
    picked
}

/// The labeled subset of the training set (a "seed") and how it was drawn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedSelection {
    pub labeled_indices: Vec<usize>,
    pub seed_size: usize,
    pub sampling_seed: u64,
    pub balanced: bool,
}

impl SeedSelection {
    /// Boolean membership vector over a training set of `n` samples.
    pub fn membership(&self, n: usize) -> Vec<bool> {
        let mut mask = vec![false; n];
        for &i in &self.labeled_indices {
            mask[i] = true;
        }
        mask
    }

    /// Checks the selection against a dataset of `n` samples.
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.labeled_indices.len() != self.seed_size {
            return Err(Error::InvalidConfig(format!(
                "seed selection lists {} indices but seed_size is {}",
                self.labeled_indices.len(),
                self.seed_size
            )));
        }
        if self.labeled_indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig(
                "seed indices must be strictly ascending".into(),
            ));
        }
        if let Some(&last) = self.labeled_indices.last() {
            if last >= n {
                return Err(Error::SeedSizeTooLarge {
                    seed_size: last + 1,
                    available: n,
                });
            }
        }
        Ok(())
    }
}

/// Draws `seed_size` labeled samples, uniformly without replacement, either
/// per class (`balanced`) or over the whole set.
pub fn sample_seeds(
    dataset: &Dataset,
    seed_size: usize,
    sampling_seed: u64,
    balanced: bool,
) -> Result<SeedSelection> {
    let n = dataset.len();
    if seed_size == 0 {
        return Err(Error::InvalidConfig("seed size must be positive".into()));
    }
    if seed_size > n {
        return Err(Error::SeedSizeTooLarge {
            seed_size,
            available: n,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sampling_seed);
    let mut labeled_indices = if balanced {
        let classes = dataset.num_classes;
        if !seed_size.is_multiple_of(classes) {
            return Err(Error::IndivisibleSeedSize {
                seed_size,
                num_classes: classes,
            });
        }
        let per_class = seed_size / classes;
        let mut picked = Vec::with_capacity(seed_size);
        for members in dataset.indices_by_class() {
            if members.len() < per_class {
                return Err(Error::SeedSizeTooLarge {
                    seed_size: per_class,
                    available: members.len(),
                });
            }
            picked.extend(sample(&mut rng, members.len(), per_class).into_iter().map(|j| members[j]));
        }
        picked
    } else {
        sample(&mut rng, n, seed_size).into_vec()
    };
    labeled_indices.sort_unstable();
    Ok(SeedSelection {
        labeled_indices,
        seed_size,
        sampling_seed,
        balanced,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    pub gaussian_std: f64,
}

impl AugmentationConfig {
    pub fn new(gaussian_std: f64) -> Result<Self> {
        if !(gaussian_std >= 0.0) || !gaussian_std.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "gaussian_std must be finite and non-negative, got {gaussian_std}"
            )));
        }
        Ok(Self { gaussian_std })
    }
}

/// Returns `batch + eps` with `eps ~ N(0, gaussian_std^2)` drawn i.i.d.
pub fn augment_gaussian<S: Real, R: Rng + ?Sized>(
    batch: &[S],
    cfg: &AugmentationConfig,
    rng: &mut R,
) -> Vec<S> {
    if cfg.gaussian_std == 0.0 {
        return batch.to_vec();
    }
    let std = S::from_f64(cfg.gaussian_std);
    batch
        .iter()
        .map(|&x| x + std * S::sample_standard_normal(rng))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn synthetic(labels: Vec<u8>, role: Role) -> Dataset {
        let n = labels.len();
        Dataset {
            images: (0..n * IMAGE_PIXELS).map(|i| (i % 7) as f32 / 7.0).collect(),
            labels,
            num_classes: NUM_CLASSES,
            role,
            normalization: None,
        }
    }

    fn balanced_labels(per_class: usize) -> Vec<u8> {
        (0..per_class * NUM_CLASSES).map(|i| (i % NUM_CLASSES) as u8).collect()
    }

    fn tensor(dims: Vec<usize>, data: Vec<u8>) -> RawIdxTensor {
        RawIdxTensor::new(dims, data).unwrap()
    }

    #[test]
    fn load_scales_bytes() {
        let d = load_dataset(
            &tensor(vec![1, 28, 28], vec![0; IMAGE_PIXELS]),
            &tensor(vec![1], vec![7]),
            Role::Train,
        )
        .unwrap();
        assert!(d.images.iter().all(|&x| x == 0.0));
        assert_eq!(d.labels, vec![7]);

        let d = load_dataset(
            &tensor(vec![1, 28, 28], vec![255; IMAGE_PIXELS]),
            &tensor(vec![1], vec![0]),
            Role::Train,
        )
        .unwrap();
        assert!(d.images.iter().all(|&x| x == 1.0));
    }

    #[test]
    fn load_rejects_mismatch_and_bad_labels() {
        let err = load_dataset(
            &tensor(vec![2, 28, 28], vec![0; 2 * IMAGE_PIXELS]),
            &tensor(vec![3], vec![0, 1, 2]),
            Role::Train,
        );
        assert!(matches!(err, Err(Error::SizeMismatch { images: 2, labels: 3 })));

        let err = load_dataset(
            &tensor(vec![1, 28, 28], vec![0; IMAGE_PIXELS]),
            &tensor(vec![1], vec![10]),
            Role::Train,
        );
        assert!(matches!(err, Err(Error::LabelOutOfRange { index: 0, label: 10, .. })));

        let err = load_dataset(
            &tensor(vec![1, 2, 2], vec![0; 4]),
            &tensor(vec![1], vec![0]),
            Role::Train,
        );
        assert!(matches!(err, Err(Error::BadImageShape(_))));
    }

    #[test]
    fn normalization_maps_binary_pixels_to_unit_values() {
        let mut train = synthetic(vec![0, 1], Role::Train);
        for (i, x) in train.images.iter_mut().enumerate() {
            *x = (i % 2) as f32;
        }
        let (train, _, stats) = normalize_channelwise(train, vec![]).unwrap();
        assert_eq!(stats.mean, 0.5);
        assert_eq!(stats.std, 0.5);
        assert!(train.images.iter().all(|&x| x == -1.0 || x == 1.0));
    }

    #[test]
    fn constant_train_set_is_degenerate() {
        let mut train = synthetic(vec![0], Role::Train);
        train.images.fill(0.3);
        assert!(matches!(
            normalize_channelwise(train, vec![]),
            Err(Error::DegenerateStd(_))
        ));
    }

    #[test]
    fn test_split_uses_train_statistics() {
        let mut train = synthetic(vec![0], Role::Train);
        for (i, x) in train.images.iter_mut().enumerate() {
            *x = if i % 4 == 0 { 1.0 } else { 0.0 };
        }
        let mut test = synthetic(vec![0], Role::Test);
        test.images.fill(0.75);
        // mean 0.25, population std sqrt(0.25 * 0.75)
        let std = (0.25f64 * 0.75).sqrt();
        let (_, others, stats) = normalize_channelwise(train, vec![test]).unwrap();
        assert!((stats.mean - 0.25).abs() < 1e-12);
        assert!((stats.std - std).abs() < 1e-12);
        let expected = ((0.75 - 0.25) / std) as f32;
        assert!(others[0].images.iter().all(|&x| (x - expected).abs() < 1e-6));
        assert_eq!(others[0].normalization, Some(stats));
    }

    #[test]
    fn normalization_requires_train_role() {
        let test = synthetic(vec![0], Role::Test);
        assert!(matches!(normalize_channelwise(test, vec![]), Err(Error::NotTrainSplit)));
    }

    #[test]
    fn normalized_train_has_zero_mean_unit_std_and_is_stable() {
        let mut train = synthetic(balanced_labels(3), Role::Train);
        for (i, x) in train.images.iter_mut().enumerate() {
            *x = ((i * 37 + 11) % 256) as f32 / 255.0;
        }
        let (train, _, _) = normalize_channelwise(train, vec![]).unwrap();
        let again = channel_stats(&train.images).unwrap();
        assert!(again.mean.abs() < 1e-6);
        assert!((again.std - 1.0).abs() < 1e-6);
        let (train2, _, _) = normalize_channelwise(train, vec![]).unwrap();
        let third = channel_stats(&train2.images).unwrap();
        assert!(third.mean.abs() < 1e-6);
        assert!((third.std - 1.0).abs() < 1e-6);
    }

    #[test]
    fn full_seed_size_selects_everything() {
        let d = synthetic(balanced_labels(3), Role::Train);
        for balanced in [false, true] {
            let s = sample_seeds(&d, d.len(), 5, balanced).unwrap();
            assert_eq!(s.labeled_indices, (0..d.len()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn balanced_sampling_is_uniform_over_classes() {
        let d = synthetic(balanced_labels(40), Role::Train);
        let s = sample_seeds(&d, 100, 14, true).unwrap();
        assert_eq!(s.labeled_indices.len(), 100);
        assert_eq!(d.class_histogram(&s.labeled_indices), vec![10; NUM_CLASSES]);
        s.validate(d.len()).unwrap();
    }

    #[test]
    fn sampling_is_deterministic() {
        let d = synthetic(balanced_labels(40), Role::Train);
        for balanced in [false, true] {
            let a = sample_seeds(&d, 50, 99, balanced).unwrap();
            let b = sample_seeds(&d, 50, 99, balanced).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn sampling_errors() {
        let d = synthetic(balanced_labels(5), Role::Train);
        assert!(matches!(
            sample_seeds(&d, 15, 0, true),
            Err(Error::IndivisibleSeedSize { seed_size: 15, num_classes: 10 })
        ));
        assert!(matches!(
            sample_seeds(&d, 51, 0, false),
            Err(Error::SeedSizeTooLarge { seed_size: 51, available: 50 })
        ));
        assert!(sample_seeds(&d, 0, 0, false).is_err());
    }

    #[test]
    fn distinct_sampling_seeds_give_distinct_selections() {
        let d = synthetic(balanced_labels(40), Role::Train);
        for balanced in [false, true] {
            let draws: HashSet<Vec<usize>> = (0..20u64)
                .map(|s| sample_seeds(&d, 100, s, balanced).unwrap().labeled_indices)
                .collect();
            assert!(draws.len() >= 19, "only {} distinct draws", draws.len());
        }
    }

    #[test]
    fn stratified_subset_keeps_class_proportions() {
        let mut labels: Vec<u8> = balanced_labels(30);
        labels.extend(std::iter::repeat_n(3, 20));
        let d = synthetic(labels, Role::Train);
        let picked = stratified_subset(&d, 64, 0);
        assert_eq!(picked.len(), 64);
        assert!(picked.windows(2).all(|w| w[0] < w[1]));
        let hist = d.class_histogram(&picked);
        // class 3 holds 50/320 of the data
        assert_eq!(hist[3], 10);
        assert_eq!(stratified_subset(&d, 64, 0), picked);
        assert_eq!(stratified_subset(&d, 1000, 0).len(), d.len());
    }

    #[test]
    fn zero_noise_is_identity_and_seeded_noise_repeats() {
        let batch: Vec<f32> = (0..50).map(|i| i as f32 * 0.1).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = augment_gaussian(&batch, &AugmentationConfig::new(0.0).unwrap(), &mut rng);
        assert_eq!(out, batch);

        let cfg = AugmentationConfig::new(0.15).unwrap();
        let a = augment_gaussian(&batch, &cfg, &mut ChaCha8Rng::seed_from_u64(3));
        let b = augment_gaussian(&batch, &cfg, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
        assert_ne!(a, batch);
        assert!(AugmentationConfig::new(-0.1).is_err());
    }

    #[test]
    fn noise_mean_is_zero_within_three_standard_errors() {
        let std = 0.15;
        let n = 1_000_000;
        let batch = vec![0.25f64; n];
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let out = augment_gaussian(&batch, &AugmentationConfig::new(std).unwrap(), &mut rng);
        let diffs: Vec<f64> = out.iter().zip(&batch).map(|(o, i)| o - i).collect();
        let mean = diffs.iter().sum::<f64>() / n as f64;
        let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 3.0 * std / 1e3, "mean {mean}");
        assert!((var.sqrt() - std).abs() < 1e-3, "std {}", var.sqrt());
    }

    #[test]
    fn dataset_names_round_trip() {
        for k in DatasetKind::ALL {
            assert_eq!(DatasetKind::parse(k.name()), Some(k));
        }
        assert_eq!(DatasetKind::parse("cifar"), None);
    }
}
