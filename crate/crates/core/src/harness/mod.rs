//! Experiment protocols over whole grids of episodes, the comparison
//! baselines and machine-readable exports.

pub mod export;
pub mod knn;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    load_split, normalize_channelwise, split_files, stratified_subset, DatasetKind, NormStats, Role,
};
use crate::error::{Error, Result};
use crate::trainer::episode::{default_rng_seed, hex};
use crate::data::SeedSelection;
use crate::nn::Checkpoint;
use crate::real::Real;
use crate::trainer::{
    aggregate_episodes, run_episode, select_seeds, train_episode, EpisodeData, EpisodeResult, EpochMetrics, MeanStd,
    Precision, TrainConfig,
};

pub use export::{export_results, verify_manifest, Manifest};
pub use knn::{knn_classify, run_baseline_knn, KnnResult};

pub const DEFAULT_MAX_TRAIN: usize = 10_000;
pub const DEFAULT_MAX_TEST: usize = 2_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetKind,
    pub data_dir: PathBuf,
    pub train: TrainConfig,
    pub episodes: usize,
    /// Explicit sampling seeds; derived as `0..episodes` when absent.
    pub sampling_seeds: Option<Vec<u64>>,
    /// Stratified cap on the training split; `None` uses all of it.
    pub max_train_samples: Option<usize>,
    pub max_test_samples: Option<usize>,
    /// Seed of the stratified subset draw.
    pub subset_seed: u64,
    /// Where exports go; not part of the recorded experiment.
    #[serde(skip)]
    pub output_dir: PathBuf,
    /// Episodes trained concurrently. Results do not depend on it.
    pub threads: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetKind::Mnist,
            data_dir: crate::data::default_data_dir(),
            train: TrainConfig::default(),
            episodes: 3,
            sampling_seeds: None,
            max_train_samples: Some(DEFAULT_MAX_TRAIN),
            max_test_samples: Some(DEFAULT_MAX_TEST),
            subset_seed: 0,
            output_dir: PathBuf::from("runs"),
            threads: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.episodes == 0 {
            return Err(Error::InvalidConfig("episodes must be positive".into()));
        }
        if let Some(seeds) = &self.sampling_seeds {
            if seeds.len() != self.episodes {
                return Err(Error::InvalidConfig(format!(
                    "{} sampling seeds listed for {} episodes",
                    seeds.len(),
                    self.episodes
                )));
            }
        }
        if self.threads == 0 {
            return Err(Error::InvalidConfig("threads must be positive".into()));
        }
        Ok(())
    }

    pub fn sampling_seeds(&self) -> Vec<u64> {
        self.sampling_seeds
            .clone()
            .unwrap_or_else(|| (0..self.episodes as u64).collect())
    }

    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(json))
    }
}

/// A dataset file and its SHA-256 digest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileChecksum {
    pub path: PathBuf,
    pub sha256: String,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex(&Sha256::digest(bytes)))
}

/// The four IDX files of `dataset` that are absent under `data_dir`.
pub fn missing_files(data_dir: &Path, dataset: DatasetKind) -> Vec<PathBuf> {
    let dir = data_dir.join(dataset.name());
    let mut missing = Vec::new();
    for prefix in ["train", "t10k"] {
        for kind in ["images-idx3", "labels-idx1"] {
            let stem = format!("{prefix}-{kind}-ubyte");
            let gz = dir.join(format!("{stem}.gz"));
            if !gz.is_file() && !dir.join(&stem).is_file() {
                missing.push(gz);
            }
        }
    }
    missing
}

/// Subsetted, normalized splits plus what is needed to reproduce them.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub dataset: DatasetKind,
    pub data: EpisodeData,
    pub normalization: NormStats,
    pub checksums: Vec<FileChecksum>,
}

/// Loads both splits, applies the stratified caps and standardizes with the
/// statistics of the (capped) training split.
pub fn prepare_data(cfg: &ExperimentConfig, dataset: DatasetKind) -> Result<PreparedData> {
    let mut checksums = Vec::new();
    for role in [Role::Train, Role::Test] {
        let files = split_files(&cfg.data_dir, dataset, role)?;
        for path in [files.images, files.labels] {
            checksums.push(FileChecksum { sha256: sha256_file(&path)?, path });
        }
    }
    let cap = |d: crate::data::Dataset, limit: Option<usize>, what: &str| -> Result<crate::data::Dataset> {
        match limit {
            None => Ok(d),
            Some(c) if c > d.len() => Err(Error::InvalidConfig(format!(
                "{what} cap {c} exceeds the {} available samples",
                d.len()
            ))),
            Some(c) if c == d.len() => Ok(d),
            Some(c) => Ok(d.subset(&stratified_subset(&d, c, cfg.subset_seed))),
        }
    };
    let train = cap(load_split(&cfg.data_dir, dataset, Role::Train)?, cfg.max_train_samples, "training")?;
    let test = cap(load_split(&cfg.data_dir, dataset, Role::Test)?, cfg.max_test_samples, "test")?;
    let (train, mut others, normalization) = normalize_channelwise(train, vec![test])?;
    let test = others.pop().expect("one test split");
    Ok(PreparedData {
        dataset,
        data: EpisodeData { train, test },
        normalization,
        checksums,
    })
}

/// All episodes of one grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub dataset: DatasetKind,
    pub epochs: usize,
    pub seed_size: usize,
    pub supervised_only: bool,
    pub episodes: Vec<EpisodeResult>,
}

impl CellResult {
    /// Directory-safe cell name.
    pub fn key(&self) -> String {
        let kind = if self.supervised_only { "supervised" } else { "tempens" };
        format!("{}-{kind}-e{}-s{}", self.dataset.name(), self.epochs, self.seed_size)
    }
}

/// Runs one episode per sampling seed, `threads` at a time. The episode
/// generator seed equals the sampling seed.
pub fn run_cell(cfg: &ExperimentConfig, train: &TrainConfig, data: &PreparedData) -> Result<CellResult> {
    let seeds = cfg.sampling_seeds();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    let episodes = pool.install(|| {
        seeds
            .par_iter()
            .map(|&s| run_episode(train, &data.data, s, default_rng_seed(s)))
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(CellResult {
        dataset: data.dataset,
        epochs: train.epochs,
        seed_size: if train.supervised_only { data.data.train.len() } else { train.seed_size },
        supervised_only: train.supervised_only,
        episodes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub sampling_seed: u64,
    pub rng_seed: u64,
    pub final_accuracy: f64,
    pub best_accuracy: f64,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub dataset: DatasetKind,
    pub epochs: usize,
    pub seed_size: usize,
    pub method: String,
    pub final_accuracy: MeanStd,
    pub best_accuracy: MeanStd,
    pub episodes: Vec<EpisodeSummary>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ResultsTable {
    pub rows: Vec<TableRow>,
}

impl ResultsTable {
    pub fn from_cells(cells: &[CellResult]) -> Result<Self> {
        let rows = cells
            .iter()
            .map(|c| {
                let agg = aggregate_episodes(&c.episodes)?;
                Ok(TableRow {
                    dataset: c.dataset,
                    epochs: c.epochs,
                    seed_size: c.seed_size,
                    method: if c.supervised_only { "two-conv network (supervised only)" } else { "temporal ensembling" }
                        .to_string(),
                    final_accuracy: agg.final_accuracy,
                    best_accuracy: agg.best_accuracy,
                    episodes: c
                        .episodes
                        .iter()
                        .map(|e| EpisodeSummary {
                            sampling_seed: e.sampling_seed,
                            rng_seed: e.rng_seed,
                            final_accuracy: e.final_accuracy,
                            best_accuracy: e.best_accuracy,
                            best_epoch: e.best_epoch,
                        })
                        .collect(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { rows })
    }

    pub fn row(&self, dataset: DatasetKind, epochs: usize, seed_size: usize) -> Option<&TableRow> {
        self.rows
            .iter()
            .find(|r| r.dataset == dataset && r.epochs == epochs && r.seed_size == seed_size)
    }

    /// Plain-text rendering, accuracies in percent.
    pub fn render(&self) -> String {
        let mut out = String::from("dataset        epochs  seed  method                               final            best\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{:<14} {:>6} {:>5}  {:<36} {:>6.2} ± {:<6.3} {:>6.2} ± {:.3}\n",
                r.dataset.name(),
                r.epochs,
                r.seed_size,
                r.method,
                100.0 * r.final_accuracy.mean,
                100.0 * r.final_accuracy.std,
                100.0 * r.best_accuracy.mean,
                100.0 * r.best_accuracy.std,
            ));
        }
        out
    }
}

/// Best accuracy per sampling seed and the spread across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSpreadReport {
    pub dataset: DatasetKind,
    pub seed_size: usize,
    pub epochs: usize,
    /// `seed_<n>` to best accuracy.
    pub best_by_seed: BTreeMap<String, f64>,
    pub min: f64,
    pub max: f64,
    pub spread: f64,
}

impl SeedSpreadReport {
    pub fn from_cell(cell: &CellResult) -> Self {
        let best_by_seed: BTreeMap<String, f64> = cell
            .episodes
            .iter()
            .map(|e| (seed_name(e.sampling_seed), e.best_accuracy))
            .collect();
        let min = cell.episodes.iter().map(|e| e.best_accuracy).fold(f64::INFINITY, f64::min);
        let max = cell.episodes.iter().map(|e| e.best_accuracy).fold(f64::NEG_INFINITY, f64::max);
        Self {
            dataset: cell.dataset,
            seed_size: cell.seed_size,
            epochs: cell.epochs,
            best_by_seed,
            min,
            max,
            spread: max - min,
        }
    }
}

pub fn seed_name(sampling_seed: u64) -> String {
    format!("seed_{sampling_seed}")
}

/// What to run. Stored in every manifest so that a run can be replayed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "protocol", rename_all = "kebab-case")]
pub enum Protocol {
    /// Datasets × epoch counts at the configured seed size.
    Rq1 { datasets: Vec<DatasetKind>, epochs: Vec<usize> },
    /// Datasets × seed sizes × epoch counts.
    Rq2 { datasets: Vec<DatasetKind>, seed_sizes: Vec<usize>, epochs: Vec<usize> },
    /// One cell over many sampling seeds, with a spread report.
    Rq3,
    /// A single episode, on an explicit seed selection when one is given.
    Train { seeds: Option<SeedSelection> },
    BaselineSupervised,
    BaselineKnn { k: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub protocol: Protocol,
    pub config: ExperimentConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutput {
    pub cells: Vec<CellResult>,
    pub table: ResultsTable,
    pub spread: Option<SeedSpreadReport>,
    pub knn: Option<KnnResult>,
    /// Checksums of every dataset file read, grouped by dataset.
    pub checksums: BTreeMap<String, Vec<FileChecksum>>,
}

fn load_all(cfg: &ExperimentConfig, datasets: &[DatasetKind]) -> Result<Vec<PreparedData>> {
    // fail before any training when a dataset is absent
    for &d in datasets {
        split_files(&cfg.data_dir, d, Role::Train)?;
        split_files(&cfg.data_dir, d, Role::Test)?;
    }
    datasets.iter().map(|&d| prepare_data(cfg, d)).collect()
}

fn checksum_map(prepared: &[PreparedData]) -> BTreeMap<String, Vec<FileChecksum>> {
    prepared
        .iter()
        .map(|p| (p.dataset.name().to_string(), p.checksums.clone()))
        .collect()
}

fn grid(cfg: &ExperimentConfig, prepared: &[PreparedData], seed_sizes: &[usize], epochs: &[usize]) -> Result<RunOutput> {
    let mut cells = Vec::new();
    for p in prepared {
        for &s in seed_sizes {
            for &e in epochs {
                let train = TrainConfig { seed_size: s, epochs: e, ..cfg.train.clone() };
                cells.push(run_cell(cfg, &train, p)?);
            }
        }
    }
    Ok(RunOutput {
        table: ResultsTable::from_cells(&cells)?,
        cells,
        spread: None,
        knn: None,
        checksums: checksum_map(prepared),
    })
}

pub fn run_rq1(cfg: &ExperimentConfig, datasets: &[DatasetKind], epochs: &[usize]) -> Result<RunOutput> {
    cfg.validate()?;
    let prepared = load_all(cfg, datasets)?;
    grid(cfg, &prepared, &[cfg.train.seed_size], epochs)
}

pub fn run_rq2(
    cfg: &ExperimentConfig,
    datasets: &[DatasetKind],
    seed_sizes: &[usize],
    epochs: &[usize],
) -> Result<RunOutput> {
    cfg.validate()?;
    let prepared = load_all(cfg, datasets)?;
    grid(cfg, &prepared, seed_sizes, epochs)
}

pub fn run_rq3(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let prepared = load_all(cfg, &[cfg.dataset])?;
    let mut out = grid(cfg, &prepared, &[cfg.train.seed_size], &[cfg.train.epochs])?;
    out.spread = Some(SeedSpreadReport::from_cell(&out.cells[0]));
    Ok(out)
}

/// The network trained on every label of the (capped) training split with
/// the consistency term disabled.
pub fn run_baseline_supervised(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let cfg = ExperimentConfig {
        train: TrainConfig { supervised_only: true, ..cfg.train.clone() },
        ..cfg.clone()
    };
    cfg.validate()?;
    let prepared = load_all(&cfg, &[cfg.dataset])?;
    let cell = run_cell(&cfg, &cfg.train, &prepared[0])?;
    Ok(RunOutput {
        table: ResultsTable::from_cells(std::slice::from_ref(&cell))?,
        cells: vec![cell],
        spread: None,
        knn: None,
        checksums: checksum_map(&prepared),
    })
}

/// One episode of the configured dataset. Without explicit `seeds` the
/// selection is drawn from the first sampling seed. The episode generator
/// seed is the selection's sampling seed.
pub fn train_single<S: Real>(
    cfg: &ExperimentConfig,
    seeds: Option<&SeedSelection>,
    observe: &mut dyn FnMut(&EpochMetrics),
) -> Result<(RunOutput, Checkpoint<S>)> {
    cfg.validate()?;
    let prepared = load_all(cfg, &[cfg.dataset])?;
    let p = &prepared[0];
    let seeds = match seeds {
        Some(s) => s.clone(),
        None => select_seeds(&cfg.train, &p.data.train, cfg.sampling_seeds()[0])?,
    };
    let (result, checkpoint) =
        train_episode::<S>(&cfg.train, &p.data, &seeds, default_rng_seed(seeds.sampling_seed), observe)?;
    let cell = CellResult {
        dataset: p.dataset,
        epochs: cfg.train.epochs,
        seed_size: seeds.labeled_indices.len(),
        supervised_only: cfg.train.supervised_only,
        episodes: vec![result],
    };
    let output = RunOutput {
        table: ResultsTable::from_cells(std::slice::from_ref(&cell))?,
        cells: vec![cell],
        spread: None,
        knn: None,
        checksums: checksum_map(&prepared),
    };
    Ok((output, checkpoint))
}

pub fn execute(spec: &RunSpec) -> Result<RunOutput> {
    let cfg = &spec.config;
    match &spec.protocol {
        Protocol::Rq1 { datasets, epochs } => run_rq1(cfg, datasets, epochs),
        Protocol::Rq2 { datasets, seed_sizes, epochs } => run_rq2(cfg, datasets, seed_sizes, epochs),
        Protocol::Rq3 => run_rq3(cfg),
        Protocol::Train { seeds } => {
            let mut silent = |_: &EpochMetrics| {};
            match cfg.train.precision {
                Precision::F32 => train_single::<f32>(cfg, seeds.as_ref(), &mut silent).map(|(o, _)| o),
                Precision::F64 => train_single::<f64>(cfg, seeds.as_ref(), &mut silent).map(|(o, _)| o),
            }
        }
        Protocol::BaselineSupervised => run_baseline_supervised(cfg),
        Protocol::BaselineKnn { k } => {
            let prepared = load_all(cfg, &[cfg.dataset])?;
            let knn = run_baseline_knn(&prepared[0], *k)?;
            Ok(RunOutput {
                cells: Vec::new(),
                table: ResultsTable::default(),
                spread: None,
                knn: Some(knn),
                checksums: checksum_map(&prepared),
            })
        }
    }
}
