use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tempens::data::{DatasetKind, SeedSelection, DATA_DIR_ENV};
use tempens::harness::export::{export_results, read_manifest, verify_manifest};
use tempens::harness::{execute, train_single, ExperimentConfig, Protocol, RunOutput, RunSpec};
use tempens::nn::gradcheck::{check_objective, random_batch_objective, GradCheckOptions};
use tempens::nn::{AdamConfig, Network, NetworkConfig};
use tempens::real::Real;
use tempens::trainer::{EnsembleSource, EpochMetrics, Precision, TrainConfig};

#[derive(Parser)]
#[command(name = "tempens", version, about = "Temporal ensembling experiments on MNIST-family datasets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Datasets × epoch counts at a fixed seed size.
    Rq1 {
        #[command(flatten)]
        common: Common,
        /// Datasets in the grid.
        #[arg(long, value_delimiter = ',', default_value = "mnist,kmnist,fashion-mnist")]
        datasets: Vec<String>,
    },
    /// Datasets × seed sizes × epoch counts.
    Rq2 {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "mnist,kmnist,fashion-mnist")]
        datasets: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "100,200,300,400,500")]
        seed_sizes: Vec<usize>,
    },
    /// Many sampling seeds at a fixed seed size, with a spread report.
    Rq3 {
        #[command(flatten)]
        common: Common,
    },
    /// k-nearest-neighbor baseline on normalized pixels.
    BaselineKnn {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 5)]
        k: usize,
    },
    /// The same network trained on every label with the consistency term off.
    BaselineSupervised {
        #[command(flatten)]
        common: Common,
    },
    /// A single episode.
    Train {
        #[command(flatten)]
        common: Common,
        /// Train on the labeled indices of an exported seed file.
        #[arg(long)]
        seed_file: Option<PathBuf>,
        /// Save the final parameters and optimizer state.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Finite-difference check of the analytic gradients in double precision.
    CheckGradients {
        #[arg(long, default_value_t = 4)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Entries checked per parameter tensor; 0 checks all of them.
        #[arg(long, default_value_t = 200)]
        entries: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Use a reduced network (3/4 maps on 8×8 inputs) and check every entry.
        #[arg(long)]
        small: bool,
    },
    /// Re-run the experiment recorded in a manifest.
    Replay {
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check the dataset checksums recorded in a manifest.
    Verify { manifest: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Clone, Copy, ValueEnum)]
enum SourceArg {
    Noisy,
    Clean,
}

#[derive(Args)]
struct Common {
    #[arg(long, default_value = "mnist")]
    dataset: String,
    #[arg(long, env = DATA_DIR_ENV, default_value = "data")]
    data_dir: PathBuf,
    #[arg(long, default_value_t = 100)]
    seed_size: usize,
    /// Epoch counts; grid commands accept a comma-separated list.
    #[arg(long, value_delimiter = ',', default_value = "30")]
    epochs: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    episodes: usize,
    /// Explicit sampling seeds, one per episode.
    #[arg(long, value_delimiter = ',')]
    sampling_seeds: Option<Vec<u64>>,
    #[arg(long, default_value_t = 0.6)]
    alpha: f64,
    #[arg(long, default_value_t = 0.002)]
    lr: f64,
    #[arg(long, default_value_t = 100)]
    batch_size: usize,
    #[arg(long, default_value_t = 80)]
    ramp_length: usize,
    #[arg(long, default_value_t = 30.0)]
    w_max: f64,
    #[arg(long, default_value_t = 0.15)]
    noise_std: f64,
    /// Stratified training cap; 0 uses the whole split.
    #[arg(long, default_value_t = 10_000)]
    subset_train: usize,
    /// Stratified test cap; 0 uses the whole split.
    #[arg(long, default_value_t = 2_000)]
    subset_test: usize,
    #[arg(long, default_value_t = 0)]
    subset_seed: u64,
    /// Draw labeled seeds over the whole set instead of per class.
    #[arg(long)]
    unbalanced: bool,
    #[arg(long, value_enum, default_value = "noisy")]
    ensemble_source: SourceArg,
    /// Episodes trained concurrently.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[arg(long, value_enum, default_value = "f32")]
    precision: PrecisionArg,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

fn parse_dataset(s: &str) -> Result<DatasetKind> {
    DatasetKind::parse(s).with_context(|| format!("unknown dataset {s:?} (expected mnist, kmnist or fashion-mnist)"))
}

fn cap(n: usize) -> Option<usize> {
    (n > 0).then_some(n)
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let epochs = *self.epochs.first().context("--epochs needs a value")?;
        let cfg = ExperimentConfig {
            dataset: parse_dataset(&self.dataset)?,
            data_dir: self.data_dir.clone(),
            train: TrainConfig {
                network: NetworkConfig::default(),
                adam: AdamConfig { learning_rate: self.lr, ..AdamConfig::default() },
                alpha: self.alpha,
                batch_size: self.batch_size,
                noise_std: self.noise_std,
                ramp_length: self.ramp_length,
                max_weight: self.w_max,
                epochs,
                seed_size: self.seed_size,
                balanced: !self.unbalanced,
                ensemble_source: match self.ensemble_source {
                    SourceArg::Noisy => EnsembleSource::Noisy,
                    SourceArg::Clean => EnsembleSource::Clean,
                },
                supervised_only: false,
                precision: match self.precision {
                    PrecisionArg::F32 => Precision::F32,
                    PrecisionArg::F64 => Precision::F64,
                },
            },
            episodes: self.sampling_seeds.as_ref().map_or(self.episodes, Vec::len),
            sampling_seeds: self.sampling_seeds.clone(),
            max_train_samples: cap(self.subset_train),
            max_test_samples: cap(self.subset_test),
            subset_seed: self.subset_seed,
            output_dir: self.out.clone(),
            threads: self.threads,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn single_epoch_count(&self) -> Result<()> {
        if self.epochs.len() != 1 {
            bail!("this command takes a single --epochs value");
        }
        Ok(())
    }
}

fn report(spec: &RunSpec, output: &RunOutput, dir: &Path) -> Result<()> {
    let files = export_results(spec, output, dir).with_context(|| format!("exporting to {}", dir.display()))?;
    if !output.table.rows.is_empty() {
        print!("{}", output.table.render());
    }
    if let Some(s) = &output.spread {
        for (name, acc) in &s.best_by_seed {
            println!("{name}: best accuracy {:.2}", 100.0 * acc);
        }
        println!("spread (max - min): {:.2} points", 100.0 * s.spread);
    }
    if let Some(k) = &output.knn {
        println!("{} on {} (k={}): {:.2}%", k.method, k.dataset, k.k, 100.0 * k.accuracy);
    }
    eprintln!("wrote {} files under {}", files.len(), dir.display());
    Ok(())
}

fn run_spec(spec: RunSpec) -> Result<()> {
    let output = execute(&spec)?;
    report(&spec, &output, &spec.config.output_dir.clone())
}

fn train<S: Real>(spec: &RunSpec, seeds: Option<&SeedSelection>, checkpoint: Option<&Path>) -> Result<()> {
    let mut progress = |m: &EpochMetrics| {
        eprintln!(
            "epoch {:>4}  sup {:.4}  unsup {:.5}  w {:.4}  test {:.4}",
            m.epoch, m.supervised_loss, m.unsupervised_loss, m.w_t, m.test_accuracy
        )
    };
    let (output, ckpt) = train_single::<S>(&spec.config, seeds, &mut progress)?;
    if let Some(path) = checkpoint {
        ckpt.save(path).with_context(|| format!("saving checkpoint {}", path.display()))?;
    }
    report(spec, &output, &spec.config.output_dir)
}

fn check_gradients(batch: usize, seed: u64, entries: usize, tolerance: f64, small: bool) -> Result<bool> {
    let cfg = if small {
        NetworkConfig { conv1_maps: 3, conv2_maps: 4, input_shape: (1, 8, 8), ..NetworkConfig::default() }
    } else {
        NetworkConfig::default()
    };
    let net: Network<f64> = Network::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let objective = random_batch_objective(&net, batch, seed.wrapping_add(1));
    let opts = GradCheckOptions {
        tolerance,
        max_entries_per_tensor: if small || entries == 0 { None } else { Some(entries) },
        sample_seed: seed,
        ..GradCheckOptions::default()
    };
    let report = check_objective(&net, &objective, &opts)?;
    for t in &report.tensors {
        println!("{:<8} checked {:>6}  max relative error {:.3e}", t.name, t.checked, t.max_rel_error);
    }
    for l in &report.layers {
        println!("{:<8} {}  ({:.3e} vs tolerance {:.0e})", l.layer, if l.passed { "PASS" } else { "FAIL" }, l.max_rel_error, tolerance);
    }
    Ok(report.passed())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Rq1 { common, datasets } => {
            let datasets = datasets.iter().map(|d| parse_dataset(d)).collect::<Result<_>>()?;
            let protocol = Protocol::Rq1 { datasets, epochs: common.epochs.clone() };
            run_spec(RunSpec { protocol, config: common.config()? })?;
        }
        Command::Rq2 { common, datasets, seed_sizes } => {
            let datasets = datasets.iter().map(|d| parse_dataset(d)).collect::<Result<_>>()?;
            let protocol = Protocol::Rq2 { datasets, seed_sizes, epochs: common.epochs.clone() };
            run_spec(RunSpec { protocol, config: common.config()? })?;
        }
        Command::Rq3 { common } => {
            common.single_epoch_count()?;
            run_spec(RunSpec { protocol: Protocol::Rq3, config: common.config()? })?;
        }
        Command::BaselineKnn { common, k } => {
            run_spec(RunSpec { protocol: Protocol::BaselineKnn { k }, config: common.config()? })?;
        }
        Command::BaselineSupervised { common } => {
            common.single_epoch_count()?;
            run_spec(RunSpec { protocol: Protocol::BaselineSupervised, config: common.config()? })?;
        }
        Command::Train { common, seed_file, checkpoint } => {
            common.single_epoch_count()?;
            let seeds: Option<SeedSelection> = match &seed_file {
                Some(path) => {
                    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                    Some(serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?)
                }
                None => None,
            };
            let mut config = common.config()?;
            let sampling_seed = seeds.as_ref().map_or(config.sampling_seeds()[0], |s| s.sampling_seed);
            if let Some(s) = &seeds {
                config.train.seed_size = s.seed_size;
                config.train.balanced = s.balanced;
            }
            config.episodes = 1;
            config.sampling_seeds = Some(vec![sampling_seed]);
            let spec = RunSpec { protocol: Protocol::Train { seeds: seeds.clone() }, config };
            match spec.config.train.precision {
                Precision::F32 => train::<f32>(&spec, seeds.as_ref(), checkpoint.as_deref())?,
                Precision::F64 => train::<f64>(&spec, seeds.as_ref(), checkpoint.as_deref())?,
            }
        }
        Command::CheckGradients { batch, seed, entries, tolerance, small } => {
            return check_gradients(batch, seed, entries, tolerance, small);
        }
        Command::Replay { manifest, out } => {
            let recorded = read_manifest(&manifest)?;
            let mut spec = recorded.run;
            spec.config.output_dir = out;
            run_spec(spec)?;
        }
        Command::Verify { manifest } => {
            let m = verify_manifest(&manifest)?;
            let files: usize = m.datasets.values().map(Vec::len).sum();
            println!("{files} dataset files match the manifest");
        }
    }
    Ok(true)
}
