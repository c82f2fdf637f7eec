use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{seed_name, sha256_file, FileChecksum, KnnResult, ResultsTable, RunOutput, RunSpec, SeedSpreadReport};
use crate::error::{Error, Result};

pub const CURVE_HEADER: &str = "epoch,sup_loss,unsup_loss,w_t,test_acc,episode,sampling_seed";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const RESULTS_FILE: &str = "results.json";
pub const CURVES_FILE: &str = "curves.csv";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub cell: String,
    pub episode: usize,
    pub sampling_seed: u64,
    pub rng_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub library: String,
    pub library_version: String,
    pub config_fingerprint: String,
    /// Training configuration fingerprint of every cell.
    pub train_fingerprints: BTreeMap<String, String>,
    pub run: RunSpec,
    pub datasets: BTreeMap<String, Vec<FileChecksum>>,
    pub rng_seeds: Vec<SeedRecord>,
    pub curve_columns: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsDocument {
    pub table: ResultsTable,
    pub spread: Option<SeedSpreadReport>,
    pub knn: Option<KnnResult>,
}

fn write(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Per-epoch records of every episode in a cell.
pub fn curves_csv(cell: &super::CellResult) -> String {
    let mut out = String::from(CURVE_HEADER);
    out.push('\n');
    for (episode, r) in cell.episodes.iter().enumerate() {
        for m in &r.epochs {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                m.epoch, m.supervised_loss, m.unsupervised_loss, m.w_t, m.test_accuracy, episode, r.sampling_seed
            )
            .expect("writing to a String");
        }
    }
    out
}

pub fn build_manifest(spec: &RunSpec, output: &RunOutput) -> Manifest {
    let mut train_fingerprints = BTreeMap::new();
    let mut rng_seeds = Vec::new();
    for cell in &output.cells {
        let key = cell.key();
        if let Some(first) = cell.episodes.first() {
            train_fingerprints.insert(key.clone(), first.config_fingerprint.clone());
        }
        for (episode, r) in cell.episodes.iter().enumerate() {
            rng_seeds.push(SeedRecord {
                cell: key.clone(),
                episode,
                sampling_seed: r.sampling_seed,
                rng_seed: r.rng_seed,
            });
        }
    }
    Manifest {
        library: env!("CARGO_PKG_NAME").to_string(),
        library_version: env!("CARGO_PKG_VERSION").to_string(),
        config_fingerprint: spec.config.fingerprint(),
        train_fingerprints,
        run: spec.clone(),
        datasets: output.checksums.clone(),
        rng_seeds,
        curve_columns: CURVE_HEADER.split(',').map(String::from).collect(),
    }
}

/// Writes `manifest.json`, `results.json` and, per cell, `curves.csv` and one
/// seed-selection file per episode. Returns the written paths in order.
pub fn export_results(spec: &RunSpec, output: &RunOutput, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let mut put = |path: PathBuf, bytes: Vec<u8>| -> Result<()> {
        write(&path, &bytes)?;
        written.push(path);
        Ok(())
    };
    put(dir.join(MANIFEST_FILE), json(&build_manifest(spec, output))?)?;
    let doc = ResultsDocument { table: output.table.clone(), spread: output.spread.clone(), knn: output.knn.clone() };
    put(dir.join(RESULTS_FILE), json(&doc)?)?;
    for cell in &output.cells {
        let cell_dir = dir.join(cell.key());
        put(cell_dir.join(CURVES_FILE), curves_csv(cell).into_bytes())?;
        for r in &cell.episodes {
            put(cell_dir.join("seeds").join(format!("{}.json", seed_name(r.sampling_seed))), json(&r.seeds)?)?;
        }
    }
    Ok(written)
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Recomputes every dataset checksum listed in the manifest.
pub fn verify_manifest(path: &Path) -> Result<Manifest> {
    let manifest = read_manifest(path)?;
    for files in manifest.datasets.values() {
        for f in files {
            let actual = sha256_file(&f.path)?;
            if actual != f.sha256 {
                return Err(Error::ChecksumMismatch { path: f.path.clone(), expected: f.sha256.clone(), actual });
            }
        }
    }
    Ok(manifest)
}
