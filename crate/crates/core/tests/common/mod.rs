#![allow(dead_code)]

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use flate2::write::GzEncoder;
use flate2::Compression;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tempens::data::{DatasetKind, DATA_DIR_ENV};
use tempens::idx::{serialize_idx, RawIdxTensor};

/// The real datasets: `$TEMPENS_DATA_DIR`, else `data/` at the workspace root.
pub fn real_data_dir() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data"))
}

fn write_gz(path: &Path, bytes: &[u8]) {
    let mut enc = GzEncoder::new(Vec::new(), Compression::fast());
    enc.write_all(bytes).unwrap();
    fs::write(path, enc.finish().unwrap()).unwrap();
}

/// Class `c` brightens rows `3c..3c+3`; pixel noise keeps samples distinct.
fn synthetic_split(n: usize, rng: &mut ChaCha8Rng) -> (RawIdxTensor, RawIdxTensor) {
    let mut pixels = Vec::with_capacity(n * 784);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % 10;
        for p in 0..784 {
            let band = (p / 28) / 3 == c;
            let base: u8 = if band { 200 } else { 20 };
            pixels.push(base.saturating_add(rng.random_range(0..40)));
        }
        labels.push(c as u8);
    }
    (
        RawIdxTensor::new(vec![n, 28, 28], pixels).unwrap(),
        RawIdxTensor::new(vec![n], labels).unwrap(),
    )
}

/// Writes the four gzipped IDX files of a small separable dataset.
pub fn write_synthetic(data_dir: &Path, kind: DatasetKind, train: usize, test: usize, seed: u64) {
    let dir = data_dir.join(kind.name());
    fs::create_dir_all(&dir).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (prefix, n) in [("train", train), ("t10k", test)] {
        let (images, labels) = synthetic_split(n, &mut rng);
        write_gz(&dir.join(format!("{prefix}-images-idx3-ubyte.gz")), &serialize_idx(&images));
        write_gz(&dir.join(format!("{prefix}-labels-idx1-ubyte.gz")), &serialize_idx(&labels));
    }
}

/// Recursively lists files below `dir` with their contents, sorted by path.
pub fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}
