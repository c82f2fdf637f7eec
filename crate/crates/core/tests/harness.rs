mod common;

use std::fs;

use tempens::data::{DatasetKind, SeedSelection};
use tempens::harness::export::{curves_csv, export_results, read_manifest, verify_manifest, CURVE_HEADER};
use tempens::harness::{
    execute, missing_files, prepare_data, run_baseline_knn, run_rq1, run_rq2, run_rq3, ExperimentConfig, Protocol,
    ResultsTable, RunSpec,
};
use tempens::trainer::{aggregate_episodes, mean_std, run_episode, run_episode_with_seeds, TrainConfig};
use tempens::Error;

fn tiny_config(data_dir: &std::path::Path) -> ExperimentConfig {
    ExperimentConfig {
        dataset: DatasetKind::Mnist,
        data_dir: data_dir.to_path_buf(),
        train: TrainConfig { epochs: 2, seed_size: 20, batch_size: 50, ..TrainConfig::default() },
        episodes: 2,
        sampling_seeds: None,
        max_train_samples: Some(150),
        max_test_samples: Some(40),
        subset_seed: 0,
        output_dir: data_dir.join("out"),
        threads: 1,
    }
}

fn synthetic_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    for (i, kind) in DatasetKind::ALL.into_iter().enumerate() {
        common::write_synthetic(dir.path(), kind, 200, 60, i as u64);
    }
    dir
}

#[test]
fn rq1_grid_emits_one_row_per_cell() {
    let dir = synthetic_dir();
    let cfg = tiny_config(dir.path());
    let out = run_rq1(&cfg, &[DatasetKind::Mnist, DatasetKind::Kmnist], &[1, 2]).unwrap();
    assert_eq!(out.table.rows.len(), 4);
    assert_eq!(out.cells.len(), 4);
    for row in &out.table.rows {
        assert_eq!(row.episodes.len(), 2);
        assert_eq!(row.seed_size, 20);
    }
    assert_eq!(out.checksums.len(), 2);
}

#[test]
fn rq_cell_is_a_composition_of_episodes_and_aggregation() {
    let dir = synthetic_dir();
    let cfg = tiny_config(dir.path());
    let out = run_rq2(&cfg, &[DatasetKind::FashionMnist], &[10, 30], &[2]).unwrap();
    let prepared = prepare_data(&cfg, DatasetKind::FashionMnist).unwrap();
    let train = TrainConfig { seed_size: 30, ..cfg.train.clone() };
    let manual: Vec<_> = cfg
        .sampling_seeds()
        .into_iter()
        .map(|s| run_episode(&train, &prepared.data, s, s).unwrap())
        .collect();
    let agg = aggregate_episodes(&manual).unwrap();
    let row = out.table.row(DatasetKind::FashionMnist, 2, 30).unwrap();
    assert_eq!(row.best_accuracy, agg.best_accuracy);
    assert_eq!(row.final_accuracy, agg.final_accuracy);
    assert_eq!(out.cells[1].episodes, manual);
}

#[test]
fn exported_aggregates_match_recomputation_from_episode_values() {
    let dir = synthetic_dir();
    let cfg = ExperimentConfig { episodes: 3, ..tiny_config(dir.path()) };
    let spec = RunSpec { protocol: Protocol::Rq3, config: cfg };
    let out = execute(&spec).unwrap();
    let outdir = dir.path().join("export");
    export_results(&spec, &out, &outdir).unwrap();
    let doc: serde_json::Value = serde_json::from_slice(&fs::read(outdir.join("results.json")).unwrap()).unwrap();
    let table: ResultsTable = serde_json::from_value(doc["table"].clone()).unwrap();
    for row in &table.rows {
        let best: Vec<f64> = row.episodes.iter().map(|e| e.best_accuracy).collect();
        let fin: Vec<f64> = row.episodes.iter().map(|e| e.final_accuracy).collect();
        assert_eq!(mean_std(&best).unwrap(), row.best_accuracy);
        assert_eq!(mean_std(&fin).unwrap(), row.final_accuracy);
    }
    assert_eq!(table, out.table);
}

#[test]
fn curve_records_cover_every_episode_epoch() {
    let dir = synthetic_dir();
    let cfg = ExperimentConfig { episodes: 3, ..tiny_config(dir.path()) };
    let out = run_rq3(&cfg).unwrap();
    let csv = curves_csv(&out.cells[0]);
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(CURVE_HEADER));
    assert_eq!(CURVE_HEADER, "epoch,sup_loss,unsup_loss,w_t,test_acc,episode,sampling_seed");
    assert_eq!(lines.count(), 3 * 2);
}

#[test]
fn re_export_is_byte_identical() {
    let dir = synthetic_dir();
    let spec = RunSpec { protocol: Protocol::Rq3, config: tiny_config(dir.path()) };
    let out = execute(&spec).unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    export_results(&spec, &out, &a).unwrap();
    export_results(&spec, &out, &b).unwrap();
    assert_eq!(common::snapshot(&a), common::snapshot(&b));
}

#[test]
fn manifest_replay_reproduces_exports_bitwise() {
    let dir = synthetic_dir();
    let spec = RunSpec {
        protocol: Protocol::Rq1 { datasets: vec![DatasetKind::Mnist], epochs: vec![2] },
        config: tiny_config(dir.path()),
    };
    let first = dir.path().join("first");
    export_results(&spec, &execute(&spec).unwrap(), &first).unwrap();
    let recorded = read_manifest(&first.join("manifest.json")).unwrap();
    let second = dir.path().join("second");
    export_results(&recorded.run, &execute(&recorded.run).unwrap(), &second).unwrap();
    assert_eq!(common::snapshot(&first), common::snapshot(&second));
}

#[test]
fn manifest_records_fingerprint_version_checksums_and_seeds() {
    let dir = synthetic_dir();
    let spec = RunSpec { protocol: Protocol::Rq3, config: tiny_config(dir.path()) };
    let outdir = dir.path().join("m");
    export_results(&spec, &execute(&spec).unwrap(), &outdir).unwrap();
    let m = verify_manifest(&outdir.join("manifest.json")).unwrap();
    assert_eq!(m.config_fingerprint, spec.config.fingerprint());
    assert_eq!(m.library_version, env!("CARGO_PKG_VERSION"));
    assert_eq!(m.datasets["mnist"].len(), 4);
    assert!(m.datasets["mnist"].iter().all(|f| f.sha256.len() == 64));
    assert_eq!(m.rng_seeds.iter().map(|r| r.sampling_seed).collect::<Vec<_>>(), vec![0, 1]);
}

#[test]
fn manifest_verification_detects_a_modified_dataset_file() {
    let dir = synthetic_dir();
    let spec = RunSpec { protocol: Protocol::Rq3, config: tiny_config(dir.path()) };
    let outdir = dir.path().join("m");
    export_results(&spec, &execute(&spec).unwrap(), &outdir).unwrap();
    let manifest = outdir.join("manifest.json");
    verify_manifest(&manifest).unwrap();

    let target = dir.path().join("mnist/t10k-labels-idx1-ubyte.gz");
    let mut bytes = fs::read(&target).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x01;
    fs::write(&target, bytes).unwrap();
    match verify_manifest(&manifest) {
        Err(Error::ChecksumMismatch { path, .. }) => assert_eq!(path, target),
        other => panic!("expected a checksum mismatch, got {other:?}"),
    }
}

#[test]
fn exported_seed_file_reproduces_its_episode() {
    let dir = synthetic_dir();
    let cfg = ExperimentConfig { sampling_seeds: Some(vec![14, 3]), ..tiny_config(dir.path()) };
    let spec = RunSpec { protocol: Protocol::Rq3, config: cfg.clone() };
    let out = execute(&spec).unwrap();
    let outdir = dir.path().join("seeds");
    export_results(&spec, &out, &outdir).unwrap();
    let cell_dir = outdir.join(out.cells[0].key());
    let seed_file = cell_dir.join("seeds/seed_14.json");
    let seeds: SeedSelection = serde_json::from_slice(&fs::read(seed_file).unwrap()).unwrap();
    assert_eq!(seeds.sampling_seed, 14);
    let prepared = prepare_data(&cfg, DatasetKind::Mnist).unwrap();
    let again = run_episode_with_seeds(&cfg.train, &prepared.data, &seeds, seeds.sampling_seed).unwrap();
    assert_eq!(again, out.cells[0].episodes[0]);
    let spread = out.spread.unwrap();
    assert!(spread.best_by_seed.contains_key("seed_14"));
    assert!(spread.best_by_seed.contains_key("seed_3"));
    assert_eq!(spread.spread, spread.max - spread.min);
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = synthetic_dir();
    let one = tiny_config(dir.path());
    let two = ExperimentConfig { threads: 2, ..one.clone() };
    assert_eq!(run_rq3(&one).unwrap().cells, run_rq3(&two).unwrap().cells);
}

#[test]
fn supervised_baseline_differs_only_in_loss_flag() {
    let dir = synthetic_dir();
    let cfg = tiny_config(dir.path());
    let out = execute(&RunSpec { protocol: Protocol::BaselineSupervised, config: cfg.clone() }).unwrap();
    let ssl = execute(&RunSpec { protocol: Protocol::Rq3, config: cfg.clone() }).unwrap();
    let sup_cfg = TrainConfig { supervised_only: true, ..cfg.train.clone() };
    assert_eq!(out.cells[0].episodes[0].config_fingerprint, sup_cfg.fingerprint());
    assert_ne!(ssl.cells[0].episodes[0].config_fingerprint, sup_cfg.fingerprint());
    assert_eq!(out.cells[0].seed_size, 150);
    assert!(out.cells[0].episodes[0].epochs.iter().all(|m| m.w_t == 0.0));
}

#[test]
fn knn_baseline_reports_its_configuration() {
    let dir = synthetic_dir();
    let prepared = prepare_data(&tiny_config(dir.path()), DatasetKind::Kmnist).unwrap();
    let r = run_baseline_knn(&prepared, 5).unwrap();
    assert_eq!(r.method, "k-NN (this artifact's configuration)");
    assert_eq!((r.k, r.train_samples, r.test_samples), (5, 150, 40));
    assert!(r.accuracy > 0.9, "separable synthetic data: {}", r.accuracy);
}

#[test]
fn missing_dataset_fails_before_training() {
    let dir = tempfile::tempdir().unwrap();
    common::write_synthetic(dir.path(), DatasetKind::Mnist, 100, 20, 0);
    let cfg = tiny_config(dir.path());
    assert_eq!(missing_files(dir.path(), DatasetKind::Kmnist).len(), 4);
    assert!(missing_files(dir.path(), DatasetKind::Mnist).is_empty());
    match run_rq1(&cfg, &[DatasetKind::Mnist, DatasetKind::Kmnist], &[1]) {
        Err(Error::MissingDataset { dataset, .. }) => assert_eq!(dataset, "kmnist"),
        other => panic!("expected MissingDataset, got {other:?}"),
    }
}

#[test]
fn oversized_subset_cap_is_rejected() {
    let dir = synthetic_dir();
    let cfg = ExperimentConfig { max_train_samples: Some(201), ..tiny_config(dir.path()) };
    assert!(matches!(prepare_data(&cfg, DatasetKind::Mnist), Err(Error::InvalidConfig(_))));
}

#[test]
fn explicit_seed_list_must_match_episode_count() {
    let dir = synthetic_dir();
    let cfg = ExperimentConfig { sampling_seeds: Some(vec![1, 2, 3]), ..tiny_config(dir.path()) };
    assert!(matches!(run_rq3(&cfg), Err(Error::InvalidConfig(_))));
}

#[test]
fn test_split_is_normalized_with_training_statistics() {
    let dir = synthetic_dir();
    let prepared = prepare_data(&tiny_config(dir.path()), DatasetKind::Mnist).unwrap();
    let train = &prepared.data.train.images;
    let n = train.len() as f64;
    let mean = train.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = train.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    assert!(mean.abs() < 1e-3 && (var.sqrt() - 1.0).abs() < 1e-3);
    assert_eq!(prepared.data.test.normalization, Some(prepared.normalization));
}
