mod common;

use tempens::data::{load_split, normalize_channelwise, stratified_subset, DatasetKind, Role};
use tempens::nn::{AdamState, Network};
use tempens::trainer::{EnsembleState, EpochRngs, TrainConfig, train_epoch};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn fully_labeled_training_without_consistency_reduces_loss() {
    let dir = common::real_data_dir();
    let full = load_split(&dir, DatasetKind::Mnist, Role::Train).expect("MNIST training split");
    let subset = full.subset(&stratified_subset(&full, 256, 0));
    let (train, _, _) = normalize_channelwise(subset, Vec::new()).unwrap();

    let cfg = TrainConfig::default();
    let mut net: Network<f32> = Network::init(cfg.network, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let mut adam = AdamState::new(cfg.adam, &net);
    let mut rngs = EpochRngs::from_seed(1);
    let labeled = vec![true; train.len()];
    let targets = vec![0.0; train.len() * 10];
    let mut losses = Vec::new();
    for _ in 0..5 {
        let mut ens = EnsembleState::new(train.len(), 10, cfg.alpha).unwrap();
        let l = train_epoch(&mut net, &mut adam, &train, &labeled, &targets, 0.0, &cfg, &mut rngs, Some(&mut ens)).unwrap();
        ens.update().expect("one prediction row per training sample");
        losses.push(l.supervised);
    }
    eprintln!("supervised losses: {losses:?}");
    // least-squares slope over the five epochs
    let mean = losses.iter().sum::<f64>() / 5.0;
    let slope: f64 = losses.iter().enumerate().map(|(i, l)| (i as f64 - 2.0) * (l - mean)).sum::<f64>() / 10.0;
    assert!(slope < 0.0, "{losses:?}");
    assert!(losses[4] < losses[0], "{losses:?}");
}
