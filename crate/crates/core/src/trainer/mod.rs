//! The temporal-ensembling training loop.

pub mod ensemble;
pub mod episode;

pub use ensemble::EnsembleState;
pub use episode::{
    accuracy_from_probs, aggregate_episodes, argmax, evaluate, mean_std, predict_all, run_episode,
    run_episode_with_seeds, select_seeds, train_episode, train_epoch, EnsembleSource, EpisodeAggregate,
    EpisodeData, EpisodeResult, EpochLosses, EpochMetrics, EpochRngs, MeanStd, Precision, TrainConfig,
};
