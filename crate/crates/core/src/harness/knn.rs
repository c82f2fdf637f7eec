use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::PreparedData;
use crate::data::{Dataset, DatasetKind};
use crate::error::{Error, Result};
use crate::trainer::accuracy_from_probs;

pub const KNN_METHOD: &str = "k-NN (this artifact's configuration)";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnResult {
    pub method: String,
    pub dataset: DatasetKind,
    pub k: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub accuracy: f64,
}

fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// Majority vote over the `k` nearest training images (Euclidean distance).
///
/// Neighbors at equal distance are ordered by training index. Vote ties go to
/// the class with the smallest mean neighbor distance, then the lowest class.
pub fn knn_classify(train: &Dataset, queries: &Dataset, k: usize) -> Result<Vec<u8>> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    if train.is_empty() {
        return Err(Error::InvalidConfig("k-NN needs a non-empty training set".into()));
    }
    let k = k.min(train.len());
    let classes = train.num_classes;
    Ok((0..queries.len())
        .into_par_iter()
        .map(|q| {
            let query = queries.image(q);
            // k smallest (distance, index), kept sorted
            let mut nearest: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
            for i in 0..train.len() {
                let d = squared_distance(query, train.image(i));
                if nearest.len() == k && d >= nearest[k - 1].0 {
                    continue;
                }
                let pos = nearest.partition_point(|&(nd, _)| nd <= d);
                nearest.insert(pos, (d, i));
                nearest.truncate(k);
            }
            let mut votes = vec![0usize; classes];
            let mut dist_sum = vec![0.0f64; classes];
            for &(d, i) in &nearest {
                let c = train.labels[i] as usize;
                votes[c] += 1;
                dist_sum[c] += d.sqrt();
            }
            let mut best = 0;
            for c in 1..classes {
                let better = votes[c] > votes[best]
                    || (votes[c] == votes[best]
                        && votes[c] > 0
                        && dist_sum[c] / (votes[c] as f64) < dist_sum[best] / votes[best] as f64);
                if better {
                    best = c;
                }
            }
            best as u8
        })
        .collect())
}

/// k-NN on the normalized pixels of the prepared (capped) splits.
pub fn run_baseline_knn(prepared: &PreparedData, k: usize) -> Result<KnnResult> {
    let test = &prepared.data.test;
    let predicted = knn_classify(&prepared.data.train, test, k)?;
    let classes = test.num_classes;
    let mut one_hot = vec![0.0f64; predicted.len() * classes];
    for (i, &p) in predicted.iter().enumerate() {
        one_hot[i * classes + p as usize] = 1.0;
    }
    Ok(KnnResult {
        method: KNN_METHOD.to_string(),
        dataset: prepared.dataset,
        k,
        train_samples: prepared.data.train.len(),
        test_samples: test.len(),
        accuracy: accuracy_from_probs(&one_hot, &test.labels, classes)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Role, IMAGE_PIXELS, NUM_CLASSES};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn points(values: &[(f32, u8)], role: Role) -> Dataset {
        let mut images = Vec::new();
        for &(v, _) in values {
            let mut img = vec![0.0f32; IMAGE_PIXELS];
            img[0] = v;
            images.extend(img);
        }
        Dataset {
            images,
            labels: values.iter().map(|&(_, l)| l).collect(),
            num_classes: NUM_CLASSES,
            role,
            normalization: None,
        }
    }

    #[test]
    fn one_neighbor_on_own_training_set_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let values: Vec<(f32, u8)> = (0..40).map(|i| (rng.random::<f32>() * 10.0, (i % 10) as u8)).collect();
        let d = points(&values, Role::Train);
        assert_eq!(knn_classify(&d, &d, 1).unwrap(), d.labels);
    }

    #[test]
    fn equidistant_neighbors_prefer_lower_index() {
        let train = points(&[(-1.0, 4), (1.0, 2)], Role::Train);
        let query = points(&[(0.0, 0)], Role::Test);
        assert_eq!(knn_classify(&train, &query, 1).unwrap(), vec![4]);
        let swapped = points(&[(1.0, 2), (-1.0, 4)], Role::Train);
        assert_eq!(knn_classify(&swapped, &query, 1).unwrap(), vec![2]);
    }

    #[test]
    fn vote_ties_prefer_smaller_mean_distance_then_lower_class() {
        // two votes each for classes 3 and 1; class 3 neighbors are closer
        let train = points(&[(0.5, 3), (-0.5, 3), (2.0, 1), (-2.0, 1)], Role::Train);
        let query = points(&[(0.0, 0)], Role::Test);
        assert_eq!(knn_classify(&train, &query, 4).unwrap(), vec![3]);
        // identical mean distances fall back to the lower class
        let even = points(&[(1.0, 6), (-1.0, 2)], Role::Train);
        assert_eq!(knn_classify(&even, &query, 2).unwrap(), vec![2]);
    }

    #[test]
    fn majority_wins_over_distance() {
        let train = points(&[(0.1, 7), (1.0, 5), (1.1, 5)], Role::Train);
        let query = points(&[(0.0, 0)], Role::Test);
        assert_eq!(knn_classify(&train, &query, 3).unwrap(), vec![5]);
        assert_eq!(knn_classify(&train, &query, 1).unwrap(), vec![7]);
    }

    #[test]
    fn matches_brute_force_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mk = |n: usize, rng: &mut ChaCha8Rng, role| {
            let images = (0..n * IMAGE_PIXELS).map(|_| rng.random::<f32>()).collect();
            let labels = (0..n).map(|_| rng.random_range(0..10u8)).collect();
            Dataset { images, labels, num_classes: NUM_CLASSES, role, normalization: None }
        };
        let train = mk(60, &mut rng, Role::Train);
        let test = mk(15, &mut rng, Role::Test);
        let got = knn_classify(&train, &test, 5).unwrap();
        for q in 0..test.len() {
            let mut all: Vec<(f64, usize)> =
                (0..train.len()).map(|i| (squared_distance(test.image(q), train.image(i)), i)).collect();
            all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut votes = [0usize; 10];
            let mut sums = [0.0f64; 10];
            for &(d, i) in &all[..5] {
                votes[train.labels[i] as usize] += 1;
                sums[train.labels[i] as usize] += d.sqrt();
            }
            let top = *votes.iter().max().unwrap();
            let expected = (0..10)
                .filter(|&c| votes[c] == top)
                .min_by(|&a, &b| (sums[a] / top as f64).total_cmp(&(sums[b] / top as f64)).then(a.cmp(&b)))
                .unwrap();
            assert_eq!(got[q] as usize, expected);
        }
    }

    #[test]
    fn zero_k_is_rejected() {
        let d = points(&[(0.0, 0)], Role::Train);
        assert!(knn_classify(&d, &d, 0).is_err());
    }
}
