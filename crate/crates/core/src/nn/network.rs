use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use super::config::NetworkConfig;
use super::layers::{
    add_channel_bias, channel_sums, col2im, dropout_mask, im2col, maxpool, maxpool_backward,
    relu_backward_inplace, relu_inplace, softmax_rows,
};
use super::params::{LayerGrads, WnLayer};
use crate::error::{Error, Result};
use crate::real::{row_major, transposed, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Dropout active, forward cache recorded.
    Train,
    /// Deterministic inference.
    Eval,
}

/// Names of the parameter tensors in [`Network::tensors`] order.
pub const TENSOR_NAMES: [&str; 9] = [
    "conv1.v", "conv1.g", "conv1.b", "conv2.v", "conv2.g", "conv2.b", "dense.v", "dense.g", "dense.b",
];

/// conv(k×k, same) → ReLU → maxpool → dropout → conv → ReLU → maxpool →
/// dropout → dense → softmax.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Real")]
pub struct Network<S> {
    pub cfg: NetworkConfig,
    pub conv1: WnLayer<S>,
    pub conv2: WnLayer<S>,
    pub dense: WnLayer<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<S> {
    pub conv1: LayerGrads<S>,
    pub conv2: LayerGrads<S>,
    pub dense: LayerGrads<S>,
}

impl<S: Real> Gradients<S> {
    pub fn tensors(&self) -> [&[S]; 9] {
        [
            &self.conv1.v, &self.conv1.g, &self.conv1.b,
            &self.conv2.v, &self.conv2.g, &self.conv2.b,
            &self.dense.v, &self.dense.g, &self.dense.b,
        ]
    }
}

/// Intermediate values of one train-mode forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<S> {
    cfg: NetworkConfig,
    batch: usize,
    w2: Vec<S>,
    w3: Vec<S>,
    cols1: Vec<S>,
    act1: Vec<S>,
    arg1: Vec<u32>,
    mask1: Vec<S>,
    cols2: Vec<S>,
    act2: Vec<S>,
    arg2: Vec<u32>,
    mask2: Vec<S>,
    flat: Vec<S>,
    pub probs: Vec<S>,
}

impl<S: Real> ForwardCache<S> {
    pub fn batch_size(&self) -> usize {
        self.batch
    }
}

fn ensure_finite<S: Real>(values: &[S], layer: &'static str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteActivation { layer })
    }
}

/// `[B][C][H][W]` → `[C][B][H][W]`.
fn to_channel_major<S: Real>(x: &[S], batch: usize, channels: usize, plane: usize) -> Vec<S> {
    if channels == 1 {
        return x.to_vec();
    }
    let mut out = vec![S::zero(); x.len()];
    for b in 0..batch {
        for c in 0..channels {
            out[(c * batch + b) * plane..(c * batch + b + 1) * plane]
                .copy_from_slice(&x[(b * channels + c) * plane..(b * channels + c + 1) * plane]);
        }
    }
    out
}

impl<S: Real> Network<S> {
    pub fn init<R: Rng + ?Sized>(cfg: NetworkConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let k2 = cfg.kernel * cfg.kernel;
        let conv1 = WnLayer::init(cfg.conv1_maps, cfg.input_shape.0 * k2, cfg.weight_norm, rng);
        let conv2 = WnLayer::init(cfg.conv2_maps, cfg.conv1_maps * k2, cfg.weight_norm, rng);
        let dense = WnLayer::init(cfg.num_classes, cfg.geometry().flatten_len, cfg.weight_norm, rng);
        Ok(Self { cfg, conv1, conv2, dense })
    }

    pub fn tensors(&self) -> [&[S]; 9] {
        [
            &self.conv1.v, &self.conv1.g, &self.conv1.b,
            &self.conv2.v, &self.conv2.g, &self.conv2.b,
            &self.dense.v, &self.dense.g, &self.dense.b,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<S>; 9] {
        [
            &mut self.conv1.v, &mut self.conv1.g, &mut self.conv1.b,
            &mut self.conv2.v, &mut self.conv2.g, &mut self.conv2.b,
            &mut self.dense.v, &mut self.dense.g, &mut self.dense.b,
        ]
    }

    /// Copies the parameters into another precision.
    pub fn cast<T: Real>(&self) -> Network<T> {
        let layer = |l: &WnLayer<S>| WnLayer {
            outputs: l.outputs,
            fan_in: l.fan_in,
            weight_norm: l.weight_norm,
            v: l.v.iter().map(|x| T::from_f64(x.as_f64())).collect(),
            g: l.g.iter().map(|x| T::from_f64(x.as_f64())).collect(),
            b: l.b.iter().map(|x| T::from_f64(x.as_f64())).collect(),
        };
        Network {
            cfg: self.cfg,
            conv1: layer(&self.conv1),
            conv2: layer(&self.conv2),
            dense: layer(&self.dense),
        }
    }

    /// Runs the network on `batch` (`[B, C, H, W]` flattened) and returns the
    /// softmax probabilities `[B, num_classes]`. In train mode dropout masks
    /// are drawn from `rng` and the cache for [`Network::backward`] is kept.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        batch: &[S],
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Vec<S>, Option<ForwardCache<S>>)> {
        let cfg = &self.cfg;
        let geo = cfg.geometry();
        let input_len = cfg.input_len();
        if !batch.len().is_multiple_of(input_len) {
            return Err(Error::ShapeMismatch {
                what: "input batch",
                expected: input_len,
                actual: batch.len() % input_len,
            });
        }
        let bsz = batch.len() / input_len;
        let (h, w) = (geo.height, geo.width);
        let (h1, w1) = geo.pooled1;
        let (h2, w2) = geo.pooled2;
        let (c1, c2, k) = (cfg.conv1_maps, cfg.conv2_maps, cfg.kernel);
        let train = mode == Mode::Train;

        // conv1
        let x = to_channel_major(batch, bsz, geo.in_channels, h * w);
        let k1 = geo.in_channels * k * k;
        let n1 = bsz * h * w;
        let cols1 = im2col(&x, geo.in_channels, bsz, h, w, k);
        let wt1 = self.conv1.effective_weight();
        let mut act1 = vec![S::zero(); c1 * n1];
        S::gemm(c1, k1, n1, S::one(), &wt1, row_major(k1), &cols1, row_major(n1), S::zero(), &mut act1, row_major(n1));
        add_channel_bias(&mut act1, &self.conv1.b);
        ensure_finite(&act1, "conv1")?;
        relu_inplace(&mut act1);
        let (mut d1, arg1) = maxpool(&act1, c1 * bsz, h, w, cfg.pool);
        let mask1 = if train && cfg.dropout_rate > 0.0 {
            let m = dropout_mask::<S, R>(d1.len(), cfg.dropout_rate, rng);
            d1.iter_mut().zip(&m).for_each(|(x, &m)| *x = *x * m);
            m
        } else {
            vec![S::one(); if train { d1.len() } else { 0 }]
        };

        // conv2
        let k2 = c1 * k * k;
        let n2 = bsz * h1 * w1;
        let cols2 = im2col(&d1, c1, bsz, h1, w1, k);
        let wt2 = self.conv2.effective_weight();
        let mut act2 = vec![S::zero(); c2 * n2];
        S::gemm(c2, k2, n2, S::one(), &wt2, row_major(k2), &cols2, row_major(n2), S::zero(), &mut act2, row_major(n2));
        add_channel_bias(&mut act2, &self.conv2.b);
        ensure_finite(&act2, "conv2")?;
        relu_inplace(&mut act2);
        let (mut d2, arg2) = maxpool(&act2, c2 * bsz, h1, w1, cfg.pool);
        let mask2 = if train && cfg.dropout_rate > 0.0 {
            let m = dropout_mask::<S, R>(d2.len(), cfg.dropout_rate, rng);
            d2.iter_mut().zip(&m).for_each(|(x, &m)| *x = *x * m);
            m
        } else {
            vec![S::one(); if train { d2.len() } else { 0 }]
        };

        // dense
        let plane2 = h2 * w2;
        let f = geo.flatten_len;
        let mut flat = vec![S::zero(); bsz * f];
        for c in 0..c2 {
            for b in 0..bsz {
                flat[b * f + c * plane2..b * f + (c + 1) * plane2]
                    .copy_from_slice(&d2[(c * bsz + b) * plane2..(c * bsz + b + 1) * plane2]);
            }
        }
        let classes = cfg.num_classes;
        let wt3 = self.dense.effective_weight();
        let mut logits = vec![S::zero(); bsz * classes];
        S::gemm(bsz, f, classes, S::one(), &flat, row_major(f), &wt3, transposed(f), S::zero(), &mut logits, row_major(classes));
        for row in logits.chunks_exact_mut(classes) {
            row.iter_mut().zip(&self.dense.b).for_each(|(x, &b)| *x = *x + b);
        }
        ensure_finite(&logits, "dense")?;
        let probs = softmax_rows(&logits, classes);
        ensure_finite(&probs, "softmax")?;

        let cache = train.then(|| ForwardCache {
            cfg: *cfg,
            batch: bsz,
            w2: wt2,
            w3: wt3,
            cols1,
            act1,
            arg1,
            mask1,
            cols2,
            act2,
            arg2,
            mask2,
            flat,
            probs: probs.clone(),
        });
        Ok((probs, cache))
    }

    /// Eval-mode forward.
    pub fn predict(&self, batch: &[S]) -> Result<Vec<S>> {
        // eval mode draws nothing from the generator
        let mut unused = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        Ok(self.forward(batch, Mode::Eval, &mut unused)?.0)
    }

    /// Backpropagates a gradient with respect to the logits through the
    /// cached pass, including the weight-norm reparametrization.
    pub fn backward(&self, cache: &ForwardCache<S>, grad_logits: &[S]) -> Result<Gradients<S>> {
        let cfg = &self.cfg;
        if cache.cfg != *cfg {
            return Err(Error::CacheMismatch("network configuration differs".into()));
        }
        let classes = cfg.num_classes;
        let bsz = cache.batch;
        if grad_logits.len() != bsz * classes {
            return Err(Error::CacheMismatch(format!(
                "upstream gradient has {} entries, cache batch needs {}",
                grad_logits.len(),
                bsz * classes
            )));
        }
        let geo = cfg.geometry();
        let (h, w) = (geo.height, geo.width);
        let (h1, w1) = geo.pooled1;
        let (h2, w2) = geo.pooled2;
        let (c1, c2, k) = (cfg.conv1_maps, cfg.conv2_maps, cfg.kernel);
        let f = geo.flatten_len;

        // dense
        let mut dw3 = vec![S::zero(); classes * f];
        S::gemm(classes, bsz, f, S::one(), grad_logits, transposed(classes), &cache.flat, row_major(f), S::zero(), &mut dw3, row_major(f));
        let mut db3 = vec![S::zero(); classes];
        for row in grad_logits.chunks_exact(classes) {
            db3.iter_mut().zip(row).for_each(|(a, &g)| *a = *a + g);
        }
        let mut dflat = vec![S::zero(); bsz * f];
        S::gemm(bsz, classes, f, S::one(), grad_logits, row_major(classes), &cache.w3, row_major(f), S::zero(), &mut dflat, row_major(f));

        // unflatten, dropout, pool, relu
        let plane2 = h2 * w2;
        let mut dd2 = vec![S::zero(); c2 * bsz * plane2];
        for c in 0..c2 {
            for b in 0..bsz {
                dd2[(c * bsz + b) * plane2..(c * bsz + b + 1) * plane2]
                    .copy_from_slice(&dflat[b * f + c * plane2..b * f + (c + 1) * plane2]);
            }
        }
        dd2.iter_mut().zip(&cache.mask2).for_each(|(g, &m)| *g = *g * m);
        let mut dz2 = maxpool_backward(&dd2, &cache.arg2, cache.act2.len());
        relu_backward_inplace(&mut dz2, &cache.act2);

        // conv2
        let k2 = c1 * k * k;
        let n2 = bsz * h1 * w1;
        let mut dw2 = vec![S::zero(); c2 * k2];
        S::gemm(c2, n2, k2, S::one(), &dz2, row_major(n2), &cache.cols2, transposed(n2), S::zero(), &mut dw2, row_major(k2));
        let db2 = channel_sums(&dz2, c2);
        let mut dcols2 = vec![S::zero(); k2 * n2];
        S::gemm(k2, c2, n2, S::one(), &cache.w2, transposed(k2), &dz2, row_major(n2), S::zero(), &mut dcols2, row_major(n2));
        let mut dd1 = col2im(&dcols2, c1, bsz, h1, w1, k);
        dd1.iter_mut().zip(&cache.mask1).for_each(|(g, &m)| *g = *g * m);
        let mut dz1 = maxpool_backward(&dd1, &cache.arg1, cache.act1.len());
        relu_backward_inplace(&mut dz1, &cache.act1);

        // conv1
        let k1 = geo.in_channels * k * k;
        let n1 = bsz * h * w;
        let mut dw1 = vec![S::zero(); c1 * k1];
        S::gemm(c1, n1, k1, S::one(), &dz1, row_major(n1), &cache.cols1, transposed(n1), S::zero(), &mut dw1, row_major(k1));
        let db1 = channel_sums(&dz1, c1);

        let layer_grads = |layer: &WnLayer<S>, dw: &[S], db: Vec<S>| {
            let (v, g) = layer.reparam_backward(dw);
            LayerGrads { v, g, b: db }
        };
        Ok(Gradients {
            conv1: layer_grads(&self.conv1, &dw1, db1),
            conv2: layer_grads(&self.conv2, &dw2, db2),
            dense: layer_grads(&self.dense, &dw3, db3),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> NetworkConfig {
        NetworkConfig {
            conv1_maps: 3,
            conv2_maps: 4,
            input_shape: (1, 8, 8),
            ..NetworkConfig::default()
        }
    }

    fn batch(n: usize, len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n * len).map(|_| f64::sample_standard_normal(&mut rng)).collect()
    }

    #[test]
    fn outputs_are_probabilities() {
        let net: Network<f32> = Network::init(NetworkConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let x: Vec<f32> = batch(3, 784, 1).iter().map(|&v| v as f32).collect();
        let p = net.predict(&x).unwrap();
        assert_eq!(p.len(), 30);
        for row in p.chunks_exact(10) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn eval_forward_is_repeatable() {
        let net: Network<f64> = Network::init(small_cfg(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let x = batch(4, 64, 2);
        assert_eq!(net.predict(&x).unwrap(), net.predict(&x).unwrap());
    }

    #[test]
    fn zero_dropout_train_matches_eval() {
        let cfg = NetworkConfig { dropout_rate: 0.0, ..small_cfg() };
        let net: Network<f64> = Network::init(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let x = batch(4, 64, 3);
        let (train, cache) = net.forward(&x, Mode::Train, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert!(cache.is_some());
        assert_eq!(train, net.predict(&x).unwrap());
    }

    #[test]
    fn same_seed_same_init() {
        let a: Network<f32> = Network::init(NetworkConfig::default(), &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        let b: Network<f32> = Network::init(NetworkConfig::default(), &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        assert_eq!(a, b);
        let count: usize = a.tensors().iter().map(|t| t.len()).sum();
        assert_eq!(count, NetworkConfig::default().trainable_parameter_count());
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let net: Network<f64> = Network::init(small_cfg(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let x = batch(2, 64, 4);
        let (_, cache) = net.forward(&x, Mode::Train, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let grads = net.backward(&cache.unwrap(), &[0.0; 20]).unwrap();
        assert!(grads.tensors().iter().all(|t| t.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn backward_rejects_foreign_cache() {
        let net: Network<f64> = Network::init(small_cfg(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let (_, cache) = net.forward(&batch(2, 64, 4), Mode::Train, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let cache = cache.unwrap();
        assert!(matches!(net.backward(&cache, &[0.0; 10]), Err(Error::CacheMismatch(_))));
        let other: Network<f64> = Network::init(
            NetworkConfig { conv1_maps: 5, ..small_cfg() },
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert!(matches!(other.backward(&cache, &[0.0; 20]), Err(Error::CacheMismatch(_))));
    }

    #[test]
    fn non_finite_input_aborts_with_layer_name() {
        let net: Network<f64> = Network::init(small_cfg(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut x = batch(1, 64, 4);
        x[10] = f64::NAN;
        assert!(matches!(net.predict(&x), Err(Error::NonFiniteActivation { layer: "conv1" })));
    }

    #[test]
    fn multichannel_input_layout() {
        let cfg = NetworkConfig { input_shape: (2, 4, 4), conv1_maps: 2, conv2_maps: 2, ..NetworkConfig::default() };
        let net: Network<f64> = Network::init(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let x = batch(3, 32, 5);
        // batch rows are processed independently
        let all = net.predict(&x).unwrap();
        for b in 0..3 {
            let single = net.predict(&x[b * 32..(b + 1) * 32]).unwrap();
            for (a, s) in all[b * 10..(b + 1) * 10].iter().zip(&single) {
                assert!((a - s).abs() < 1e-12);
            }
        }
    }
}
