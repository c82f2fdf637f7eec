use serde::{Deserialize, Serialize};

use super::network::{Gradients, Network};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.002,
            beta1: 0.9,
            beta2: 0.99,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Real")]
pub struct AdamState<S> {
    pub config: AdamConfig,
    pub m: Vec<Vec<S>>,
    pub u: Vec<Vec<S>>,
    pub step: u64,
}

impl<S: Real> AdamState<S> {
    pub fn new(config: AdamConfig, net: &Network<S>) -> Self {
        let zeros: Vec<Vec<S>> = net.tensors().iter().map(|t| vec![S::zero(); t.len()]).collect();
        Self {
            config,
            m: zeros.clone(),
            u: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of every parameter tensor.
pub fn adam_step<S: Real>(net: &mut Network<S>, grads: &Gradients<S>, state: &mut AdamState<S>) {
    state.step += 1;
    let cfg = state.config;
    let k = state.step as i32;
    let b1 = S::from_f64(cfg.beta1);
    let b2 = S::from_f64(cfg.beta2);
    let one_minus_b1 = S::from_f64(1.0 - cfg.beta1);
    let one_minus_b2 = S::from_f64(1.0 - cfg.beta2);
    let correction1 = S::from_f64(1.0 - cfg.beta1.powi(k));
    let correction2 = S::from_f64(1.0 - cfg.beta2.powi(k));
    let lr = S::from_f64(cfg.learning_rate);
    let eps = S::from_f64(cfg.epsilon);

    for (((param, grad), m), u) in net
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.m.iter_mut())
        .zip(state.u.iter_mut())
    {
        assert_eq!(param.len(), grad.len(), "gradient shape does not match parameter");
        for (((p, &g), m), u) in param.iter_mut().zip(grad).zip(m.iter_mut()).zip(u.iter_mut()) {
            *m = b1 * *m + one_minus_b1 * g;
            *u = b2 * *u + one_minus_b2 * g * g;
            let m_hat = *m / correction1;
            let u_hat = *u / correction2;
            *p = *p - lr * m_hat / (u_hat.sqrt() + eps);
        }
    }
}
