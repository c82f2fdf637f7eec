use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::real::Real;

/// A weight-normalized affine layer: `w[o] = g[o] * v[o] / ||v[o]||`.
///
/// `v` is `[outputs, fan_in]` row-major. With `weight_norm` off the raw
/// direction `v` is used as the weight and `g` is inert.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Real")]
pub struct WnLayer<S> {
    pub outputs: usize,
    pub fan_in: usize,
    pub weight_norm: bool,
    pub v: Vec<S>,
    pub g: Vec<S>,
    pub b: Vec<S>,
}

/// Gradients for one [`WnLayer`], same shapes as its tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads<S> {
    pub v: Vec<S>,
    pub g: Vec<S>,
    pub b: Vec<S>,
}

impl<S: Real> LayerGrads<S> {
    pub fn zeros_like(layer: &WnLayer<S>) -> Self {
        Self {
            v: vec![S::zero(); layer.v.len()],
            g: vec![S::zero(); layer.g.len()],
            b: vec![S::zero(); layer.b.len()],
        }
    }
}

impl<S: Real> WnLayer<S> {
    /// He-scaled Gaussian directions, `g` set to the initial row norms so the
    /// effective weight starts equal to `v`, zero bias.
    pub fn init<R: Rng + ?Sized>(outputs: usize, fan_in: usize, weight_norm: bool, rng: &mut R) -> Self {
        let std = S::from_f64((2.0 / fan_in as f64).sqrt());
        let v: Vec<S> = (0..outputs * fan_in)
            .map(|_| std * S::sample_standard_normal(rng))
            .collect();
        let g = v.chunks_exact(fan_in).map(row_norm).collect();
        Self {
            outputs,
            fan_in,
            weight_norm,
            v,
            g,
            b: vec![S::zero(); outputs],
        }
    }

    pub fn row_norms(&self) -> Vec<S> {
        self.v.chunks_exact(self.fan_in).map(row_norm).collect()
    }

    pub fn effective_weight(&self) -> Vec<S> {
        if !self.weight_norm {
            return self.v.clone();
        }
        let mut w = Vec::with_capacity(self.v.len());
        for (row, &g) in self.v.chunks_exact(self.fan_in).zip(&self.g) {
            let scale = g / row_norm(row);
            w.extend(row.iter().map(|&x| x * scale));
        }
        w
    }

    /// Converts a gradient with respect to the effective weight into
    /// gradients for `v` and `g`:
    /// `dg = <dw, v> / ||v||`, `dv = (g / ||v||) * (dw - dg * v / ||v||)`.
    pub fn reparam_backward(&self, grad_w: &[S]) -> (Vec<S>, Vec<S>) {
        if !self.weight_norm {
            return (grad_w.to_vec(), vec![S::zero(); self.outputs]);
        }
        let mut grad_v = Vec::with_capacity(self.v.len());
        let mut grad_g = Vec::with_capacity(self.outputs);
        for ((row, grow), &g) in self
            .v
            .chunks_exact(self.fan_in)
            .zip(grad_w.chunks_exact(self.fan_in))
            .zip(&self.g)
        {
            let norm = row_norm(row);
            let dg = row.iter().zip(grow).fold(S::zero(), |a, (&v, &d)| a + v * d) / norm;
            let scale = g / norm;
            grad_v.extend(row.iter().zip(grow).map(|(&v, &d)| scale * (d - dg * v / norm)));
            grad_g.push(dg);
        }
        (grad_v, grad_g)
    }
}

fn row_norm<S: Real>(row: &[S]) -> S {
    row.iter().fold(S::zero(), |a, &x| a + x * x).sqrt()
}
