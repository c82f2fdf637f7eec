use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape and regularization settings of the two-stage convolutional network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub conv1_maps: usize,
    pub conv2_maps: usize,
    pub kernel: usize,
    pub pool: usize,
    pub dropout_rate: f64,
    pub num_classes: usize,
    pub weight_norm: bool,
    /// (channels, height, width)
    pub input_shape: (usize, usize, usize),
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            conv1_maps: 16,
            conv2_maps: 32,
            kernel: 3,
            pool: 2,
            dropout_rate: 0.5,
            num_classes: 10,
            weight_norm: true,
            input_shape: (1, 28, 28),
        }
    }
}

/// Derived per-stage spatial sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub pooled1: (usize, usize),
    pub pooled2: (usize, usize),
    pub flatten_len: usize,
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.input_shape;
        let positive = [self.conv1_maps, self.conv2_maps, self.kernel, self.pool, self.num_classes, c, h, w];
        if positive.contains(&0) {
            return Err(Error::InvalidConfig("network sizes must be positive".into()));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "kernel must be odd for same-size padding, got {}",
                self.kernel
            )));
        }
        let stride = self.pool * self.pool;
        if h % stride != 0 || w % stride != 0 {
            return Err(Error::InvalidConfig(format!(
                "input {h}x{w} is not divisible by the two pooling stages ({stride})"
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidConfig(format!(
                "dropout rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    pub fn geometry(&self) -> Geometry {
        let (c, h, w) = self.input_shape;
        let p = self.pool;
        let pooled1 = (h / p, w / p);
        let pooled2 = (pooled1.0 / p, pooled1.1 / p);
        Geometry {
            in_channels: c,
            height: h,
            width: w,
            pooled1,
            pooled2,
            flatten_len: self.conv2_maps * pooled2.0 * pooled2.1,
        }
    }

    pub fn input_len(&self) -> usize {
        let (c, h, w) = self.input_shape;
        c * h * w
    }

    /// Effective weights plus biases (weight-norm scales excluded).
    pub fn effective_parameter_count(&self) -> usize {
        let k2 = self.kernel * self.kernel;
        let conv1 = self.conv1_maps * self.input_shape.0 * k2 + self.conv1_maps;
        let conv2 = self.conv2_maps * self.conv1_maps * k2 + self.conv2_maps;
        let dense = self.num_classes * self.geometry().flatten_len + self.num_classes;
        conv1 + conv2 + dense
    }

    /// Every stored scalar: directions, scales and biases.
    pub fn trainable_parameter_count(&self) -> usize {
        self.effective_parameter_count() + self.conv1_maps + self.conv2_maps + self.num_classes
    }
}
