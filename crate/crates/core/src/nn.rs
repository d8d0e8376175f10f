//! Small multilayer perceptrons over parameter lists.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, x: &Tensor) -> Tensor {
        match self {
            Activation::Relu => x.relu(),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => x.sigmoid(),
        }
    }
}

/// Layer widths plus a hidden activation; parameters are `[W1, b1, W2, b2, ...]`
/// with `W` of shape `[in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    activation: Activation,
}

impl Mlp {
    pub fn new(sizes: &[usize], activation: Activation) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::invalid(format!("invalid layer sizes {sizes:?}")));
        }
        Ok(Mlp {
            sizes: sizes.to_vec(),
            activation,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    /// Uniform Glorot initialization; returns differentiable leaves.
    pub fn init<R: Rng>(&self, rng: &mut R) -> Vec<Tensor> {
        let mut params = Vec::with_capacity(2 * self.num_layers());
        for pair in self.sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            params.push(Tensor::raw(vec![fan_in, fan_out], w).requires_grad());
            params.push(Tensor::raw(vec![fan_out], vec![0.0; fan_out]).requires_grad());
        }
        params
    }

    pub fn forward(&self, params: &[Tensor], x: &Tensor) -> Result<Tensor> {
        if params.len() != 2 * self.num_layers() {
            return Err(Error::invalid(format!(
                "mlp with {} layers got {} parameter tensors",
                self.num_layers(),
                params.len()
            )));
        }
        let mut h = x.clone();
        for (i, layer) in params.chunks(2).enumerate() {
            h = h.matmul(&layer[0])?.add_row(&layer[1])?;
            if i + 1 < self.num_layers() {
                h = self.activation.apply(&h);
            }
        }
        Ok(h)
    }
}
