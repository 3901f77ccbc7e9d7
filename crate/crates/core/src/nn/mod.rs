// SPDX-License-Identifier: MIT OR Apache-2.0

//! A small CPU neural-network core in `f64`.
//!
//! Layers are stateless with respect to activations: `forward` returns the
//! output plus a cache, and `backward` consumes that cache, accumulates
//! parameter gradients into [`Param::grad`] and returns the input gradient.
//! This keeps branching graphs (one embedding feeding a classifier and a
//! gradient-reversed discriminator) explicit at the call site.

mod layers;
mod loss;
mod optim;

pub use layers::{
    BatchNorm, BatchNormCache, Conv1d, ConvCache, FeatureCache, FeatureConfig, FeatureExtractor, Linear, MaxPool2,
    Mlp, MlpCache, PoolCache,
};
pub use loss::{cross_entropy, grl_backward, grl_forward, log_softmax_row, softmax_rows, softmax_t};
pub use optim::{Adam, AdamConfig};

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NnError {
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch { expected: Vec<usize>, found: Vec<usize> },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("non-finite gradient in parameter {index}")]
    NonFiniteGradient { index: usize },
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
}

pub type Result<T> = std::result::Result<T, NnError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// Batch statistics; batch-norm running estimates are updated.
    Train,
    /// Running statistics; a pure function of the input.
    Eval,
}

/// A trainable tensor stored flat in row-major order, with its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    pub shape: Vec<usize>,
}

impl Param {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { value: vec![0.0; n], grad: vec![0.0; n], shape: shape.to_vec() }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        let mut p = Self::zeros(shape);
        p.value.fill(v);
        p
    }

    /// Uniform in `[-bound, bound)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let mut p = Self::zeros(shape);
        if bound > 0.0 {
            let dist = Uniform::new(-bound, bound).expect("positive bound");
            for v in p.value.iter_mut() {
                *v = dist.sample(rng);
            }
        }
        p
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn view2(&self) -> ndarray::ArrayView2<'_, f64> {
        ndarray::ArrayView2::from_shape((self.shape[0], self.shape[1]), &self.value).expect("2-d param")
    }

    pub fn grad2_mut(&mut self) -> ndarray::ArrayViewMut2<'_, f64> {
        ndarray::ArrayViewMut2::from_shape((self.shape[0], self.shape[1]), &mut self.grad).expect("2-d param")
    }
}

/// Zeroes the gradient of every parameter in the list.
pub fn zero_grads(params: &mut [&mut Param]) {
    for p in params.iter_mut() {
        p.zero_grad();
    }
}
