//! Differentiable layers: the convolution family for non-uniform vertical
//! grids, pooling, batch normalization and a ConvLSTM cell.

mod conv;
mod lstm;
mod norm;
mod suite;

pub use conv::{affine_level, conv3d, conv_full, conv_separable, ConvSpec, ConvVariant};
pub use lstm::{convlstm_cell, ConvLstmWeights};
pub use norm::{batchnorm, BnConfig, Mode, RunningStats};
pub use suite::{layer_grad_checks, LayerCheck, LAYER_GRAD_TOLERANCE};

use rand::Rng;

use crate::autodiff::{Tensor, Var};
use crate::error::Result;

/// Max over non-overlapping `window`s of the (level, lat, lon) axes.
pub fn maxpool3d(x: Var<'_>, window: [usize; 3]) -> Result<Var<'_>> {
    x.max_pool(window)
}

/// Nearest-neighbour upsampling of the (level, lat, lon) axes.
pub fn upsample3d(x: Var<'_>, factor: [usize; 3]) -> Result<Var<'_>> {
    x.upsample(factor)
}

/// He-uniform initialization: `U(-b, b)` with `b = sqrt(6 / fan_in)`.
pub fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-bound..bound)).collect(),
    )
    .expect("length matches shape")
}
