//! Numeric core: tensors, reverse-mode autodiff, convolution kernels, and
//! the optimizer.

pub mod conv;
pub mod optim;
pub mod tape;

pub use conv::Conv3dSpec;
pub use optim::{clip_global_norm, Adam};
pub use tape::{as2, central_diff, lstm_sequence, lstm_step, register_all, rel_err, Arr, Grads, Tape, Var};

use ndarray::{Array, IxDyn};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Gaussian init with the given standard deviation.
pub fn randn(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Arr {
    let dist = Normal::new(0.0, std).expect("valid std");
    Array::from_shape_fn(IxDyn(shape), |_| dist.sample(rng))
}

/// He-style init for layers feeding a rectifier: std = sqrt(2 / fan_in).
pub fn randn_he(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Arr {
    randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

/// Scaled init for linear/recurrent layers: std = 1 / sqrt(fan_in).
pub fn randn_scaled(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Arr {
    randn(shape, (1.0 / fan_in as f64).sqrt(), rng)
}

/// LSTM bias with the forget gate set to 1 (gate order i, f, g, o).
pub fn lstm_bias(hidden: usize) -> Arr {
    let mut b = Arr::zeros(IxDyn(&[4 * hidden]));
    for i in hidden..2 * hidden {
        b[[i]] = 1.0;
    }
    b
}
