//! Minimal dense numerical core.
//!
//! Layers expose explicit `forward`/`backward` pairs rather than a general
//! autodiff graph. Backward passes accumulate parameter gradients into a
//! same-shaped gradient layer so whole models can be mirrored for gradients.

mod adam;
mod conv;
mod gradcheck;
mod linear;
mod loss;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use conv::{conv_out_size, Conv2d, ConvCache, CONV_KERNEL, CONV_PAD, CONV_STRIDE};
pub use gradcheck::{grad_check, kinks_crossed, GradCheckReport, Probe};
pub use linear::Linear;
pub use loss::{log_softmax_row, softmax_cross_entropy};
pub use tensor::Tensor;

use crate::Scalar;

pub fn relu_inplace<T: Scalar>(x: &mut [T]) {
    for v in x {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Zeroes `grad` wherever the ReLU output was not positive.
pub fn relu_backward_inplace<T: Scalar>(output: &[T], grad: &mut [T]) {
    debug_assert_eq!(output.len(), grad.len());
    for (g, &y) in grad.iter_mut().zip(output) {
        if y <= T::zero() {
            *g = T::zero();
        }
    }
}

/// Kaiming-uniform initialisation for a layer with `fan_in` inputs.
pub fn kaiming_uniform<T: Scalar, R: rand::Rng>(len: usize, fan_in: usize, rng: &mut R) -> Vec<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..len).map(|_| T::from_f64_lossy(rng.gen_range(-bound..bound))).collect()
}
