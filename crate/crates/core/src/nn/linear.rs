use rand::Rng;

use super::{kaiming_uniform, Tensor};
use crate::error::{CpvError, Result};
use crate::Scalar;

/// Affine map `y = x W^T + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    /// `[out, in]`
    pub weight: Tensor<T>,
    /// `[out]`
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn zeros(inputs: usize, outputs: usize) -> Linear<T> {
        Linear { weight: Tensor::zeros(&[outputs, inputs]), bias: Tensor::zeros(&[outputs]) }
    }

    pub fn init<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Linear<T> {
        let mut l = Linear::zeros(inputs, outputs);
        let n = l.weight.len();
        l.weight.data_mut().copy_from_slice(&kaiming_uniform::<T, R>(n, inputs, rng));
        l
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }

    /// `x`: `[N, in]` -> `[N, out]`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let &[n, f] = x.shape() else {
            return Err(CpvError::Shape(format!("linear input must be 2-d, got {:?}", x.shape())));
        };
        if f != self.inputs() {
            return Err(CpvError::Shape(format!("linear expects {} features, got {f}", self.inputs())));
        }
        let o = self.outputs();
        let mut y = Tensor::zeros(&[n, o]);
        for row in y.data_mut().chunks_mut(o) {
            row.copy_from_slice(self.bias.data());
        }
        T::gemm(n, f, o, T::one(), x.data(), f as isize, 1, self.weight.data(), 1, f as isize, T::one(), y.data_mut(), o as isize, 1);
        Ok(y)
    }

    pub fn backward(&self, x: &Tensor<T>, gy: &Tensor<T>, grad: &mut Linear<T>, want_input: bool) -> Option<Tensor<T>> {
        let (n, f, o) = (x.shape()[0], self.inputs(), self.outputs());
        assert_eq!(gy.shape(), &[n, o], "linear backward shape");
        let gb = grad.bias.data_mut();
        for row in gy.data().chunks(o) {
            for (b, &g) in gb.iter_mut().zip(row) {
                *b += g;
            }
        }
        T::gemm(o, n, f, T::one(), gy.data(), 1, o as isize, x.data(), f as isize, 1, T::one(), grad.weight.data_mut(), f as isize, 1);
        if !want_input {
            return None;
        }
        let mut gx = Tensor::zeros(&[n, f]);
        T::gemm(n, o, f, T::one(), gy.data(), o as isize, 1, self.weight.data(), f as isize, 1, T::zero(), gx.data_mut(), f as isize, 1);
        Some(gx)
    }
}
