use rand::Rng;

use super::{kaiming_uniform, Tensor};
use crate::error::{CpvError, Result};
use crate::Scalar;

pub const CONV_KERNEL: usize = 3;
pub const CONV_STRIDE: usize = 2;
pub const CONV_PAD: usize = 1;

const KK: usize = CONV_KERNEL * CONV_KERNEL;

pub fn conv_out_size(n: usize) -> usize {
    (n + 2 * CONV_PAD - CONV_KERNEL) / CONV_STRIDE + 1
}

/// 3x3 cross-correlation with stride 2 and zero padding 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    /// `[out, in, 3, 3]`
    pub weight: Tensor<T>,
    /// `[out]`
    pub bias: Tensor<T>,
}

/// Saved im2col buffer from the forward pass.
#[derive(Clone, Debug)]
pub struct ConvCache<T> {
    cols: Vec<T>,
    n: usize,
    h: usize,
    w: usize,
}

impl<T: Scalar> Conv2d<T> {
    pub fn zeros(in_ch: usize, out_ch: usize) -> Conv2d<T> {
        Conv2d {
            weight: Tensor::zeros(&[out_ch, in_ch, CONV_KERNEL, CONV_KERNEL]),
            bias: Tensor::zeros(&[out_ch]),
        }
    }

    pub fn init<R: Rng>(in_ch: usize, out_ch: usize, rng: &mut R) -> Conv2d<T> {
        let mut c = Conv2d::zeros(in_ch, out_ch);
        let n = c.weight.len();
        c.weight.data_mut().copy_from_slice(&kaiming_uniform::<T, R>(n, in_ch * KK, rng));
        c
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    /// `x`: `[N, C, H, W]` -> `[N, C', H', W']`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, ConvCache<T>)> {
        let &[n, c, h, w] = x.shape() else {
            return Err(CpvError::Shape(format!("conv input must be 4-d, got {:?}", x.shape())));
        };
        if c != self.in_channels() {
            return Err(CpvError::Shape(format!("conv expects {} channels, got {c}", self.in_channels())));
        }
        let (ho, wo) = (conv_out_size(h), conv_out_size(w));
        let p = ho * wo;
        let np = n * p;
        let rows = c * KK;
        let mut cols = vec![T::zero(); rows * np];
        let xd = x.data();
        for ci in 0..c {
            for ky in 0..CONV_KERNEL {
                for kx in 0..CONV_KERNEL {
                    let row = &mut cols[((ci * KK) + ky * CONV_KERNEL + kx) * np..][..np];
                    for b in 0..n {
                        let plane = &xd[(b * c + ci) * h * w..][..h * w];
                        for oy in 0..ho {
                            let iy = (oy * CONV_STRIDE + ky) as isize - CONV_PAD as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let src = &plane[iy as usize * w..][..w];
                            let dst = &mut row[b * p + oy * wo..][..wo];
                            for (ox, d) in dst.iter_mut().enumerate() {
                                let ix = (ox * CONV_STRIDE + kx) as isize - CONV_PAD as isize;
                                if ix >= 0 && ix < w as isize {
                                    *d = src[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        let co = self.out_channels();
        let mut ymat = vec![T::zero(); co * np];
        T::gemm(
            co,
            rows,
            np,
            T::one(),
            self.weight.data(),
            rows as isize,
            1,
            &cols,
            np as isize,
            1,
            T::zero(),
            &mut ymat,
            np as isize,
            1,
        );
        let mut y = Tensor::zeros(&[n, co, ho, wo]);
        let yd = y.data_mut();
        let bias = self.bias.data();
        for o in 0..co {
            for b in 0..n {
                let src = &ymat[o * np + b * p..][..p];
                let dst = &mut yd[(b * co + o) * p..][..p];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + bias[o];
                }
            }
        }
        Ok((y, ConvCache { cols, n, h, w }))
    }

    /// Accumulates weight/bias gradients into `grad`; returns the input
    /// gradient when `want_input` is set.
    pub fn backward(&self, cache: &ConvCache<T>, gy: &Tensor<T>, grad: &mut Conv2d<T>, want_input: bool) -> Option<Tensor<T>> {
        let (n, h, w) = (cache.n, cache.h, cache.w);
        let (ho, wo) = (conv_out_size(h), conv_out_size(w));
        let p = ho * wo;
        let np = n * p;
        let c = self.in_channels();
        let co = self.out_channels();
        let rows = c * KK;
        assert_eq!(gy.shape(), &[n, co, ho, wo], "conv backward shape");
        let gyd = gy.data();
        let mut gmat = vec![T::zero(); co * np];
        for o in 0..co {
            for b in 0..n {
                gmat[o * np + b * p..][..p].copy_from_slice(&gyd[(b * co + o) * p..][..p]);
            }
        }
        {
            let gb = grad.bias.data_mut();
            for o in 0..co {
                gb[o] += gmat[o * np..][..np].iter().copied().sum::<T>();
            }
        }
        T::gemm(
            co,
            np,
            rows,
            T::one(),
            &gmat,
            np as isize,
            1,
            &cache.cols,
            1,
            np as isize,
            T::one(),
            grad.weight.data_mut(),
            rows as isize,
            1,
        );
        if !want_input {
            return None;
        }
        let mut gcols = vec![T::zero(); rows * np];
        T::gemm(
            rows,
            co,
            np,
            T::one(),
            self.weight.data(),
            1,
            rows as isize,
            &gmat,
            np as isize,
            1,
            T::zero(),
            &mut gcols,
            np as isize,
            1,
        );
        let mut gx = Tensor::zeros(&[n, c, h, w]);
        let gxd = gx.data_mut();
        for ci in 0..c {
            for ky in 0..CONV_KERNEL {
                for kx in 0..CONV_KERNEL {
                    let row = &gcols[((ci * KK) + ky * CONV_KERNEL + kx) * np..][..np];
                    for b in 0..n {
                        let plane = &mut gxd[(b * c + ci) * h * w..][..h * w];
                        for oy in 0..ho {
                            let iy = (oy * CONV_STRIDE + ky) as isize - CONV_PAD as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let dst = &mut plane[iy as usize * w..][..w];
                            let src = &row[b * p + oy * wo..][..wo];
                            for (ox, &s) in src.iter().enumerate() {
                                let ix = (ox * CONV_STRIDE + kx) as isize - CONV_PAD as isize;
                                if ix >= 0 && ix < w as isize {
                                    dst[ix as usize] += s;
                                }
                            }
                        }
                    }
                }
            }
        }
        Some(gx)
    }
}
