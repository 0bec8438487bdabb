//! Stride-2, 5x5 convolutions and their transposes, lowered onto GEMM via im2col.
//!
//! Weight layouts follow the usual conventions: a downsampling convolution
//! stores `[out, in, 5, 5]`, a transposed (upsampling) convolution stores
//! `[in, out, 5, 5]`. The transposed convolution is the exact adjoint of the
//! downsampling convolution with the same geometry, which fixes the output
//! padding so that spatial dims double.

use crate::error::{Error, Result};
use crate::scalar::{matmul, MatRef, Scalar};
use crate::tensor::Tensor3;

pub const KERNEL: usize = 5;
pub const STRIDE: usize = 2;
pub const PAD: usize = 2;
const TAPS: usize = KERNEL * KERNEL;

/// Output size of the downsampling convolution for an input extent.
#[inline]
pub fn conv_out_extent(input: usize) -> usize {
    (input + 2 * PAD - KERNEL) / STRIDE + 1
}

/// Lower `x: [c, h, w]` into `cols: [c * 25, ho * wo]`.
pub(crate) fn im2col<S: Scalar>(x: &[S], c: usize, h: usize, w: usize, ho: usize, wo: usize, cols: &mut [S]) {
    let plane = ho * wo;
    debug_assert_eq!(cols.len(), c * TAPS * plane);
    for ci in 0..c {
        let src = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = (ci * TAPS + ky * KERNEL + kx) * plane;
                let dst = &mut cols[row..row + plane];
                for oy in 0..ho {
                    let iy = (oy * STRIDE + ky) as isize - PAD as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.iter_mut().for_each(|v| *v = S::zero());
                        continue;
                    }
                    let src_line = &src[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = (ox * STRIDE + kx) as isize - PAD as isize;
                        *out = if ix < 0 || ix >= w as isize {
                            S::zero()
                        } else {
                            src_line[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add `cols: [c * 25, ho * wo]` back onto `x: [c, h, w]` (adjoint of [`im2col`]).
pub(crate) fn col2im<S: Scalar>(cols: &[S], c: usize, h: usize, w: usize, ho: usize, wo: usize, x: &mut [S]) {
    let plane = ho * wo;
    for ci in 0..c {
        let dst = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = (ci * TAPS + ky * KERNEL + kx) * plane;
                let src = &cols[row..row + plane];
                for oy in 0..ho {
                    let iy = (oy * STRIDE + ky) as isize - PAD as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_line = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, &v) in src[oy * wo..(oy + 1) * wo].iter().enumerate() {
                        let ix = (ox * STRIDE + kx) as isize - PAD as isize;
                        if ix >= 0 && (ix as usize) < w {
                            dst_line[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn add_bias<S: Scalar>(out: &mut [S], bias: &[S], plane: usize) {
    for (chunk, &b) in out.chunks_mut(plane).zip(bias) {
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn bias_grad<S: Scalar>(grad_out: &[S], channels: usize, plane: usize) -> Vec<S> {
    (0..channels)
        .map(|c| grad_out[c * plane..(c + 1) * plane].iter().copied().sum())
        .collect()
}

/// Gradients of a convolution layer with respect to its input and parameters.
#[derive(Debug, Clone)]
pub struct LayerGrads<S> {
    pub input: Tensor3<S>,
    pub weight: Vec<S>,
    pub bias: Vec<S>,
}

/// Downsampling convolution `[cin, h, w] -> [cout, h/2, w/2]`.
#[derive(Debug, Clone, Copy)]
pub struct Conv2d<'a, S> {
    pub weight: &'a [S],
    pub bias: &'a [S],
    pub in_channels: usize,
    pub out_channels: usize,
}

/// Forward activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ConvCache<S> {
    cols: Vec<S>,
    input_shape: [usize; 3],
}

impl<'a, S: Scalar> Conv2d<'a, S> {
    pub fn new(weight: &'a [S], bias: &'a [S], in_channels: usize, out_channels: usize) -> Result<Self> {
        if weight.len() != out_channels * in_channels * TAPS || bias.len() != out_channels {
            return Err(Error::Config(format!(
                "conv weight/bias of len {}/{} do not match {in_channels}->{out_channels} 5x5",
                weight.len(),
                bias.len()
            )));
        }
        Ok(Self {
            weight,
            bias,
            in_channels,
            out_channels,
        })
    }

    pub fn forward(&self, x: &Tensor3<S>) -> Result<(Tensor3<S>, ConvCache<S>)> {
        let [c, h, w] = x.shape();
        if c != self.in_channels {
            return Err(Error::Config(format!(
                "conv expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let (ho, wo) = (conv_out_extent(h), conv_out_extent(w));
        let plane = ho * wo;
        let mut cols = vec![S::zero(); c * TAPS * plane];
        im2col(x.as_slice(), c, h, w, ho, wo, &mut cols);
        let mut out = vec![S::zero(); self.out_channels * plane];
        matmul(
            MatRef::new(self.weight, self.out_channels, c * TAPS),
            MatRef::new(&cols, c * TAPS, plane),
            &mut out,
            false,
        );
        add_bias(&mut out, self.bias, plane);
        let out = Tensor3::from_vec(self.out_channels, ho, wo, out)?;
        Ok((
            out,
            ConvCache {
                cols,
                input_shape: [c, h, w],
            },
        ))
    }

    pub fn backward(&self, cache: &ConvCache<S>, grad_out: &Tensor3<S>) -> LayerGrads<S> {
        let [c, h, w] = cache.input_shape;
        let (ho, wo) = (grad_out.height(), grad_out.width());
        let plane = ho * wo;
        let k = c * TAPS;

        let mut weight = vec![S::zero(); self.out_channels * k];
        matmul(
            MatRef::new(grad_out.as_slice(), self.out_channels, plane),
            MatRef::new(&cache.cols, k, plane).t(),
            &mut weight,
            false,
        );
        let mut grad_cols = vec![S::zero(); k * plane];
        matmul(
            MatRef::new(self.weight, self.out_channels, k).t(),
            MatRef::new(grad_out.as_slice(), self.out_channels, plane),
            &mut grad_cols,
            false,
        );
        let mut input = Tensor3::zeros(c, h, w);
        col2im(&grad_cols, c, h, w, ho, wo, input.as_mut_slice());
        LayerGrads {
            input,
            weight,
            bias: bias_grad(grad_out.as_slice(), self.out_channels, plane),
        }
    }
}

/// Upsampling (transposed) convolution `[cin, h, w] -> [cout, 2h, 2w]`.
#[derive(Debug, Clone, Copy)]
pub struct ConvTranspose2d<'a, S> {
    pub weight: &'a [S],
    pub bias: &'a [S],
    pub in_channels: usize,
    pub out_channels: usize,
}

#[derive(Debug, Clone)]
pub struct ConvTransposeCache<S> {
    input: Tensor3<S>,
}

impl<'a, S: Scalar> ConvTranspose2d<'a, S> {
    pub fn new(weight: &'a [S], bias: &'a [S], in_channels: usize, out_channels: usize) -> Result<Self> {
        if weight.len() != out_channels * in_channels * TAPS || bias.len() != out_channels {
            return Err(Error::Config(format!(
                "transposed conv weight/bias of len {}/{} do not match {in_channels}->{out_channels} 5x5",
                weight.len(),
                bias.len()
            )));
        }
        Ok(Self {
            weight,
            bias,
            in_channels,
            out_channels,
        })
    }

    pub fn forward(&self, x: &Tensor3<S>) -> Result<(Tensor3<S>, ConvTransposeCache<S>)> {
        let [c, hi, wi] = x.shape();
        if c != self.in_channels {
            return Err(Error::Config(format!(
                "transposed conv expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let (h, w) = (hi * STRIDE, wi * STRIDE);
        let plane = hi * wi;
        let k = self.out_channels * TAPS;
        let mut cols = vec![S::zero(); k * plane];
        matmul(
            MatRef::new(self.weight, c, k).t(),
            MatRef::new(x.as_slice(), c, plane),
            &mut cols,
            false,
        );
        let mut out = Tensor3::zeros(self.out_channels, h, w);
        col2im(&cols, self.out_channels, h, w, hi, wi, out.as_mut_slice());
        add_bias(out.as_mut_slice(), self.bias, h * w);
        Ok((out, ConvTransposeCache { input: x.clone() }))
    }

    pub fn backward(&self, cache: &ConvTransposeCache<S>, grad_out: &Tensor3<S>) -> LayerGrads<S> {
        let [c, hi, wi] = cache.input.shape();
        let (h, w) = (grad_out.height(), grad_out.width());
        let plane = hi * wi;
        let k = self.out_channels * TAPS;

        let mut grad_cols = vec![S::zero(); k * plane];
        im2col(grad_out.as_slice(), self.out_channels, h, w, hi, wi, &mut grad_cols);

        let mut input = vec![S::zero(); c * plane];
        matmul(
            MatRef::new(self.weight, c, k),
            MatRef::new(&grad_cols, k, plane),
            &mut input,
            false,
        );
        let mut weight = vec![S::zero(); c * k];
        matmul(
            MatRef::new(cache.input.as_slice(), c, plane),
            MatRef::new(&grad_cols, k, plane).t(),
            &mut weight,
            false,
        );
        LayerGrads {
            input: Tensor3::from_vec(c, hi, wi, input).expect("shape derived from cache"),
            weight,
            bias: bias_grad(grad_out.as_slice(), self.out_channels, h * w),
        }
    }
}
