//! Building-block layers with hand-written reverse passes.
//!
//! Every layer operates on token-major buffers (`rows x channels`). A
//! layer's parameter struct doubles as its gradient accumulator: backward
//! functions take `grad: &mut Self` and add into it.

use rand::Rng;

use crate::init::trunc_normal_tensor;
use crate::params::{join, Parameterized};
use crate::scan_catalog::GridShape;
use crate::tensor::{FeatureMap, Tensor};

/// Affine map `y = W x + b` applied to each row independently.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `[out, in]`
    pub weight: Tensor,
    /// `[out]`, absent for bias-free projections.
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, inputs: usize, outputs: usize, std: f64) -> Self {
        Linear {
            weight: trunc_normal_tensor(rng, &[outputs, inputs], std),
            bias: Some(Tensor::zeros(&[outputs])),
        }
    }

    pub fn without_bias<R: Rng + ?Sized>(rng: &mut R, inputs: usize, outputs: usize, std: f64) -> Self {
        Linear {
            weight: trunc_normal_tensor(rng, &[outputs, inputs], std),
            bias: None,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let (nin, nout) = (self.inputs(), self.outputs());
        let rows = x.len() / nin;
        let w = self.weight.data();
        let mut y = vec![0.0; rows * nout];
        for (xr, yr) in x.chunks_exact(nin).zip(y.chunks_exact_mut(nout)) {
            for (o, yo) in yr.iter_mut().enumerate() {
                let wr = &w[o * nin..(o + 1) * nin];
                let mut acc = match &self.bias {
                    Some(b) => b.data()[o],
                    None => 0.0,
                };
                for (wi, xi) in wr.iter().zip(xr) {
                    acc += wi * xi;
                }
                *yo = acc;
            }
        }
        y
    }

    /// Accumulates parameter gradients into `grad`; returns d(loss)/dx.
    pub fn backward(&self, x: &[f64], gy: &[f64], grad: &mut Linear) -> Vec<f64> {
        let (nin, nout) = (self.inputs(), self.outputs());
        let w = self.weight.data();
        let mut gx = vec![0.0; x.len()];
        {
            let gw = grad.weight.data_mut();
            for ((xr, gyr), gxr) in x
                .chunks_exact(nin)
                .zip(gy.chunks_exact(nout))
                .zip(gx.chunks_exact_mut(nin))
            {
                for (o, &g) in gyr.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    let wr = &w[o * nin..(o + 1) * nin];
                    let gwr = &mut gw[o * nin..(o + 1) * nin];
                    for i in 0..nin {
                        gxr[i] += g * wr[i];
                        gwr[i] += g * xr[i];
                    }
                }
            }
        }
        if let Some(gb) = grad.bias.as_mut() {
            let gb = gb.data_mut();
            for gyr in gy.chunks_exact(nout) {
                for (b, g) in gb.iter_mut().zip(gyr) {
                    *b += g;
                }
            }
        }
        gx
    }
}

impl Parameterized for Linear {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Per-token normalization over channels with learned scale and shift.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

/// Saved activations for [`LayerNorm::backward`].
#[derive(Clone, Debug)]
pub struct LayerNormCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

impl LayerNorm {
    pub fn new(channels: usize) -> Self {
        LayerNorm {
            gamma: Tensor::filled(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&self, x: &[f64]) -> (Vec<f64>, LayerNormCache) {
        let c = self.channels();
        let rows = x.len() / c;
        let (gamma, beta) = (self.gamma.data(), self.beta.data());
        let mut y = vec![0.0; x.len()];
        let mut xhat = vec![0.0; x.len()];
        let mut rstd = Vec::with_capacity(rows);
        for ((xr, yr), hr) in x
            .chunks_exact(c)
            .zip(y.chunks_exact_mut(c))
            .zip(xhat.chunks_exact_mut(c))
        {
            let mean = xr.iter().sum::<f64>() / c as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for i in 0..c {
                hr[i] = (xr[i] - mean) * r;
                yr[i] = hr[i] * gamma[i] + beta[i];
            }
            rstd.push(r);
        }
        (y, LayerNormCache { xhat, rstd })
    }

    pub fn backward(&self, cache: &LayerNormCache, gy: &[f64], grad: &mut LayerNorm) -> Vec<f64> {
        let c = self.channels();
        let gamma = self.gamma.data();
        let mut gx = vec![0.0; gy.len()];
        let mut dxhat = vec![0.0; c];
        for (row, ((gyr, hr), gxr)) in gy
            .chunks_exact(c)
            .zip(cache.xhat.chunks_exact(c))
            .zip(gx.chunks_exact_mut(c))
            .enumerate()
        {
            {
                let gg = grad.gamma.data_mut();
                for i in 0..c {
                    gg[i] += gyr[i] * hr[i];
                }
            }
            {
                let gb = grad.beta.data_mut();
                for i in 0..c {
                    gb[i] += gyr[i];
                }
            }
            let mut mean_d = 0.0;
            let mut mean_dh = 0.0;
            for i in 0..c {
                dxhat[i] = gyr[i] * gamma[i];
                mean_d += dxhat[i];
                mean_dh += dxhat[i] * hr[i];
            }
            mean_d /= c as f64;
            mean_dh /= c as f64;
            let r = cache.rstd[row];
            for i in 0..c {
                gxr[i] = r * (dxhat[i] - mean_d - hr[i] * mean_dh);
            }
        }
        gx
    }
}

impl Parameterized for LayerNorm {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)`, evaluated without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn silu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

pub fn silu_backward(x: &[f64], gy: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(gy)
        .map(|(&v, &g)| {
            let s = sigmoid(v);
            g * s * (1.0 + v * (1.0 - s))
        })
        .collect()
}

/// Per-channel 3x3 convolution, stride 1, zero padding 1.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthwiseConv3x3 {
    /// `[3, 3, C]`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl DepthwiseConv3x3 {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, channels: usize) -> Self {
        // fan-in of a depthwise 3x3 kernel is 9
        DepthwiseConv3x3 {
            weight: trunc_normal_tensor(rng, &[3, 3, channels], 1.0 / 3.0),
            bias: Tensor::zeros(&[channels]),
        }
    }

    pub fn channels(&self) -> usize {
        self.bias.len()
    }

    pub fn forward(&self, x: &FeatureMap) -> FeatureMap {
        let shape = x.shape();
        let c = self.channels();
        let w = self.weight.data();
        let mut out = FeatureMap::zeros(shape, c);
        for r in 0..shape.rows {
            for col in 0..shape.cols {
                let dst = out.token_mut(shape.index(r, col));
                dst.copy_from_slice(self.bias.data());
                for dy in 0..3 {
                    let Some(sr) = (r + dy).checked_sub(1).filter(|&v| v < shape.rows) else {
                        continue;
                    };
                    for dx in 0..3 {
                        let Some(sc) = (col + dx).checked_sub(1).filter(|&v| v < shape.cols) else {
                            continue;
                        };
                        let src = x.token(shape.index(sr, sc));
                        let wk = &w[(dy * 3 + dx) * c..(dy * 3 + dx + 1) * c];
                        for i in 0..c {
                            dst[i] += wk[i] * src[i];
                        }
                    }
                }
            }
        }
        out
    }

    pub fn backward(&self, x: &FeatureMap, gy: &FeatureMap, grad: &mut DepthwiseConv3x3) -> FeatureMap {
        let shape = x.shape();
        let c = self.channels();
        let w = self.weight.data();
        let mut gx = FeatureMap::zeros(shape, c);
        for r in 0..shape.rows {
            for col in 0..shape.cols {
                let g = gy.token(shape.index(r, col));
                {
                    let gb = grad.bias.data_mut();
                    for i in 0..c {
                        gb[i] += g[i];
                    }
                }
                for dy in 0..3 {
                    let Some(sr) = (r + dy).checked_sub(1).filter(|&v| v < shape.rows) else {
                        continue;
                    };
                    for dx in 0..3 {
                        let Some(sc) = (col + dx).checked_sub(1).filter(|&v| v < shape.cols) else {
                            continue;
                        };
                        let k = (dy * 3 + dx) * c;
                        let src_idx = shape.index(sr, sc);
                        let src = x.token(src_idx);
                        let gw = &mut grad.weight.data_mut()[k..k + c];
                        for i in 0..c {
                            gw[i] += g[i] * src[i];
                        }
                        let gxt = gx.token_mut(src_idx);
                        for i in 0..c {
                            gxt[i] += g[i] * w[k + i];
                        }
                    }
                }
            }
        }
        gx
    }
}

impl Parameterized for DepthwiseConv3x3 {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// How a 2x2 convolution places its window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Conv2x2Mode {
    /// Stride 2, no padding: halves both spatial dims.
    Downsample,
    /// Stride 1, zero padding on the bottom and right: keeps the size.
    Same,
}

/// 2x2 convolution implemented as a gather of the four taps followed by a
/// [`Linear`] over the `4 * C_in` concatenated inputs (tap-major:
/// (0,0), (0,1), (1,0), (1,1)).
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2x2 {
    pub mode: Conv2x2Mode,
    pub proj: Linear,
}

impl Conv2x2 {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, mode: Conv2x2Mode, cin: usize, cout: usize) -> Self {
        let std = (1.0 / (4 * cin) as f64).sqrt();
        Conv2x2 {
            mode,
            proj: Linear::new(rng, 4 * cin, cout, std),
        }
    }

    pub fn out_shape(&self, shape: GridShape) -> GridShape {
        match self.mode {
            Conv2x2Mode::Downsample => GridShape {
                rows: shape.rows / 2,
                cols: shape.cols / 2,
            },
            Conv2x2Mode::Same => shape,
        }
    }

    fn taps(&self, r: usize, c: usize) -> [(usize, usize); 4] {
        let (r0, c0) = match self.mode {
            Conv2x2Mode::Downsample => (2 * r, 2 * c),
            Conv2x2Mode::Same => (r, c),
        };
        [(r0, c0), (r0, c0 + 1), (r0 + 1, c0), (r0 + 1, c0 + 1)]
    }

    /// Gathers the `[L_out, 4 * C_in]` tap matrix.
    pub fn im2col(&self, x: &FeatureMap) -> Vec<f64> {
        let shape = x.shape();
        let cin = x.channels();
        let out = self.out_shape(shape);
        let mut cols = vec![0.0; out.len() * 4 * cin];
        for r in 0..out.rows {
            for c in 0..out.cols {
                let base = out.index(r, c) * 4 * cin;
                for (k, (sr, sc)) in self.taps(r, c).into_iter().enumerate() {
                    if sr < shape.rows && sc < shape.cols {
                        cols[base + k * cin..base + (k + 1) * cin].copy_from_slice(x.token(shape.index(sr, sc)));
                    }
                }
            }
        }
        cols
    }

    pub fn forward(&self, x: &FeatureMap) -> (FeatureMap, Vec<f64>) {
        let out = self.out_shape(x.shape());
        let cols = self.im2col(x);
        let y = self.proj.forward(&cols);
        let map = FeatureMap::from_vec(out, self.proj.outputs(), y).expect("conv output shape");
        (map, cols)
    }

    pub fn backward(&self, in_shape: GridShape, cols: &[f64], gy: &FeatureMap, grad: &mut Conv2x2) -> FeatureMap {
        let cin = self.proj.inputs() / 4;
        let gcols = self.proj.backward(cols, gy.as_slice(), &mut grad.proj);
        let out = self.out_shape(in_shape);
        let mut gx = FeatureMap::zeros(in_shape, cin);
        for r in 0..out.rows {
            for c in 0..out.cols {
                let base = out.index(r, c) * 4 * cin;
                for (k, (sr, sc)) in self.taps(r, c).into_iter().enumerate() {
                    if sr < in_shape.rows && sc < in_shape.cols {
                        let dst = gx.token_mut(in_shape.index(sr, sc));
                        let src = &gcols[base + k * cin..base + (k + 1) * cin];
                        for i in 0..cin {
                            dst[i] += src[i];
                        }
                    }
                }
            }
        }
        gx
    }
}

impl Parameterized for Conv2x2 {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor)) {
        self.proj.visit(prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.proj.visit_mut(prefix, f);
    }
}

/// Interpolation taps for one axis of a half-pixel bilinear resize.
fn half_pixel_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let w = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, w)
        })
        .collect()
}

/// Bilinear x2 upsampling of a feature map (half-pixel centers, edge clamp).
pub fn upsample2x(x: &FeatureMap) -> FeatureMap {
    let shape = x.shape();
    let out = GridShape {
        rows: shape.rows * 2,
        cols: shape.cols * 2,
    };
    let c = x.channels();
    let ry = half_pixel_taps(shape.rows, out.rows);
    let rx = half_pixel_taps(shape.cols, out.cols);
    let mut y = FeatureMap::zeros(out, c);
    for (r, &(y0, y1, wy)) in ry.iter().enumerate() {
        for (col, &(x0, x1, wx)) in rx.iter().enumerate() {
            let w00 = (1.0 - wy) * (1.0 - wx);
            let w01 = (1.0 - wy) * wx;
            let w10 = wy * (1.0 - wx);
            let w11 = wy * wx;
            let a = x.token(shape.index(y0, x0));
            let b = x.token(shape.index(y0, x1));
            let cc = x.token(shape.index(y1, x0));
            let d = x.token(shape.index(y1, x1));
            let dst = y.token_mut(out.index(r, col));
            for i in 0..c {
                dst[i] = w00 * a[i] + w01 * b[i] + w10 * cc[i] + w11 * d[i];
            }
        }
    }
    y
}

/// Adjoint of [`upsample2x`].
pub fn upsample2x_backward(in_shape: GridShape, gy: &FeatureMap) -> FeatureMap {
    let out = gy.shape();
    let c = gy.channels();
    let ry = half_pixel_taps(in_shape.rows, out.rows);
    let rx = half_pixel_taps(in_shape.cols, out.cols);
    let mut gx = FeatureMap::zeros(in_shape, c);
    for (r, &(y0, y1, wy)) in ry.iter().enumerate() {
        for (col, &(x0, x1, wx)) in rx.iter().enumerate() {
            let g = gy.token(out.index(r, col)).to_vec();
            for (idx, w) in [
                (in_shape.index(y0, x0), (1.0 - wy) * (1.0 - wx)),
                (in_shape.index(y0, x1), (1.0 - wy) * wx),
                (in_shape.index(y1, x0), wy * (1.0 - wx)),
                (in_shape.index(y1, x1), wy * wx),
            ] {
                let dst = gx.token_mut(idx);
                for i in 0..c {
                    dst[i] += w * g[i];
                }
            }
        }
    }
    gx
}
