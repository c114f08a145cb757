//! Forward and backward kernels for each layer kind.
//!
//! Kernels are plain functions over [`Tensor`]s; the tape in [`super::Graph`]
//! sequences them. Images flow as `N x C x H x W`, dense activations as `N x F`.

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{DehazeError, Result};

/// Pointwise nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(slope) => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        }
    }

    /// Derivative given the input `x` and the output `y = apply(x)`.
    /// The kink of the rectifiers takes the left-hand slope.
    #[inline]
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(slope) => {
                if x > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

/// Spatial output extent of a "same"-padded convolution.
pub fn conv_output_extent(extent: usize, stride: usize) -> usize {
    extent.div_ceil(stride)
}

fn check_conv(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let (n, ci, h, wd) = x.dims4()?;
    let (co, wci, kh, kw) = w.dims4()?;
    if stride == 0 {
        return Err(DehazeError::invalid("convolution stride must be at least 1"));
    }
    if kh != kw || kh % 2 == 0 {
        return Err(DehazeError::invalid(format!(
            "convolution kernel must be square with odd extent, got {kh}x{kw}"
        )));
    }
    if wci != ci {
        return Err(DehazeError::dims(format!(
            "convolution expects {wci} input channels, input has {ci}"
        )));
    }
    if b.shape() != [co] {
        return Err(DehazeError::dims(format!(
            "convolution bias shape {:?} does not match {co} output channels",
            b.shape()
        )));
    }
    Ok((n, ci, h, wd, co, kh))
}

/// Valid output index range `[lo, hi)` for kernel offset `k` along one axis.
#[inline]
fn valid_range(k: usize, pad: usize, stride: usize, in_extent: usize, out_extent: usize) -> (usize, usize) {
    // input index = o * stride + k - pad must lie in [0, in_extent)
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if in_extent + pad > k {
        ((in_extent + pad - k - 1) / stride + 1).min(out_extent)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Zero-padded "same" cross-correlation plus per-channel bias.
pub fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize) -> Result<Tensor> {
    let (n, ci, h, wd, co, k) = check_conv(x, w, b, stride)?;
    let pad = (k - 1) / 2;
    let (ho, wo) = (conv_output_extent(h, stride), conv_output_extent(wd, stride));
    let mut out = vec![0.0; n * co * ho * wo];
    let xd = x.data();
    let wdata = w.data();
    for s in 0..n {
        for o in 0..co {
            let plane = &mut out[(s * co + o) * ho * wo..(s * co + o + 1) * ho * wo];
            plane.fill(b.data()[o]);
            for c in 0..ci {
                let input = &xd[(s * ci + c) * h * wd..(s * ci + c + 1) * h * wd];
                for ky in 0..k {
                    let (oy0, oy1) = valid_range(ky, pad, stride, h, ho);
                    for kx in 0..k {
                        let wv = wdata[((o * ci + c) * k + ky) * k + kx];
                        let (ox0, ox1) = valid_range(kx, pad, stride, wd, wo);
                        for oy in oy0..oy1 {
                            let iy = oy * stride + ky - pad;
                            let row = &mut plane[oy * wo..(oy + 1) * wo];
                            let irow = &input[iy * wd..(iy + 1) * wd];
                            if stride == 1 {
                                let off = kx as isize - pad as isize;
                                let src = &irow[(ox0 as isize + off) as usize..(ox1 as isize + off) as usize];
                                for (r, &v) in row[ox0..ox1].iter_mut().zip(src) {
                                    *r += wv * v;
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    row[ox] += wv * irow[ox * stride + kx - pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, co, ho, wo], out)
}

/// Gradients of [`conv2d_forward`] with respect to input, weights and bias.
/// Input and weight gradients are only formed when requested.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    grad_out: &Tensor,
    need_input: bool,
    need_weights: bool,
) -> Result<(Option<Tensor>, Option<Tensor>, Tensor)> {
    let (n, ci, h, wd) = x.dims4()?;
    let (co, _, k, _) = w.dims4()?;
    let pad = (k - 1) / 2;
    let (ho, wo) = (conv_output_extent(h, stride), conv_output_extent(wd, stride));
    if grad_out.shape() != [n, co, ho, wo] {
        return Err(DehazeError::dims(format!(
            "convolution output gradient {:?} vs expected {:?}",
            grad_out.shape(),
            [n, co, ho, wo]
        )));
    }
    let xd = x.data();
    let wdata = w.data();
    let gd = grad_out.data();
    let mut gx = vec![0.0; if need_input { x.len() } else { 0 }];
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; co];
    for s in 0..n {
        for o in 0..co {
            let gplane = &gd[(s * co + o) * ho * wo..(s * co + o + 1) * ho * wo];
            gb[o] += gplane.iter().sum::<f64>();
            if !need_input && !need_weights {
                continue;
            }
            for c in 0..ci {
                let base = (s * ci + c) * h * wd;
                for ky in 0..k {
                    let (oy0, oy1) = valid_range(ky, pad, stride, h, ho);
                    for kx in 0..k {
                        let widx = ((o * ci + c) * k + ky) * k + kx;
                        let wv = wdata[widx];
                        let (ox0, ox1) = valid_range(kx, pad, stride, wd, wo);
                        let mut acc = 0.0;
                        for oy in oy0..oy1 {
                            let iy = oy * stride + ky - pad;
                            let grow = &gplane[oy * wo..(oy + 1) * wo];
                            let ioff = base + iy * wd;
                            if stride == 1 {
                                let ix0 = ox0 + kx - pad;
                                let ix1 = ox1 + kx - pad;
                                let grow = &grow[ox0..ox1];
                                if need_weights {
                                    let irow = &xd[ioff + ix0..ioff + ix1];
                                    acc += grow.iter().zip(irow).map(|(g, v)| g * v).sum::<f64>();
                                }
                                if need_input {
                                    let gxrow = &mut gx[ioff + ix0..ioff + ix1];
                                    for (gxv, g) in gxrow.iter_mut().zip(grow) {
                                        *gxv += wv * g;
                                    }
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    let ix = ioff + ox * stride + kx - pad;
                                    if need_weights {
                                        acc += grow[ox] * xd[ix];
                                    }
                                    if need_input {
                                        gx[ix] += wv * grow[ox];
                                    }
                                }
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
    Ok((
        if need_input {
            Some(Tensor::new(x.shape().to_vec(), gx)?)
        } else {
            None
        },
        if need_weights {
            Some(Tensor::new(w.shape().to_vec(), gw)?)
        } else {
            None
        },
        Tensor::new(vec![co], gb)?,
    ))
}

/// Batch statistics of one batch-norm application, per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormStats {
    pub mean: Vec<f64>,
    /// Population (biased) variance.
    pub var: Vec<f64>,
}

/// Values kept from the forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct BatchNormCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
}

fn check_bn(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = x.dims4()?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(DehazeError::dims(format!(
            "batch norm over {c} channels got scale {:?} and shift {:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    Ok((n, c, h * w))
}

/// Training-mode batch normalization using the statistics of `x` itself.
pub fn batch_norm_train_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, BatchNormCache, BatchNormStats)> {
    let (n, c, plane) = check_bn(x, gamma, beta)?;
    let m = n * plane;
    if m < 2 {
        return Err(DehazeError::invalid(format!(
            "training-mode batch norm needs at least 2 values per channel, got {m}"
        )));
    }
    let xd = x.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut sum = 0.0;
        for s in 0..n {
            sum += xd[(s * c + ch) * plane..(s * c + ch + 1) * plane].iter().sum::<f64>();
        }
        let mu = sum / m as f64;
        let mut sq = 0.0;
        for s in 0..n {
            sq += xd[(s * c + ch) * plane..(s * c + ch + 1) * plane]
                .iter()
                .map(|v| (v - mu) * (v - mu))
                .sum::<f64>();
        }
        mean[ch] = mu;
        var[ch] = sq / m as f64;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    for s in 0..n {
        for ch in 0..c {
            let (g, bt) = (gamma.data()[ch], beta.data()[ch]);
            for i in (s * c + ch) * plane..(s * c + ch + 1) * plane {
                let xh = (xd[i] - mean[ch]) * inv_std[ch];
                xhat[i] = xh;
                y[i] = g * xh + bt;
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), y)?,
        BatchNormCache {
            xhat: Tensor::new(x.shape().to_vec(), xhat)?,
            inv_std,
        },
        BatchNormStats { mean, var },
    ))
}

/// Gradients of training-mode batch norm: `(d input, d scale, d shift)`.
pub fn batch_norm_train_backward(
    gamma: &Tensor,
    cache: &BatchNormCache,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, c, h, w) = grad_out.dims4()?;
    let plane = h * w;
    let m = (n * plane) as f64;
    let gd = grad_out.data();
    let xh = cache.xhat.data();
    let mut gx = vec![0.0; grad_out.len()];
    let mut ggamma = vec![0.0; c];
    let mut gbeta = vec![0.0; c];
    for ch in 0..c {
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for s in 0..n {
            for i in (s * c + ch) * plane..(s * c + ch + 1) * plane {
                sum_g += gd[i];
                sum_gx += gd[i] * xh[i];
            }
        }
        ggamma[ch] = sum_gx;
        gbeta[ch] = sum_g;
        let g = gamma.data()[ch];
        let scale = g * cache.inv_std[ch] / m;
        for s in 0..n {
            for i in (s * c + ch) * plane..(s * c + ch + 1) * plane {
                gx[i] = scale * (m * gd[i] - sum_g - xh[i] * sum_gx);
            }
        }
    }
    Ok((
        Tensor::new(grad_out.shape().to_vec(), gx)?,
        Tensor::new(vec![c], ggamma)?,
        Tensor::new(vec![c], gbeta)?,
    ))
}

/// Inference-mode batch normalization with fixed statistics.
pub fn batch_norm_infer_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mean: &Tensor,
    var: &Tensor,
    eps: f64,
) -> Result<Tensor> {
    let (n, c, plane) = check_bn(x, gamma, beta)?;
    if mean.shape() != [c] || var.shape() != [c] {
        return Err(DehazeError::dims("batch norm running statistics shape"));
    }
    let xd = x.data();
    let mut y = vec![0.0; x.len()];
    for s in 0..n {
        for ch in 0..c {
            let inv = 1.0 / (var.data()[ch] + eps).sqrt();
            let (g, bt, mu) = (gamma.data()[ch], beta.data()[ch], mean.data()[ch]);
            for i in (s * c + ch) * plane..(s * c + ch + 1) * plane {
                y[i] = g * ((xd[i] - mu) * inv) + bt;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), y)
}

pub fn batch_norm_infer_backward(
    x: &Tensor,
    gamma: &Tensor,
    mean: &Tensor,
    var: &Tensor,
    eps: f64,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, c, h, w) = x.dims4()?;
    let plane = h * w;
    let xd = x.data();
    let gd = grad_out.data();
    let mut gx = vec![0.0; x.len()];
    let mut ggamma = vec![0.0; c];
    let mut gbeta = vec![0.0; c];
    for s in 0..n {
        for ch in 0..c {
            let inv = 1.0 / (var.data()[ch] + eps).sqrt();
            let (g, mu) = (gamma.data()[ch], mean.data()[ch]);
            for i in (s * c + ch) * plane..(s * c + ch + 1) * plane {
                gx[i] = gd[i] * g * inv;
                ggamma[ch] += gd[i] * (xd[i] - mu) * inv;
                gbeta[ch] += gd[i];
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), gx)?,
        Tensor::new(vec![c], ggamma)?,
        Tensor::new(vec![c], gbeta)?,
    ))
}

/// `y = x W^T + b` for `x: N x F`, `W: G x F`, `b: G`.
pub fn dense_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, f) = x.dims2()?;
    let (g, wf) = w.dims2()?;
    if wf != f || b.shape() != [g] {
        return Err(DehazeError::dims(format!(
            "dense layer {:?} with bias {:?} applied to {:?}",
            w.shape(),
            b.shape(),
            x.shape()
        )));
    }
    let mut out = vec![0.0; n * g];
    for s in 0..n {
        let row = &x.data()[s * f..(s + 1) * f];
        for o in 0..g {
            let wrow = &w.data()[o * f..(o + 1) * f];
            out[s * g + o] = b.data()[o] + wrow.iter().zip(row).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    Tensor::new(vec![n, g], out)
}

pub fn dense_backward(x: &Tensor, w: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, f) = x.dims2()?;
    let (g, _) = w.dims2()?;
    if grad_out.shape() != [n, g] {
        return Err(DehazeError::dims("dense output gradient shape"));
    }
    let mut gx = vec![0.0; n * f];
    let mut gw = vec![0.0; g * f];
    let mut gb = vec![0.0; g];
    for s in 0..n {
        let row = &x.data()[s * f..(s + 1) * f];
        for o in 0..g {
            let go = grad_out.data()[s * g + o];
            gb[o] += go;
            let wrow = &w.data()[o * f..(o + 1) * f];
            for i in 0..f {
                gx[s * f + i] += go * wrow[i];
                gw[o * f + i] += go * row[i];
            }
        }
    }
    Ok((
        Tensor::new(vec![n, f], gx)?,
        Tensor::new(vec![g, f], gw)?,
        Tensor::new(vec![g], gb)?,
    ))
}
