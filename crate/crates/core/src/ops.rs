//! Resampling, pooling, activation, and normalization primitives.
//!
//! Bilinear resizing uses the align-corners-false convention: source
//! coordinate `s = (d + 0.5) * in/out - 0.5`, clamped to the input. All
//! reductions accumulate in f64 in a fixed order.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor, TensorBase};

/// Execution mode for stochastic / statistics-carrying layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

// ---------------------------------------------------------------------------
// bilinear resize
// ---------------------------------------------------------------------------

#[inline]
fn resize_taps(dst: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    if in_len == 1 {
        return (0, 0, 0.0);
    }
    let scale = in_len as f64 / out_len as f64;
    let s = (dst as f64 + 0.5) * scale - 0.5;
    let s = s.max(0.0);
    let lo = (s.floor() as usize).min(in_len - 1);
    let hi = (lo + 1).min(in_len - 1);
    (lo, hi, s - lo as f64)
}

pub fn bilinear_resize_t<T: Scalar>(
    x: &TensorBase<T>,
    out_h: usize,
    out_w: usize,
) -> Result<TensorBase<T>> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(
            "bilinear_resize: target dims must be >= 1".into(),
        ));
    }
    let s = x.shape();
    if s.h == out_h && s.w == out_w {
        return Ok(x.clone());
    }
    let mut out = TensorBase::<T>::zeros(Shape::new(s.n, s.c, out_h, out_w));
    let row_taps: Vec<(usize, usize, f64)> =
        (0..out_h).map(|oy| resize_taps(oy, s.h, out_h)).collect();
    let col_taps: Vec<(usize, usize, f64)> =
        (0..out_w).map(|ox| resize_taps(ox, s.w, out_w)).collect();
    let xd = x.data();
    let plane_in = s.h * s.w;
    let plane_out = out_h * out_w;
    for pc in 0..s.n * s.c {
        let src = &xd[pc * plane_in..(pc + 1) * plane_in];
        for oy in 0..out_h {
            let (y0, y1, wy) = row_taps[oy];
            for ox in 0..out_w {
                let (x0, x1, wx) = col_taps[ox];
                let v00 = src[y0 * s.w + x0].to_f64();
                let v01 = src[y0 * s.w + x1].to_f64();
                let v10 = src[y1 * s.w + x0].to_f64();
                let v11 = src[y1 * s.w + x1].to_f64();
                let top = v00 + (v01 - v00) * wx;
                let bot = v10 + (v11 - v10) * wx;
                out.data_mut()[pc * plane_out + oy * out_w + ox] =
                    T::from_f64(top + (bot - top) * wy);
            }
        }
    }
    Ok(out)
}

pub fn bilinear_resize(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    bilinear_resize_t(x, out_h, out_w)
}

/// Transpose of [`bilinear_resize_t`]: scatters output gradients back onto
/// the input grid with the interpolation weights.
pub fn bilinear_resize_backward_t<T: Scalar>(
    input_shape: Shape,
    grad_out: &TensorBase<T>,
) -> Result<TensorBase<T>> {
    let gs = grad_out.shape();
    if gs.n != input_shape.n || gs.c != input_shape.c {
        return Err(Error::shape(
            "bilinear_resize_backward",
            format!("grad {} vs input {}", gs, input_shape),
        ));
    }
    if gs.h == input_shape.h && gs.w == input_shape.w {
        return Ok(grad_out.clone());
    }
    let row_taps: Vec<(usize, usize, f64)> =
        (0..gs.h).map(|oy| resize_taps(oy, input_shape.h, gs.h)).collect();
    let col_taps: Vec<(usize, usize, f64)> =
        (0..gs.w).map(|ox| resize_taps(ox, input_shape.w, gs.w)).collect();
    let mut out = TensorBase::<T>::zeros(input_shape);
    let gd = grad_out.data();
    let plane_in = input_shape.h * input_shape.w;
    let plane_out = gs.h * gs.w;
    for pc in 0..gs.n * gs.c {
        let mut acc = vec![0.0f64; plane_in];
        for oy in 0..gs.h {
            let (y0, y1, wy) = row_taps[oy];
            for ox in 0..gs.w {
                let (x0, x1, wx) = col_taps[ox];
                let g = gd[pc * plane_out + oy * gs.w + ox].to_f64();
                acc[y0 * input_shape.w + x0] += g * (1.0 - wy) * (1.0 - wx);
                acc[y0 * input_shape.w + x1] += g * (1.0 - wy) * wx;
                acc[y1 * input_shape.w + x0] += g * wy * (1.0 - wx);
                acc[y1 * input_shape.w + x1] += g * wy * wx;
            }
        }
        for (i, a) in acc.iter().enumerate() {
            out.data_mut()[pc * plane_in + i] = T::from_f64(*a);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// pooling
// ---------------------------------------------------------------------------

pub fn global_avg_pool_t<T: Scalar>(x: &TensorBase<T>) -> Result<TensorBase<T>> {
    let s = x.shape();
    if s.is_empty() {
        return Err(Error::InvalidArgument("global_avg_pool: empty tensor".into()));
    }
    let mut out = TensorBase::<T>::zeros(Shape::new(s.n, s.c, 1, 1));
    let plane = s.h * s.w;
    for pc in 0..s.n * s.c {
        let mut acc = 0.0f64;
        for v in &x.data()[pc * plane..(pc + 1) * plane] {
            acc += v.to_f64();
        }
        out.data_mut()[pc] = T::from_f64(acc / plane as f64);
    }
    Ok(out)
}

pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    global_avg_pool_t(x)
}

pub fn global_avg_pool_backward_t<T: Scalar>(
    input_shape: Shape,
    grad_out: &TensorBase<T>,
) -> TensorBase<T> {
    let mut out = TensorBase::<T>::zeros(input_shape);
    let plane = input_shape.h * input_shape.w;
    let inv = 1.0 / plane as f64;
    for pc in 0..input_shape.n * input_shape.c {
        let g = T::from_f64(grad_out.data()[pc].to_f64() * inv);
        for v in &mut out.data_mut()[pc * plane..(pc + 1) * plane] {
            *v = g;
        }
    }
    out
}

/// Max pooling; only needed by the stem of the counting backbone.
pub fn max_pool_t<T: Scalar>(
    x: &TensorBase<T>,
    k: usize,
    stride: usize,
    pad: usize,
) -> Result<(TensorBase<T>, Vec<usize>)> {
    let s = x.shape();
    let oh = crate::conv::conv_output_dim(s.h, k, stride, 1, pad)
        .ok_or_else(|| Error::shape("max_pool", "window does not fit"))?;
    let ow = crate::conv::conv_output_dim(s.w, k, stride, 1, pad)
        .ok_or_else(|| Error::shape("max_pool", "window does not fit"))?;
    let mut out = TensorBase::<T>::zeros(Shape::new(s.n, s.c, oh, ow));
    let mut argmax = vec![0usize; out.len()];
    let plane = s.h * s.w;
    for pc in 0..s.n * s.c {
        let src = &x.data()[pc * plane..(pc + 1) * plane];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best: Option<(T, usize)> = None;
                for u in 0..k {
                    for v in 0..k {
                        let iy = (oy * stride + u) as isize - pad as isize;
                        let ix = (ox * stride + v) as isize - pad as isize;
                        if iy < 0 || iy as usize >= s.h || ix < 0 || ix as usize >= s.w {
                            continue;
                        }
                        let idx = iy as usize * s.w + ix as usize;
                        let val = src[idx];
                        if best.map_or(true, |(b, _)| val > b) {
                            best = Some((val, idx));
                        }
                    }
                }
                let (val, idx) = best
                    .ok_or_else(|| Error::shape("max_pool", "empty pooling window"))?;
                let o = oy * ow + ox;
                out.data_mut()[pc * oh * ow + o] = val;
                argmax[pc * oh * ow + o] = pc * plane + idx;
            }
        }
    }
    Ok((out, argmax))
}

pub fn max_pool_backward_t<T: Scalar>(
    input_shape: Shape,
    argmax: &[usize],
    grad_out: &TensorBase<T>,
) -> TensorBase<T> {
    let mut out = TensorBase::<T>::zeros(input_shape);
    for (g, idx) in grad_out.data().iter().zip(argmax) {
        out.data_mut()[*idx] += *g;
    }
    out
}

// ---------------------------------------------------------------------------
// activations
// ---------------------------------------------------------------------------

pub fn relu_t<T: Scalar>(x: &TensorBase<T>) -> TensorBase<T> {
    let mut out = x.clone();
    for v in out.data_mut() {
        if *v < T::ZERO {
            *v = T::ZERO;
        }
    }
    out
}

pub fn relu(x: &Tensor) -> Tensor {
    relu_t(x)
}

pub fn relu_backward_t<T: Scalar>(x: &TensorBase<T>, grad_out: &TensorBase<T>) -> TensorBase<T> {
    let mut out = grad_out.clone();
    for (g, v) in out.data_mut().iter_mut().zip(x.data()) {
        if *v <= T::ZERO {
            *g = T::ZERO;
        }
    }
    out
}

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid_t<T: Scalar>(x: &TensorBase<T>) -> TensorBase<T> {
    let mut out = x.clone();
    for v in out.data_mut() {
        *v = T::from_f64(sigmoid_scalar(v.to_f64()));
    }
    out
}

/// Channel softmax: each (image, pixel) column sums to one.
pub fn softmax_channels_t<T: Scalar>(x: &TensorBase<T>) -> Result<TensorBase<T>> {
    let s = x.shape();
    if s.c == 0 || s.is_empty() {
        return Err(Error::InvalidArgument("softmax_channels: empty tensor".into()));
    }
    let mut out = TensorBase::<T>::zeros(s);
    let plane = s.h * s.w;
    let xd = x.data();
    for b in 0..s.n {
        for p in 0..plane {
            let mut mx = f64::NEG_INFINITY;
            for c in 0..s.c {
                mx = mx.max(xd[(b * s.c + c) * plane + p].to_f64());
            }
            let mut z = 0.0f64;
            for c in 0..s.c {
                z += (xd[(b * s.c + c) * plane + p].to_f64() - mx).exp();
            }
            for c in 0..s.c {
                let e = (xd[(b * s.c + c) * plane + p].to_f64() - mx).exp();
                out.data_mut()[(b * s.c + c) * plane + p] = T::from_f64(e / z);
            }
        }
    }
    Ok(out)
}

pub fn softmax_channels(x: &Tensor) -> Result<Tensor> {
    softmax_channels_t(x)
}

/// Backward through channel softmax given its own output `y`.
pub fn softmax_channels_backward_t<T: Scalar>(
    y: &TensorBase<T>,
    grad_out: &TensorBase<T>,
) -> TensorBase<T> {
    let s = y.shape();
    let plane = s.h * s.w;
    let mut out = TensorBase::<T>::zeros(s);
    for b in 0..s.n {
        for p in 0..plane {
            let mut dot = 0.0f64;
            for c in 0..s.c {
                let idx = (b * s.c + c) * plane + p;
                dot += grad_out.data()[idx].to_f64() * y.data()[idx].to_f64();
            }
            for c in 0..s.c {
                let idx = (b * s.c + c) * plane + p;
                let yv = y.data()[idx].to_f64();
                out.data_mut()[idx] = T::from_f64(yv * (grad_out.data()[idx].to_f64() - dot));
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// batch normalization
// ---------------------------------------------------------------------------

/// Learnable scale/shift plus the running statistics used in eval mode.
#[derive(Debug, Clone)]
pub struct BatchNormParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub eps: f32,
    pub momentum: f32,
}

impl BatchNormParams {
    pub fn new(channels: usize) -> Self {
        BatchNormParams {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: 1e-5,
            momentum: 0.1,
        }
    }
}

/// Per-channel batch statistics captured by a train-mode forward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub fn batchnorm_train_t<T: Scalar>(
    x: &TensorBase<T>,
    gamma: &[T],
    beta: &[T],
    eps: f64,
) -> Result<(TensorBase<T>, BatchNormCache)> {
    let s = x.shape();
    check_bn_params(s, gamma.len(), beta.len())?;
    let plane = s.h * s.w;
    let count = (s.n * plane) as f64;
    let mut mean = vec![0.0f64; s.c];
    let mut var = vec![0.0f64; s.c];
    for c in 0..s.c {
        let mut acc = 0.0f64;
        for b in 0..s.n {
            let base = (b * s.c + c) * plane;
            for p in 0..plane {
                acc += x.data()[base + p].to_f64();
            }
        }
        mean[c] = acc / count;
        let mut vacc = 0.0f64;
        for b in 0..s.n {
            let base = (b * s.c + c) * plane;
            for p in 0..plane {
                let d = x.data()[base + p].to_f64() - mean[c];
                vacc += d * d;
            }
        }
        var[c] = vacc / count;
    }
    let mut out = TensorBase::<T>::zeros(s);
    for c in 0..s.c {
        let inv = 1.0 / (var[c] + eps).sqrt();
        let g = gamma[c].to_f64();
        let bta = beta[c].to_f64();
        for b in 0..s.n {
            let base = (b * s.c + c) * plane;
            for p in 0..plane {
                let xhat = (x.data()[base + p].to_f64() - mean[c]) * inv;
                out.data_mut()[base + p] = T::from_f64(g * xhat + bta);
            }
        }
    }
    Ok((out, BatchNormCache { mean, var }))
}

pub fn batchnorm_eval_t<T: Scalar>(
    x: &TensorBase<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    eps: f64,
) -> Result<TensorBase<T>> {
    let s = x.shape();
    check_bn_params(s, gamma.len(), beta.len())?;
    let plane = s.h * s.w;
    let mut out = TensorBase::<T>::zeros(s);
    for c in 0..s.c {
        let inv = 1.0 / (running_var[c].to_f64() + eps).sqrt();
        let g = gamma[c].to_f64();
        let bta = beta[c].to_f64();
        let m = running_mean[c].to_f64();
        for b in 0..s.n {
            let base = (b * s.c + c) * plane;
            for p in 0..plane {
                out.data_mut()[base + p] =
                    T::from_f64(g * (x.data()[base + p].to_f64() - m) * inv + bta);
            }
        }
    }
    Ok(out)
}

/// Backward through train-mode batchnorm. Returns (grad_x, grad_gamma, grad_beta).
pub fn batchnorm_train_backward_t<T: Scalar>(
    x: &TensorBase<T>,
    gamma: &[T],
    cache: &BatchNormCache,
    eps: f64,
    grad_out: &TensorBase<T>,
) -> (TensorBase<T>, Vec<T>, Vec<T>) {
    let s = x.shape();
    let plane = s.h * s.w;
    let count = (s.n * plane) as f64;
    let mut grad_x = TensorBase::<T>::zeros(s);
    let mut grad_gamma = vec![T::ZERO; s.c];
    let mut grad_beta = vec![T::ZERO; s.c];
    for c in 0..s.c {
        let inv = 1.0 / (cache.var[c] + eps).sqrt();
        let mean = cache.mean[c];
        let mut sum_g = 0.0f64;
        let mut sum_gx = 0.0f64;
        for b in 0..s.n {
            let base = (b * s.c + c) * plane;
            for p in 0..plane {
                let g = grad_out.data()[base + p].to_f64();
                let xhat = (x.data()[base + p].to_f64() - mean) * inv;
                sum_g += g;
                sum_gx += g * xhat;
            }
        }
        grad_gamma[c] = T::from_f64(sum_gx);
        grad_beta[c] = T::from_f64(sum_g);
        let gam = gamma[c].to_f64();
        for b in 0..s.n {
            let base = (b * s.c + c) * plane;
            for p in 0..plane {
                let g = grad_out.data()[base + p].to_f64();
                let xhat = (x.data()[base + p].to_f64() - mean) * inv;
                let dx = gam * inv * (g - sum_g / count - xhat * sum_gx / count);
                grad_x.data_mut()[base + p] = T::from_f64(dx);
            }
        }
    }
    (grad_x, grad_gamma, grad_beta)
}

fn check_bn_params(s: Shape, gamma_len: usize, beta_len: usize) -> Result<()> {
    if s.is_empty() {
        return Err(Error::InvalidArgument("batchnorm: empty tensor".into()));
    }
    if gamma_len != s.c || beta_len != s.c {
        return Err(Error::shape(
            "batchnorm",
            format!("{} channels but gamma/beta have {}/{}", s.c, gamma_len, beta_len),
        ));
    }
    Ok(())
}

/// Spec-shaped wrapper: train mode normalizes with batch statistics and
/// folds them into the running estimates; eval mode uses the running stats.
pub fn batchnorm(x: &Tensor, params: &mut BatchNormParams, mode: Mode) -> Result<Tensor> {
    match mode {
        Mode::Eval => batchnorm_eval_t(
            x,
            &params.gamma,
            &params.beta,
            &params.running_mean,
            &params.running_var,
            params.eps as f64,
        ),
        Mode::Train => {
            let (y, cache) = batchnorm_train_t(x, &params.gamma, &params.beta, params.eps as f64)?;
            let m = params.momentum as f64;
            for c in 0..params.running_mean.len() {
                params.running_mean[c] =
                    ((1.0 - m) * params.running_mean[c] as f64 + m * cache.mean[c]) as f32;
                params.running_var[c] =
                    ((1.0 - m) * params.running_var[c] as f64 + m * cache.var[c]) as f32;
            }
            Ok(y)
        }
    }
}

// ---------------------------------------------------------------------------
// dropout
// ---------------------------------------------------------------------------

/// Inverted dropout. Train mode zeroes each element with probability `p`
/// and scales survivors by `1/(1-p)`; eval mode is the identity. Returns
/// the mask so the backward pass can reuse it.
pub fn dropout(
    x: &Tensor,
    p: f32,
    mode: Mode,
    rng: &mut impl rand::Rng,
) -> Result<(Tensor, Option<Vec<f32>>)> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!(
            "dropout: p must be in [0,1), got {p}"
        )));
    }
    if x.is_empty() {
        return Err(Error::InvalidArgument("dropout: empty tensor".into()));
    }
    match mode {
        Mode::Eval => Ok((x.clone(), None)),
        Mode::Train => {
            let keep = 1.0 - p;
            let scale = 1.0 / keep;
            let mask: Vec<f32> = (0..x.len())
                .map(|_| if rng.gen::<f32>() < keep { scale } else { 0.0 })
                .collect();
            let mut out = x.clone();
            for (v, m) in out.data_mut().iter_mut().zip(&mask) {
                *v *= m;
            }
            Ok((out, Some(mask)))
        }
    }
}
