//! Dilated (atrous) convolution kernels.
//!
//! A dilated convolution spaces its kernel taps `rate` pixels apart, so a
//! k-tap kernel covers an effective window of `k + (k-1)(rate-1)` pixels
//! without extra parameters. `rate == 1` is ordinary convolution.
//!
//! Index alignment: all routines compute cross-correlation on the
//! zero-padded input, `y[i] = sum_k x_pad[i*stride + rate*k] * w[k]`.
//! This is the left-anchored tap sum applied after padding; choosing
//! `padding = rate*(k-1)/2` centers the window ("same" behavior), which is
//! the convention every built head uses so that branch outputs can be fused.
//!
//! Accumulation happens in f64 in a fixed order per output element and is
//! rounded to the storage type once per element, so results do not depend
//! on the rayon thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor, TensorBase};

/// One spatial output extent: `floor((in + 2*pad - (k-1)*rate - 1)/stride) + 1`.
/// Returns `None` when the window does not fit at least once.
pub fn conv_output_dim(input: usize, k: usize, stride: usize, rate: usize, pad: usize) -> Option<usize> {
    let span = (k - 1) * rate + 1;
    let padded = input + 2 * pad;
    if padded < span {
        return None;
    }
    Some((padded - span) / stride + 1)
}

/// 1-D dilated cross-correlation with explicit zero padding, stride 1.
///
/// Output length is `len(x) + 2*padding - rate*(len(w)-1)`.
pub fn atrous_conv1d(x: &[f32], w: &[f32], rate: usize, padding: usize) -> Result<Vec<f32>> {
    if x.is_empty() {
        return Err(Error::InvalidArgument("atrous_conv1d: empty input".into()));
    }
    if w.is_empty() {
        return Err(Error::InvalidArgument("atrous_conv1d: empty kernel".into()));
    }
    if rate < 1 {
        return Err(Error::InvalidArgument("atrous_conv1d: rate must be >= 1".into()));
    }
    if x.iter().chain(w.iter()).any(|v| !v.is_finite()) {
        return Err(Error::non_finite("atrous_conv1d input"));
    }
    let out_len = conv_output_dim(x.len(), w.len(), 1, rate, padding).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "atrous_conv1d: kernel span {} exceeds padded input {}",
            (w.len() - 1) * rate + 1,
            x.len() + 2 * padding
        ))
    })?;

    let mut y = Vec::with_capacity(out_len);
    for i in 0..out_len {
        let mut acc = 0.0f64;
        for (k, wk) in w.iter().enumerate() {
            let pos = i + rate * k;
            // positions [padding, padding + len) map into x; the rest is zero pad
            if pos >= padding && pos - padding < x.len() {
                acc += x[pos - padding] as f64 * *wk as f64;
            }
        }
        y.push(acc as f32);
    }
    Ok(y)
}

/// A 2-D convolution: kernel values of shape (out_ch, in_ch, kh, kw) plus
/// geometry. `rate` is the dilation spacing of the taps.
#[derive(Debug, Clone)]
pub struct ConvSpec {
    pub kernel: Tensor,
    pub bias: Option<Vec<f32>>,
    pub stride: (usize, usize),
    pub rate: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvSpec {
    pub fn new(kernel: Tensor, bias: Option<Vec<f32>>) -> Self {
        ConvSpec {
            kernel,
            bias,
            stride: (1, 1),
            rate: (1, 1),
            padding: (0, 0),
        }
    }

    pub fn with_stride(mut self, stride: (usize, usize)) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_rate(mut self, rate: (usize, usize)) -> Self {
        self.rate = rate;
        self
    }

    pub fn with_padding(mut self, padding: (usize, usize)) -> Self {
        self.padding = padding;
        self
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape().n
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape().c
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        validate_conv_geometry(
            input,
            self.kernel.shape(),
            self.bias.as_deref().map(<[f32]>::len),
            self.stride,
            self.rate,
            self.padding,
        )
    }
}

fn validate_conv_geometry(
    input: Shape,
    kernel: Shape,
    bias_len: Option<usize>,
    stride: (usize, usize),
    rate: (usize, usize),
    padding: (usize, usize),
) -> Result<Shape> {
    if stride.0 < 1 || stride.1 < 1 {
        return Err(Error::InvalidArgument("conv2d: stride must be >= 1".into()));
    }
    if rate.0 < 1 || rate.1 < 1 {
        return Err(Error::InvalidArgument("conv2d: rate must be >= 1".into()));
    }
    if kernel.h < 1 || kernel.w < 1 || kernel.n < 1 {
        return Err(Error::InvalidArgument("conv2d: degenerate kernel".into()));
    }
    if input.c != kernel.c {
        return Err(Error::shape(
            "conv2d",
            format!("input has {} channels, kernel expects {}", input.c, kernel.c),
        ));
    }
    if let Some(bl) = bias_len {
        if bl != kernel.n {
            return Err(Error::shape(
                "conv2d",
                format!("bias length {} != {} output channels", bl, kernel.n),
            ));
        }
    }
    let oh = conv_output_dim(input.h, kernel.h, stride.0, rate.0, padding.0);
    let ow = conv_output_dim(input.w, kernel.w, stride.1, rate.1, padding.1);
    match (oh, ow) {
        (Some(oh), Some(ow)) if oh >= 1 && ow >= 1 => Ok(Shape::new(input.n, kernel.n, oh, ow)),
        _ => Err(Error::shape(
            "conv2d",
            format!(
                "kernel {}x{} rate {:?} does not fit input {}x{} with padding {:?}",
                kernel.h, kernel.w, rate, input.h, input.w, padding
            ),
        )),
    }
}

/// Generic 2-D dilated convolution forward pass. `Tensor`-typed callers
/// should prefer [`conv2d`]; the generic form exists for the f64 shadow path.
pub fn conv2d_t<T: Scalar>(
    x: &TensorBase<T>,
    kernel: &TensorBase<T>,
    bias: Option<&[T]>,
    stride: (usize, usize),
    rate: (usize, usize),
    padding: (usize, usize),
) -> Result<TensorBase<T>> {
    let out_shape = validate_conv_geometry(
        x.shape(),
        kernel.shape(),
        bias.map(<[T]>::len),
        stride,
        rate,
        padding,
    )?;
    let c = x.shape().c;
    let (h, w) = (x.shape().h, x.shape().w);
    let (oc, kh, kw) = (kernel.shape().n, kernel.shape().h, kernel.shape().w);
    let (oh, ow) = (out_shape.h, out_shape.w);
    let (sh, sw) = stride;
    let (rh, rw) = rate;
    let (ph, pw) = padding;

    let xd = x.data();
    let kd = kernel.data();
    let mut out = TensorBase::<T>::zeros(out_shape);
    let plane = oh * ow;

    out.data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(idx, out_plane)| {
            let b = idx / oc;
            let o = idx % oc;
            let mut acc = vec![0.0f64; plane];
            for ic in 0..c {
                let x_base = (b * c + ic) * h * w;
                let k_base = ((o * c + ic) * kh) * kw;
                for u in 0..kh {
                    for v in 0..kw {
                        let wv = kd[k_base + u * kw + v].to_f64();
                        if wv == 0.0 {
                            continue;
                        }
                        let off_y = (u * rh) as isize - ph as isize;
                        let off_x = (v * rw) as isize - pw as isize;
                        // valid output rows/cols for this tap
                        let oy_lo = lower_valid(off_y, sh);
                        let oy_hi = upper_valid(off_y, sh, h, oh);
                        let ox_lo = lower_valid(off_x, sw);
                        let ox_hi = upper_valid(off_x, sw, w, ow);
                        for oy in oy_lo..oy_hi {
                            let iy = (oy * sh) as isize + off_y;
                            let row = x_base + iy as usize * w;
                            let arow = oy * ow;
                            for ox in ox_lo..ox_hi {
                                let ix = (ox * sw) as isize + off_x;
                                acc[arow + ox] += wv * xd[row + ix as usize].to_f64();
                            }
                        }
                    }
                }
            }
            let b0 = bias.map_or(0.0, |bv| bv[o].to_f64());
            for (dst, a) in out_plane.iter_mut().zip(&acc) {
                *dst = T::from_f64(a + b0);
            }
        });

    out.ensure_finite("conv2d output")?;
    Ok(out)
}

#[inline]
fn lower_valid(off: isize, stride: usize) -> usize {
    if off >= 0 {
        0
    } else {
        ((-off) as usize).div_ceil(stride)
    }
}

#[inline]
fn upper_valid(off: isize, stride: usize, input: usize, out: usize) -> usize {
    // largest o with o*stride + off <= input-1, clamped to [0, out]
    let max_pos = input as isize - 1 - off;
    if max_pos < 0 {
        0
    } else {
        out.min(max_pos as usize / stride + 1)
    }
}

/// f32 forward pass over a [`ConvSpec`].
pub fn conv2d(x: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    conv2d_t(
        x,
        &spec.kernel,
        spec.bias.as_deref(),
        spec.stride,
        spec.rate,
        spec.padding,
    )
}

/// Gradients of a conv2d output with respect to its inputs.
#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub x: Tensor,
    pub kernel: Tensor,
    pub bias: Option<Vec<f32>>,
}

/// Backward pass: given d(loss)/d(output), produce gradients for the input,
/// the kernel, and the bias (when present).
pub fn conv2d_backward(x: &Tensor, spec: &ConvSpec, grad_out: &Tensor) -> Result<ConvGrads> {
    let (gx, gk, gb) = conv2d_backward_t(
        x,
        &spec.kernel,
        spec.bias.is_some(),
        spec.stride,
        spec.rate,
        spec.padding,
        grad_out,
    )?;
    Ok(ConvGrads {
        x: gx,
        kernel: gk,
        bias: gb.map(|t| t.into_data()),
    })
}

#[allow(clippy::type_complexity)]
pub fn conv2d_backward_t<T: Scalar>(
    x: &TensorBase<T>,
    kernel: &TensorBase<T>,
    has_bias: bool,
    stride: (usize, usize),
    rate: (usize, usize),
    padding: (usize, usize),
    grad_out: &TensorBase<T>,
) -> Result<(TensorBase<T>, TensorBase<T>, Option<TensorBase<T>>)> {
    let out_shape = validate_conv_geometry(x.shape(), kernel.shape(), None, stride, rate, padding)?;
    if grad_out.shape() != out_shape {
        return Err(Error::shape(
            "conv2d_backward",
            format!("grad_out {} but forward output is {}", grad_out.shape(), out_shape),
        ));
    }
    let (n, c) = (x.shape().n, x.shape().c);
    let (h, w) = (x.shape().h, x.shape().w);
    let (oc, kh, kw) = (kernel.shape().n, kernel.shape().h, kernel.shape().w);
    let (oh, ow) = (out_shape.h, out_shape.w);
    let (sh, sw) = stride;
    let (rh, rw) = rate;
    let (ph, pw) = padding;

    let xd = x.data();
    let kd = kernel.data();
    let gd = grad_out.data();

    // grad wrt input: scatter grad_out * kernel, one (image, channel) plane per task
    let mut grad_x = TensorBase::<T>::zeros(x.shape());
    grad_x
        .data_mut()
        .par_chunks_mut(h * w)
        .enumerate()
        .for_each(|(idx, gplane)| {
            let b = idx / c;
            let ic = idx % c;
            let mut acc = vec![0.0f64; h * w];
            for o in 0..oc {
                let g_base = (b * oc + o) * oh * ow;
                let k_base = ((o * c + ic) * kh) * kw;
                for u in 0..kh {
                    for v in 0..kw {
                        let wv = kd[k_base + u * kw + v].to_f64();
                        if wv == 0.0 {
                            continue;
                        }
                        let off_y = (u * rh) as isize - ph as isize;
                        let off_x = (v * rw) as isize - pw as isize;
                        let oy_lo = lower_valid(off_y, sh);
                        let oy_hi = upper_valid(off_y, sh, h, oh);
                        let ox_lo = lower_valid(off_x, sw);
                        let ox_hi = upper_valid(off_x, sw, w, ow);
                        for oy in oy_lo..oy_hi {
                            let iy = ((oy * sh) as isize + off_y) as usize;
                            for ox in ox_lo..ox_hi {
                                let ix = ((ox * sw) as isize + off_x) as usize;
                                acc[iy * w + ix] += wv * gd[g_base + oy * ow + ox].to_f64();
                            }
                        }
                    }
                }
            }
            for (dst, a) in gplane.iter_mut().zip(&acc) {
                *dst = T::from_f64(*a);
            }
        });

    // grad wrt kernel: one output-channel slice per task
    let mut grad_k = TensorBase::<T>::zeros(kernel.shape());
    grad_k
        .data_mut()
        .par_chunks_mut(c * kh * kw)
        .enumerate()
        .for_each(|(o, kslice)| {
            for ic in 0..c {
                for u in 0..kh {
                    for v in 0..kw {
                        let off_y = (u * rh) as isize - ph as isize;
                        let off_x = (v * rw) as isize - pw as isize;
                        let oy_lo = lower_valid(off_y, sh);
                        let oy_hi = upper_valid(off_y, sh, h, oh);
                        let ox_lo = lower_valid(off_x, sw);
                        let ox_hi = upper_valid(off_x, sw, w, ow);
                        let mut acc = 0.0f64;
                        for b in 0..n {
                            let g_base = (b * oc + o) * oh * ow;
                            let x_base = (b * c + ic) * h * w;
                            for oy in oy_lo..oy_hi {
                                let iy = ((oy * sh) as isize + off_y) as usize;
                                let xrow = x_base + iy * w;
                                let grow = g_base + oy * ow;
                                for ox in ox_lo..ox_hi {
                                    let ix = ((ox * sw) as isize + off_x) as usize;
                                    acc += gd[grow + ox].to_f64() * xd[xrow + ix].to_f64();
                                }
                            }
                        }
                        kslice[(ic * kh + u) * kw + v] = T::from_f64(acc);
                    }
                }
            }
        });

    let grad_b = if has_bias {
        let mut gb = TensorBase::<T>::zeros(Shape::new(1, 1, 1, oc));
        for o in 0..oc {
            let mut acc = 0.0f64;
            for b in 0..n {
                let base = (b * oc + o) * oh * ow;
                for i in 0..oh * ow {
                    acc += gd[base + i].to_f64();
                }
            }
            gb.data_mut()[o] = T::from_f64(acc);
        }
        Some(gb)
    } else {
        None
    };

    Ok((grad_x, grad_k, grad_b))
}

/// Expand a kernel by inserting `rate-1` zeros between taps, so that a
/// standard (rate 1) convolution with the result equals the dilated one.
pub fn zero_stuffed(kernel: &Tensor, rate: (usize, usize)) -> Tensor {
    let ks = kernel.shape();
    let eh = (ks.h - 1) * rate.0 + 1;
    let ew = (ks.w - 1) * rate.1 + 1;
    let mut out = Tensor::zeros(Shape::new(ks.n, ks.c, eh, ew));
    for o in 0..ks.n {
        for ic in 0..ks.c {
            for u in 0..ks.h {
                for v in 0..ks.w {
                    let val = kernel.at(o, ic, u, v);
                    out.set(o, ic, u * rate.0, v * rate.1, val);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    /// Independent quad-loop reference convolution, f64 throughout.
    fn naive_conv2d(
        x: &Tensor,
        kernel: &Tensor,
        bias: Option<&[f32]>,
        stride: (usize, usize),
        rate: (usize, usize),
        padding: (usize, usize),
    ) -> Tensor {
        let xs = x.shape();
        let ks = kernel.shape();
        let oh = conv_output_dim(xs.h, ks.h, stride.0, rate.0, padding.0).unwrap();
        let ow = conv_output_dim(xs.w, ks.w, stride.1, rate.1, padding.1).unwrap();
        let mut out = Tensor::zeros(Shape::new(xs.n, ks.n, oh, ow));
        for b in 0..xs.n {
            for o in 0..ks.n {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0f64;
                        for ic in 0..xs.c {
                            for u in 0..ks.h {
                                for v in 0..ks.w {
                                    let iy = (oy * stride.0 + u * rate.0) as isize - padding.0 as isize;
                                    let ix = (ox * stride.1 + v * rate.1) as isize - padding.1 as isize;
                                    if iy >= 0 && (iy as usize) < xs.h && ix >= 0 && (ix as usize) < xs.w {
                                        acc += x.at(b, ic, iy as usize, ix as usize) as f64
                                            * kernel.at(o, ic, u, v) as f64;
                                    }
                                }
                            }
                        }
                        acc += bias.map_or(0.0, |bv| bv[o] as f64);
                        out.set(b, o, oy, ox, acc as f32);
                    }
                }
            }
        }
        out
    }

    fn random_tensor(rng: &mut StdRng, shape: Shape) -> Tensor {
        let data = (0..shape.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn conv1d_centered_same_padding_hits_both_endpoints() {
        // taps land on x[0] and x[4] from the center position
        let y = atrous_conv1d(&[1.0, 0.0, 0.0, 0.0, 1.0], &[1.0, 1.0, 1.0], 2, 2).unwrap();
        assert_eq!(y.len(), 5);
        assert_eq!(y[2], 2.0);
    }

    #[test]
    fn conv1d_single_tap_is_identity() {
        let x = [0.5f32, -1.0, 2.0, 3.25];
        let y = atrous_conv1d(&x, &[1.0], 5, 0).unwrap();
        assert_eq!(y, x.to_vec());
    }

    #[test]
    fn conv1d_rate_one_matches_plain_cross_correlation() {
        let x = [1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0];
        let w = [1.0f32, 2.0, 3.0];
        let y = atrous_conv1d(&x, &w, 1, 0).unwrap();
        let reference: Vec<f32> = (0..x.len() - w.len() + 1)
            .map(|i| (0..w.len()).map(|k| x[i + k] * w[k]).sum())
            .collect();
        assert_eq!(y, reference);
    }

    #[test]
    fn conv1d_rejects_bad_arguments() {
        assert!(atrous_conv1d(&[], &[1.0], 1, 0).is_err());
        assert!(atrous_conv1d(&[1.0], &[1.0], 0, 0).is_err());
        assert!(atrous_conv1d(&[1.0, f32::NAN], &[1.0], 1, 0).is_err());
    }

    #[test]
    fn conv2d_ones_rate2_center_is_nine() {
        let x = Tensor::filled(Shape::new(1, 1, 5, 5), 1.0);
        let k = Tensor::filled(Shape::new(1, 1, 3, 3), 1.0);
        let spec = ConvSpec::new(k, None).with_rate((2, 2)).with_padding((2, 2));
        let y = conv2d(&x, &spec).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 5, 5));
        assert_eq!(y.at(0, 0, 2, 2), 9.0);
    }

    #[test]
    fn conv2d_identity_kernel_returns_input() {
        let mut rng = StdRng::seed_from_u64(7);
        let x = random_tensor(&mut rng, Shape::new(2, 3, 6, 5));
        let mut k = Tensor::zeros(Shape::new(3, 3, 1, 1));
        for c in 0..3 {
            k.set(c, c, 0, 0, 1.0);
        }
        let y = conv2d(&x, &ConvSpec::new(k, None)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv2d_matches_naive_reference_across_geometries() {
        let mut rng = StdRng::seed_from_u64(11);
        let cases = [
            (Shape::new(2, 3, 9, 8), Shape::new(4, 3, 3, 3), (1, 1), (2, 2), (2, 2)),
            (Shape::new(1, 2, 12, 12), Shape::new(3, 2, 3, 3), (2, 2), (1, 1), (1, 1)),
            (Shape::new(1, 1, 10, 10), Shape::new(2, 1, 3, 3), (1, 1), (3, 3), (3, 3)),
            (Shape::new(2, 2, 7, 7), Shape::new(2, 2, 1, 1), (1, 1), (1, 1), (0, 0)),
            (Shape::new(1, 2, 11, 9), Shape::new(2, 2, 3, 2), (2, 1), (2, 3), (2, 1)),
        ];
        for (xs, ks, stride, rate, pad) in cases {
            let x = random_tensor(&mut rng, xs);
            let k = random_tensor(&mut rng, ks);
            let bias: Vec<f32> = (0..ks.n).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let spec = ConvSpec::new(k.clone(), Some(bias.clone()))
                .with_stride(stride)
                .with_rate(rate)
                .with_padding(pad);
            let got = conv2d(&x, &spec).unwrap();
            let want = naive_conv2d(&x, &k, Some(&bias), stride, rate, pad);
            assert!(
                got.max_abs_diff(&want).unwrap() <= 1e-6,
                "mismatch for case {:?}",
                (xs, ks, stride, rate, pad)
            );
        }
    }

    #[test]
    fn zero_stuffing_equivalence_random_case() {
        let mut rng = StdRng::seed_from_u64(3);
        let x = random_tensor(&mut rng, Shape::new(2, 4, 16, 16));
        let k = random_tensor(&mut rng, Shape::new(8, 4, 3, 3));
        let dilated = conv2d(
            &x,
            &ConvSpec::new(k.clone(), None).with_rate((3, 3)).with_padding((3, 3)),
        )
        .unwrap();
        let stuffed = conv2d(
            &x,
            &ConvSpec::new(zero_stuffed(&k, (3, 3)), None).with_padding((3, 3)),
        )
        .unwrap();
        assert!(dilated.max_abs_diff(&stuffed).unwrap() <= 1e-5);
    }

    #[test]
    fn rate_one_zero_stuffing_is_bit_identical() {
        let mut rng = StdRng::seed_from_u64(5);
        let x = random_tensor(&mut rng, Shape::new(1, 2, 8, 8));
        let k = random_tensor(&mut rng, Shape::new(2, 2, 3, 3));
        let a = conv2d(&x, &ConvSpec::new(k.clone(), None).with_padding((1, 1))).unwrap();
        let b = conv2d(
            &x,
            &ConvSpec::new(zero_stuffed(&k, (1, 1)), None).with_padding((1, 1)),
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn backward_scalar_case_is_product_rule() {
        let x = Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![2.5]).unwrap();
        let k = Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![-1.5]).unwrap();
        let spec = ConvSpec::new(k, Some(vec![0.25]));
        let grad_out = Tensor::filled(Shape::new(1, 1, 1, 1), 1.0);
        let grads = conv2d_backward(&x, &spec, &grad_out).unwrap();
        assert_eq!(grads.x.data(), &[-1.5]);
        assert_eq!(grads.kernel.data(), &[2.5]);
        assert_eq!(grads.bias.unwrap(), vec![1.0]);
    }

    #[test]
    fn backward_zero_grad_out_gives_zero_grads() {
        let mut rng = StdRng::seed_from_u64(9);
        let x = random_tensor(&mut rng, Shape::new(1, 2, 6, 6));
        let k = random_tensor(&mut rng, Shape::new(3, 2, 3, 3));
        let spec = ConvSpec::new(k, Some(vec![0.0; 3])).with_rate((2, 2)).with_padding((2, 2));
        let grad_out = Tensor::zeros(spec.output_shape(x.shape()).unwrap());
        let grads = conv2d_backward(&x, &spec, &grad_out).unwrap();
        assert!(grads.x.data().iter().all(|v| *v == 0.0));
        assert!(grads.kernel.data().iter().all(|v| *v == 0.0));
        assert!(grads.bias.unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn conv2d_rejects_channel_mismatch_and_degenerate_output() {
        let x = Tensor::zeros(Shape::new(1, 2, 4, 4));
        let k = Tensor::zeros(Shape::new(1, 3, 3, 3));
        assert!(conv2d(&x, &ConvSpec::new(k, None)).is_err());

        let x = Tensor::zeros(Shape::new(1, 1, 2, 2));
        let k = Tensor::zeros(Shape::new(1, 1, 3, 3));
        assert!(conv2d(&x, &ConvSpec::new(k, None).with_rate((2, 2))).is_err());
    }
}
