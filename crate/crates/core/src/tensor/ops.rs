//! Forward and backward kernels for every layer type the networks use.
//!
//! Kernels are pure: they read caller-owned tensors and return new ones.
//! Backward functions take the upstream gradient and return gradients for
//! the input and for each parameter, in that order.

use crate::error::{Error, Result};

use super::{Scalar, Shape, Tensor};

/// Epsilon added to the variance inside batch normalization.
pub const BN_EPS: f64 = 1e-5;

/// Spatial output extent of a sliding window; floors partial windows.
pub fn conv_output_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::invalid("stride must be positive"));
    }
    let padded = input + 2 * padding;
    if padded < kernel {
        return Err(Error::shape(format!(
            "kernel {kernel} does not fit input extent {input} with padding {padding}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

struct ConvGeometry {
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
}

impl ConvGeometry {
    fn new(input: Shape, k: usize, stride: usize, pad: usize) -> Result<Self> {
        Ok(Self {
            c_in: input.c,
            h: input.h,
            w: input.w,
            k,
            stride,
            pad,
            h_out: conv_output_dim(input.h, k, stride, pad)?,
            w_out: conv_output_dim(input.w, k, stride, pad)?,
        })
    }

    fn is_plain_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.h_out * self.w_out
    }

    /// Range of output columns whose tap `kx` lands inside the input row.
    fn valid_range(&self, kx: usize, out_len: usize, in_len: usize) -> (usize, usize) {
        // need 0 <= o*s + kx - pad < in_len
        let s = self.stride;
        let lo = if kx >= self.pad {
            0
        } else {
            (self.pad - kx).div_ceil(s)
        };
        let hi = if in_len + self.pad > kx {
            ((in_len + self.pad - kx - 1) / s + 1).min(out_len)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    fn im2col<T: Scalar>(&self, sample: &[T], cols: &mut [T]) {
        let plane = self.out_plane();
        cols.iter_mut().for_each(|v| *v = T::zero());
        for c in 0..self.c_in {
            let src = &sample[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.k {
                let (oy_lo, oy_hi) = self.valid_range(ky, self.h_out, self.h);
                for kx in 0..self.k {
                    let (ox_lo, ox_hi) = self.valid_range(kx, self.w_out, self.w);
                    let row = (c * self.k + ky) * self.k + kx;
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    for oy in oy_lo..oy_hi {
                        let iy = oy * self.stride + ky - self.pad;
                        let src_row = &src[iy * self.w..(iy + 1) * self.w];
                        let dst_row = &mut dst[oy * self.w_out..(oy + 1) * self.w_out];
                        for ox in ox_lo..ox_hi {
                            dst_row[ox] = src_row[ox * self.stride + kx - self.pad];
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, cols: &[T], sample: &mut [T]) {
        let plane = self.out_plane();
        for c in 0..self.c_in {
            let dst = &mut sample[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.k {
                let (oy_lo, oy_hi) = self.valid_range(ky, self.h_out, self.h);
                for kx in 0..self.k {
                    let (ox_lo, ox_hi) = self.valid_range(kx, self.w_out, self.w);
                    let row = (c * self.k + ky) * self.k + kx;
                    let src = &cols[row * plane..(row + 1) * plane];
                    for oy in oy_lo..oy_hi {
                        let iy = oy * self.stride + ky - self.pad;
                        let src_row = &src[oy * self.w_out..(oy + 1) * self.w_out];
                        let dst_row = &mut dst[iy * self.w..(iy + 1) * self.w];
                        for ox in ox_lo..ox_hi {
                            dst_row[ox * self.stride + kx - self.pad] += src_row[ox];
                        }
                    }
                }
            }
        }
    }
}

fn square_kernel(weight: Shape, what: &str) -> Result<usize> {
    if weight.h != weight.w || weight.h == 0 {
        return Err(Error::shape(format!(
            "{what}: kernel must be square and non-empty, got {}x{}",
            weight.h, weight.w
        )));
    }
    Ok(weight.h)
}

/// Dense 2-D convolution. `weight` is `(C_out, C_in, K, K)`; no bias.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (x, w) = (input.shape(), weight.shape());
    let k = square_kernel(w, "conv2d")?;
    if w.c != x.c {
        return Err(Error::shape(format!(
            "conv2d: input has {} channels but kernel expects {}",
            x.c, w.c
        )));
    }
    let g = ConvGeometry::new(x, k, stride, padding)?;
    let c_out = w.n;
    let out_shape = Shape::new(x.n, c_out, g.h_out, g.w_out);
    let mut out = Tensor::zeros(out_shape);
    let plane = g.out_plane();
    let rows = g.col_rows();
    let mut cols = vec![T::zero(); if g.is_plain_pointwise() { 0 } else { rows * plane }];
    for n in 0..x.n {
        let sample = input.sample(n);
        let dst = &mut out.data_mut()[n * c_out * plane..(n + 1) * c_out * plane];
        let cols_ref: &[T] = if g.is_plain_pointwise() {
            sample
        } else {
            g.im2col(sample, &mut cols);
            &cols
        };
        T::gemm(c_out, rows, plane, weight.data(), false, cols_ref, false, dst, false);
    }
    Ok(out)
}

/// Gradients of [`conv2d`]: `(d_input, d_weight)`.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (x, w) = (input.shape(), weight.shape());
    let k = square_kernel(w, "conv2d")?;
    let g = ConvGeometry::new(x, k, stride, padding)?;
    let c_out = w.n;
    grad_out.expect_shape(Shape::new(x.n, c_out, g.h_out, g.w_out), "conv2d backward")?;
    let plane = g.out_plane();
    let rows = g.col_rows();
    let mut d_input = Tensor::zeros(x);
    let mut d_weight = Tensor::zeros(w);
    let mut cols = vec![T::zero(); rows * plane];
    let mut d_cols = vec![T::zero(); rows * plane];
    let sample_len = x.sample_len();
    for n in 0..x.n {
        let sample = input.sample(n);
        let dout = &grad_out.data()[n * c_out * plane..(n + 1) * c_out * plane];
        let cols_ref: &[T] = if g.is_plain_pointwise() {
            sample
        } else {
            g.im2col(sample, &mut cols);
            &cols
        };
        T::gemm(c_out, plane, rows, dout, false, cols_ref, true, d_weight.data_mut(), true);
        let dx = &mut d_input.data_mut()[n * sample_len..(n + 1) * sample_len];
        if g.is_plain_pointwise() {
            T::gemm(rows, c_out, plane, weight.data(), true, dout, false, dx, false);
        } else {
            T::gemm(rows, c_out, plane, weight.data(), true, dout, false, &mut d_cols, false);
            g.col2im(&d_cols, dx);
        }
    }
    Ok((d_input, d_weight))
}

/// Channel-wise convolution with one `K×K` kernel per channel.
/// `weight` is `(C, 1, K, K)`.
pub fn depthwise_conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (x, w) = (input.shape(), weight.shape());
    let k = square_kernel(w, "depthwise_conv2d")?;
    if w.n != x.c || w.c != 1 {
        return Err(Error::shape(format!(
            "depthwise_conv2d: {} kernels (multiplier {}) for {} input channels",
            w.n, w.c, x.c
        )));
    }
    let g = ConvGeometry::new(x, k, stride, padding)?;
    let mut out = Tensor::zeros(Shape::new(x.n, x.c, g.h_out, g.w_out));
    let (in_plane, out_plane) = (g.h * g.w, g.out_plane());
    for n in 0..x.n {
        for c in 0..x.c {
            let src = &input.data()[(n * x.c + c) * in_plane..(n * x.c + c + 1) * in_plane];
            let kern = &weight.data()[c * k * k..(c + 1) * k * k];
            let dst = &mut out.data_mut()[(n * x.c + c) * out_plane..(n * x.c + c + 1) * out_plane];
            for ky in 0..k {
                let (oy_lo, oy_hi) = g.valid_range(ky, g.h_out, g.h);
                for kx in 0..k {
                    let (ox_lo, ox_hi) = g.valid_range(kx, g.w_out, g.w);
                    let wv = kern[ky * k + kx];
                    for oy in oy_lo..oy_hi {
                        let iy = oy * stride + ky - padding;
                        let src_row = &src[iy * g.w..(iy + 1) * g.w];
                        let dst_row = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                        for ox in ox_lo..ox_hi {
                            dst_row[ox] += wv * src_row[ox * stride + kx - padding];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`depthwise_conv2d`]: `(d_input, d_weight)`.
pub fn depthwise_conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (x, w) = (input.shape(), weight.shape());
    let k = square_kernel(w, "depthwise_conv2d")?;
    let g = ConvGeometry::new(x, k, stride, padding)?;
    grad_out.expect_shape(Shape::new(x.n, x.c, g.h_out, g.w_out), "depthwise backward")?;
    let mut d_input = Tensor::zeros(x);
    let mut d_weight = Tensor::zeros(w);
    let (in_plane, out_plane) = (g.h * g.w, g.out_plane());
    for n in 0..x.n {
        for c in 0..x.c {
            let base_in = (n * x.c + c) * in_plane;
            let base_out = (n * x.c + c) * out_plane;
            let src = &input.data()[base_in..base_in + in_plane];
            let dout = &grad_out.data()[base_out..base_out + out_plane];
            let kern = &weight.data()[c * k * k..(c + 1) * k * k];
            for ky in 0..k {
                let (oy_lo, oy_hi) = g.valid_range(ky, g.h_out, g.h);
                for kx in 0..k {
                    let (ox_lo, ox_hi) = g.valid_range(kx, g.w_out, g.w);
                    let wv = kern[ky * k + kx];
                    let mut acc = T::zero();
                    let dx = &mut d_input.data_mut()[base_in..base_in + in_plane];
                    for oy in oy_lo..oy_hi {
                        let iy = oy * stride + ky - padding;
                        for ox in ox_lo..ox_hi {
                            let ix = ox * stride + kx - padding;
                            let go = dout[oy * g.w_out + ox];
                            acc += go * src[iy * g.w + ix];
                            dx[iy * g.w + ix] += wv * go;
                        }
                    }
                    d_weight.data_mut()[c * k * k + ky * k + kx] += acc;
                }
            }
        }
    }
    Ok((d_input, d_weight))
}

/// Per-channel statistics captured by a training-mode batch norm pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T: Scalar> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub inv_std: Vec<T>,
    pub normalized: Tensor<T>,
}

fn check_channel_param<T: Scalar>(p: &Tensor<T>, c: usize, what: &str) -> Result<()> {
    if p.len() != c {
        return Err(Error::shape(format!(
            "batch_norm: {what} has {} entries for {c} channels",
            p.len()
        )));
    }
    Ok(())
}

/// Batch normalization with batch statistics (biased variance).
pub fn batch_norm_train<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<(Tensor<T>, BatchStats<T>)> {
    let x = input.shape();
    check_channel_param(gamma, x.c, "gamma")?;
    check_channel_param(beta, x.c, "beta")?;
    let plane = x.plane();
    let count = T::from_usize(x.n * plane).unwrap();
    let eps = T::from_f64_lossy(BN_EPS);
    let mut mean = vec![T::zero(); x.c];
    let mut var = vec![T::zero(); x.c];
    for c in 0..x.c {
        let mut s = T::zero();
        for n in 0..x.n {
            let base = (n * x.c + c) * plane;
            s += input.data()[base..base + plane].iter().copied().sum::<T>();
        }
        let m = s / count;
        let mut v = T::zero();
        for n in 0..x.n {
            let base = (n * x.c + c) * plane;
            for &val in &input.data()[base..base + plane] {
                let d = val - m;
                v += d * d;
            }
        }
        mean[c] = m;
        var[c] = v / count;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut normalized = Tensor::zeros(x);
    let mut out = Tensor::zeros(x);
    for n in 0..x.n {
        for c in 0..x.c {
            let base = (n * x.c + c) * plane;
            let (g, b) = (gamma.data()[c], beta.data()[c]);
            for i in base..base + plane {
                let xh = (input.data()[i] - mean[c]) * inv_std[c];
                normalized.data_mut()[i] = xh;
                out.data_mut()[i] = g * xh + b;
            }
        }
    }
    Ok((
        out,
        BatchStats {
            mean,
            var,
            inv_std,
            normalized,
        },
    ))
}

/// Gradients of [`batch_norm_train`]: `(d_input, d_gamma, d_beta)`.
pub fn batch_norm_train_backward<T: Scalar>(
    stats: &BatchStats<T>,
    gamma: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let x = stats.normalized.shape();
    grad_out.expect_shape(x, "batch_norm backward")?;
    let plane = x.plane();
    let count = T::from_usize(x.n * plane).unwrap();
    let mut d_gamma = vec![T::zero(); x.c];
    let mut d_beta = vec![T::zero(); x.c];
    for n in 0..x.n {
        for c in 0..x.c {
            let base = (n * x.c + c) * plane;
            for i in base..base + plane {
                let g = grad_out.data()[i];
                d_beta[c] += g;
                d_gamma[c] += g * stats.normalized.data()[i];
            }
        }
    }
    let mut d_input = Tensor::zeros(x);
    for n in 0..x.n {
        for c in 0..x.c {
            let base = (n * x.c + c) * plane;
            let scale = gamma.data()[c] * stats.inv_std[c] / count;
            for i in base..base + plane {
                d_input.data_mut()[i] = scale
                    * (count * grad_out.data()[i]
                        - d_beta[c]
                        - stats.normalized.data()[i] * d_gamma[c]);
            }
        }
    }
    Ok((
        d_input,
        Tensor::channel_vector(d_gamma),
        Tensor::channel_vector(d_beta),
    ))
}

/// Batch normalization with fixed (moving) statistics.
pub fn batch_norm_infer<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &Tensor<T>,
    var: &Tensor<T>,
) -> Result<Tensor<T>> {
    let x = input.shape();
    for (p, what) in [(gamma, "gamma"), (beta, "beta"), (mean, "moving_mean"), (var, "moving_var")] {
        check_channel_param(p, x.c, what)?;
    }
    let plane = x.plane();
    let eps = T::from_f64_lossy(BN_EPS);
    let mut out = Tensor::zeros(x);
    for n in 0..x.n {
        for c in 0..x.c {
            let base = (n * x.c + c) * plane;
            let inv = T::one() / (var.data()[c] + eps).sqrt();
            let (g, b, m) = (gamma.data()[c], beta.data()[c], mean.data()[c]);
            for i in base..base + plane {
                out.data_mut()[i] = g * (input.data()[i] - m) * inv + b;
            }
        }
    }
    Ok(out)
}

/// Gradients of [`batch_norm_infer`]: `(d_input, d_gamma, d_beta)`.
pub fn batch_norm_infer_backward<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    mean: &Tensor<T>,
    var: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let x = input.shape();
    grad_out.expect_shape(x, "batch_norm backward")?;
    let plane = x.plane();
    let eps = T::from_f64_lossy(BN_EPS);
    let mut d_input = Tensor::zeros(x);
    let mut d_gamma = vec![T::zero(); x.c];
    let mut d_beta = vec![T::zero(); x.c];
    for n in 0..x.n {
        for c in 0..x.c {
            let base = (n * x.c + c) * plane;
            let inv = T::one() / (var.data()[c] + eps).sqrt();
            let (g, m) = (gamma.data()[c], mean.data()[c]);
            for i in base..base + plane {
                let go = grad_out.data()[i];
                d_input.data_mut()[i] = go * g * inv;
                d_gamma[c] += go * (input.data()[i] - m) * inv;
                d_beta[c] += go;
            }
        }
    }
    Ok((
        d_input,
        Tensor::channel_vector(d_gamma),
        Tensor::channel_vector(d_beta),
    ))
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    grad_out.expect_shape(input.shape(), "relu backward")?;
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(input.shape(), data)
}

/// Spatial mean per channel, producing `(N, C, 1, 1)`.
pub fn global_avg_pool<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let x = input.shape();
    let plane = x.plane();
    let denom = T::from_usize(plane.max(1)).unwrap();
    let data = input
        .data()
        .chunks(plane.max(1))
        .map(|p| p.iter().copied().sum::<T>() / denom)
        .collect();
    Tensor::from_vec(Shape::new(x.n, x.c, 1, 1), data).expect("one value per plane")
}

pub fn global_avg_pool_backward<T: Scalar>(input_shape: Shape, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    grad_out.expect_shape(Shape::new(input_shape.n, input_shape.c, 1, 1), "global_avg_pool backward")?;
    let plane = input_shape.plane();
    let denom = T::from_usize(plane.max(1)).unwrap();
    let mut data = Vec::with_capacity(input_shape.len());
    for &g in grad_out.data() {
        data.extend(std::iter::repeat_n(g / denom, plane));
    }
    Tensor::from_vec(input_shape, data)
}

/// Affine map over flattened samples. `weight` is `(C_out, C_in, 1, 1)`,
/// `bias` has `C_out` entries; output is `(N, C_out, 1, 1)`.
pub fn dense<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let x = input.shape();
    let (c_out, c_in) = (weight.shape().n, weight.shape().sample_len());
    if x.sample_len() != c_in {
        return Err(Error::shape(format!(
            "dense: samples have {} features but weight expects {c_in}",
            x.sample_len()
        )));
    }
    if bias.len() != c_out {
        return Err(Error::shape(format!("dense: bias has {} entries for {c_out} outputs", bias.len())));
    }
    let mut out = Tensor::zeros(Shape::new(x.n, c_out, 1, 1));
    for row in out.data_mut().chunks_mut(c_out) {
        row.copy_from_slice(bias.data());
    }
    T::gemm(x.n, c_in, c_out, input.data(), false, weight.data(), true, out.data_mut(), true);
    Ok(out)
}

/// Gradients of [`dense`]: `(d_input, d_weight, d_bias)`.
pub fn dense_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let x = input.shape();
    let (c_out, c_in) = (weight.shape().n, weight.shape().sample_len());
    grad_out.expect_shape(Shape::new(x.n, c_out, 1, 1), "dense backward")?;
    let mut d_input = Tensor::zeros(x);
    let mut d_weight = Tensor::zeros(weight.shape());
    T::gemm(x.n, c_out, c_in, grad_out.data(), false, weight.data(), false, d_input.data_mut(), false);
    T::gemm(c_out, x.n, c_in, grad_out.data(), true, input.data(), false, d_weight.data_mut(), false);
    let mut d_bias = vec![T::zero(); c_out];
    for row in grad_out.data().chunks(c_out) {
        for (d, &g) in d_bias.iter_mut().zip(row) {
            *d += g;
        }
    }
    Ok((d_input, d_weight, Tensor::channel_vector(d_bias)))
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    b.expect_shape(a.shape(), "add")?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::from_vec(a.shape(), data)
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)` and its
/// gradient with respect to the logits.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let x = logits.shape();
    let classes = x.sample_len();
    if labels.len() != x.n {
        return Err(Error::shape(format!("{} labels for a batch of {}", labels.len(), x.n)));
    }
    if x.n == 0 {
        return Err(Error::invalid("cross entropy over an empty batch"));
    }
    let inv_n = T::one() / T::from_usize(x.n).unwrap();
    let mut grad = Tensor::zeros(x);
    let mut loss = T::zero();
    for (n, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::invalid(format!("label {label} outside {classes} classes")));
        }
        let row = logits.sample(n);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[label];
        let g = &mut grad.data_mut()[n * classes..(n + 1) * classes];
        for (gi, &v) in g.iter_mut().zip(row) {
            *gi = (v - log_z).exp() * inv_n;
        }
        g[label] -= inv_n;
    }
    Ok((loss * inv_n, grad))
}

/// Mean squared difference over every element; gradient is taken on the
/// `student` side only.
pub fn mse_local_loss<T: Scalar>(student: &Tensor<T>, teacher: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    teacher.expect_shape(student.shape(), "mse_local_loss")?;
    if student.is_empty() {
        return Err(Error::invalid("mse over an empty tensor"));
    }
    let count = T::from_usize(student.len()).unwrap();
    let two = T::one() + T::one();
    let mut sum = T::zero();
    let grad: Vec<T> = student
        .data()
        .iter()
        .zip(teacher.data())
        .map(|(&a, &b)| {
            let d = a - b;
            sum += d * d;
            two * d / count
        })
        .collect();
    Ok((sum / count, Tensor::from_vec(student.shape(), grad)?))
}

/// Index of the largest logit per sample.
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let classes = logits.shape().sample_len();
    (0..logits.shape().n)
        .map(|n| {
            let row = &logits.data()[n * classes..(n + 1) * classes];
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
