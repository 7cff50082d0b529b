//! Forward and backward rules for the fixed layer set.
//!
//! Convolution is evaluated per sample as im2col followed by a small matrix
//! multiply; the backward pass reuses the same column matrix for the weight
//! gradient and scatters the column gradient back for the input gradient.
//! Reductions use fixed summation orders, so repeated calls are bitwise
//! identical.

use super::{BatchNormParams, Tensor};
use crate::error::{Error, Result};

/// y += a * x over equal-length slices.
#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Dot product with four accumulators; the split keeps the loop out of a
/// single serial add chain without changing results across calls.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut tail = 0.0;
    for j in chunks * 4..a.len() {
        tail += a[j] * b[j];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

struct ConvDims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    kh: usize,
    kw: usize,
    h_out: usize,
    w_out: usize,
}

fn conv_dims(x: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Result<ConvDims> {
    x.expect_ndim(4, "conv2d input")?;
    weight.expect_ndim(4, "conv2d weight")?;
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (k, wc, kh, kw) = (
        weight.shape()[0],
        weight.shape()[1],
        weight.shape()[2],
        weight.shape()[3],
    );
    if wc != c {
        return Err(Error::invalid(format!(
            "conv2d channel mismatch: input has {c}, weight expects {wc}"
        )));
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d stride must be >= 1"));
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(Error::invalid(format!(
            "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
            h + 2 * pad,
            w + 2 * pad
        )));
    }
    Ok(ConvDims {
        n,
        c,
        h,
        w,
        k,
        kh,
        kw,
        h_out: (h + 2 * pad - kh) / stride + 1,
        w_out: (w + 2 * pad - kw) / stride + 1,
    })
}

/// Unpacks one sample into a (c*kh*kw) x (h_out*w_out) column matrix.
/// Out-of-bounds taps read as zero.
#[allow(clippy::too_many_arguments)]
fn im2col(x_n: &[f64], d: &ConvDims, stride: usize, pad: usize, col: &mut [f64]) {
    let m = d.h_out * d.w_out;
    for c in 0..d.c {
        let plane = &x_n[c * d.h * d.w..(c + 1) * d.h * d.w];
        for a in 0..d.kh {
            for b in 0..d.kw {
                let row = &mut col[((c * d.kh + a) * d.kw + b) * m..][..m];
                for oy in 0..d.h_out {
                    let iy = (oy * stride + a) as isize - pad as isize;
                    let out_row = &mut row[oy * d.w_out..(oy + 1) * d.w_out];
                    if iy < 0 || iy >= d.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for (ox, out) in out_row.iter_mut().enumerate() {
                        let ix = (ox * stride + b) as isize - pad as isize;
                        *out = if ix >= 0 && ix < d.w as isize {
                            src[ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

/// 2-d convolution, zero padding, no bias.
///
/// Input `[n, c, h, w]`, weight `[k, c, kh, kw]`, output
/// `[n, k, (h + 2*pad - kh)/stride + 1, (w + 2*pad - kw)/stride + 1]`.
pub fn conv2d(x: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let d = conv_dims(x, weight, stride, pad)?;
    let dd = d.c * d.kh * d.kw;
    let m = d.h_out * d.w_out;
    let mut col = vec![0.0; dd * m];
    let mut out = Tensor::zeros(vec![d.n, d.k, d.h_out, d.w_out]);
    for n in 0..d.n {
        im2col(&x.data()[n * d.c * d.h * d.w..], &d, stride, pad, &mut col);
        let y_n = &mut out.data_mut()[n * d.k * m..(n + 1) * d.k * m];
        for k in 0..d.k {
            let w_row = &weight.data()[k * dd..(k + 1) * dd];
            let y_row = &mut y_n[k * m..(k + 1) * m];
            for (wd, col_row) in w_row.iter().zip(col.chunks_exact(m)) {
                axpy(y_row, *wd, col_row);
            }
        }
    }
    Ok(out)
}

/// Gradients of `conv2d` with respect to input and weight.
pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    stride: usize,
    pad: usize,
    dy: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let d = conv_dims(x, weight, stride, pad)?;
    if dy.shape() != [d.n, d.k, d.h_out, d.w_out] {
        return Err(Error::invalid(format!(
            "conv2d_backward: upstream gradient shape {:?} does not match output {:?}",
            dy.shape(),
            [d.n, d.k, d.h_out, d.w_out]
        )));
    }
    let dd = d.c * d.kh * d.kw;
    let m = d.h_out * d.w_out;
    let mut col = vec![0.0; dd * m];
    let mut dcol = vec![0.0; dd * m];
    let mut dx = Tensor::zeros(vec![d.n, d.c, d.h, d.w]);
    let mut dw = Tensor::zeros(vec![d.k, d.c, d.kh, d.kw]);
    for n in 0..d.n {
        im2col(&x.data()[n * d.c * d.h * d.w..], &d, stride, pad, &mut col);
        let dy_n = &dy.data()[n * d.k * m..(n + 1) * d.k * m];

        // dW[k, d] += <dy_k, col_d>
        for k in 0..d.k {
            let dy_row = &dy_n[k * m..(k + 1) * m];
            let dw_row = &mut dw.data_mut()[k * dd..(k + 1) * dd];
            for (dwd, col_row) in dw_row.iter_mut().zip(col.chunks_exact(m)) {
                *dwd += dot(dy_row, col_row);
            }
        }

        // dcol = W^T dy, then scatter back to dx.
        dcol.fill(0.0);
        for k in 0..d.k {
            let dy_row = &dy_n[k * m..(k + 1) * m];
            let w_row = &weight.data()[k * dd..(k + 1) * dd];
            for (wd, dcol_row) in w_row.iter().zip(dcol.chunks_exact_mut(m)) {
                axpy(dcol_row, *wd, dy_row);
            }
        }
        let dx_n = &mut dx.data_mut()[n * d.c * d.h * d.w..(n + 1) * d.c * d.h * d.w];
        for c in 0..d.c {
            let plane = &mut dx_n[c * d.h * d.w..(c + 1) * d.h * d.w];
            for a in 0..d.kh {
                for b in 0..d.kw {
                    let row = &dcol[((c * d.kh + a) * d.kw + b) * m..][..m];
                    for oy in 0..d.h_out {
                        let iy = (oy * stride + a) as isize - pad as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        for ox in 0..d.w_out {
                            let ix = (ox * stride + b) as isize - pad as isize;
                            if ix >= 0 && ix < d.w as isize {
                                plane[iy as usize * d.w + ix as usize] += row[oy * d.w_out + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((dx, dw))
}

/// Values saved by a train-mode batch-norm forward for its backward pass.
#[derive(Debug)]
pub struct BnCache {
    x_hat: Tensor,
    inv_std: Vec<f64>,
}

fn bn_check(x: &Tensor, params: &BatchNormParams) -> Result<()> {
    x.expect_ndim(4, "batch_norm input")?;
    params.validate()?;
    if x.shape()[1] != params.channels() {
        return Err(Error::invalid(format!(
            "batch_norm: input has {} channels, parameters have {}",
            x.shape()[1],
            params.channels()
        )));
    }
    Ok(())
}

/// Train-mode batch norm: normalizes by the minibatch mean and biased
/// variance per channel, applies the affine, and advances the running
/// statistics in place.
pub fn batch_norm_train(x: &Tensor, params: &mut BatchNormParams) -> Result<(Tensor, BnCache)> {
    bn_check(x, params)?;
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let m = n * h * w;
    if m <= 1 {
        return Err(Error::DegenerateBatch(format!(
            "batch norm saw {m} value(s) per channel; variance is undefined"
        )));
    }
    let plane = h * w;
    let mut out = Tensor::zeros(x.shape().to_vec());
    let mut x_hat = Tensor::zeros(x.shape().to_vec());
    let mut inv_std = vec![0.0; c];
    for ch in 0..c {
        let mut sum = 0.0;
        for nn in 0..n {
            let base = (nn * c + ch) * plane;
            sum += x.data()[base..base + plane].iter().sum::<f64>();
        }
        let mean = sum / m as f64;
        let mut sq = 0.0;
        for nn in 0..n {
            let base = (nn * c + ch) * plane;
            for &v in &x.data()[base..base + plane] {
                let d = v - mean;
                sq += d * d;
            }
        }
        let var = sq / m as f64;
        let istd = 1.0 / (var + params.eps).sqrt();
        inv_std[ch] = istd;
        let (g, b) = (params.gamma.data()[ch], params.beta.data()[ch]);
        for nn in 0..n {
            let base = (nn * c + ch) * plane;
            for i in base..base + plane {
                let xh = (x.data()[i] - mean) * istd;
                x_hat.data_mut()[i] = xh;
                out.data_mut()[i] = g * xh + b;
            }
        }
        let rho = params.momentum;
        params.running_mean.data_mut()[ch] = rho * params.running_mean.data()[ch] + (1.0 - rho) * mean;
        params.running_var.data_mut()[ch] = rho * params.running_var.data()[ch] + (1.0 - rho) * var;
    }
    Ok((out, BnCache { x_hat, inv_std }))
}

/// Eval-mode batch norm: normalizes by the stored running statistics.
pub fn batch_norm_eval(x: &Tensor, params: &BatchNormParams) -> Result<Tensor> {
    bn_check(x, params)?;
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let plane = h * w;
    let mut out = Tensor::zeros(x.shape().to_vec());
    for ch in 0..c {
        let istd = 1.0 / (params.running_var.data()[ch] + params.eps).sqrt();
        let mean = params.running_mean.data()[ch];
        let (g, b) = (params.gamma.data()[ch], params.beta.data()[ch]);
        for nn in 0..n {
            let base = (nn * c + ch) * plane;
            for i in base..base + plane {
                out.data_mut()[i] = g * (x.data()[i] - mean) * istd + b;
            }
        }
    }
    Ok(out)
}

/// Backward for train-mode batch norm. Returns `(dx, dgamma, dbeta)`.
pub fn batch_norm_backward(
    dy: &Tensor,
    cache: &BnCache,
    gamma: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    if dy.shape() != cache.x_hat.shape() {
        return Err(Error::invalid(
            "batch_norm_backward: gradient shape does not match cached activation",
        ));
    }
    let (n, c, h, w) = (
        dy.shape()[0],
        dy.shape()[1],
        dy.shape()[2],
        dy.shape()[3],
    );
    let plane = h * w;
    let m = (n * plane) as f64;
    let mut dx = Tensor::zeros(dy.shape().to_vec());
    let mut dgamma = Tensor::zeros(vec![c]);
    let mut dbeta = Tensor::zeros(vec![c]);
    for ch in 0..c {
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for nn in 0..n {
            let base = (nn * c + ch) * plane;
            for i in base..base + plane {
                sum_dy += dy.data()[i];
                sum_dy_xhat += dy.data()[i] * cache.x_hat.data()[i];
            }
        }
        dbeta.data_mut()[ch] = sum_dy;
        dgamma.data_mut()[ch] = sum_dy_xhat;
        let scale = gamma.data()[ch] * cache.inv_std[ch] / m;
        for nn in 0..n {
            let base = (nn * c + ch) * plane;
            for i in base..base + plane {
                dx.data_mut()[i] = scale
                    * (m * dy.data()[i] - sum_dy - cache.x_hat.data()[i] * sum_dy_xhat);
            }
        }
    }
    Ok((dx, dgamma, dbeta))
}

pub fn relu(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for v in out.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

/// Backward for relu given the forward *input*; the gradient at exactly zero
/// is taken as zero.
pub fn relu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    assert_eq!(x.shape(), dy.shape(), "relu_backward shape mismatch");
    let mut dx = dy.clone();
    for (d, &v) in dx.data_mut().iter_mut().zip(x.data()) {
        if v <= 0.0 {
            *d = 0.0;
        }
    }
    dx
}

/// Global average pooling: `[n, k, h, w]` -> `[n, k]`.
pub fn gap(x: &Tensor) -> Result<Tensor> {
    x.expect_ndim(4, "gap input")?;
    let (n, k, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let plane = h * w;
    if plane == 0 {
        return Err(Error::invalid("gap over an empty spatial extent"));
    }
    let mut out = Tensor::zeros(vec![n, k]);
    for nn in 0..n {
        for kk in 0..k {
            let base = (nn * k + kk) * plane;
            out.data_mut()[nn * k + kk] =
                x.data()[base..base + plane].iter().sum::<f64>() / plane as f64;
        }
    }
    Ok(out)
}

pub fn gap_backward(x_shape: &[usize], dy: &Tensor) -> Result<Tensor> {
    if x_shape.len() != 4 || dy.shape() != [x_shape[0], x_shape[1]] {
        return Err(Error::invalid("gap_backward shape mismatch"));
    }
    let plane = x_shape[2] * x_shape[3];
    let mut dx = Tensor::zeros(x_shape.to_vec());
    for (i, chunk) in dx.data_mut().chunks_exact_mut(plane).enumerate() {
        chunk.fill(dy.data()[i] / plane as f64);
    }
    Ok(dx)
}

/// Fully connected layer: `[n, k] x [k, c] + [c]`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    x.expect_ndim(2, "linear input")?;
    weight.expect_ndim(2, "linear weight")?;
    let (n, k) = (x.shape()[0], x.shape()[1]);
    let (wk, c) = (weight.shape()[0], weight.shape()[1]);
    if wk != k || bias.len() != c {
        return Err(Error::invalid(format!(
            "linear shape mismatch: input [{n}, {k}], weight [{wk}, {c}], bias [{}]",
            bias.len()
        )));
    }
    let mut out = Tensor::zeros(vec![n, c]);
    for nn in 0..n {
        let x_row = &x.data()[nn * k..(nn + 1) * k];
        let y_row = &mut out.data_mut()[nn * c..(nn + 1) * c];
        y_row.copy_from_slice(bias.data());
        for (xv, w_row) in x_row.iter().zip(weight.data().chunks_exact(c)) {
            axpy(y_row, *xv, w_row);
        }
    }
    Ok(out)
}

/// Gradients of `linear`. Returns `(dx, dweight, dbias)`.
pub fn linear_backward(x: &Tensor, weight: &Tensor, dy: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, k) = (x.shape()[0], x.shape()[1]);
    let c = weight.shape()[1];
    if dy.shape() != [n, c] {
        return Err(Error::invalid("linear_backward gradient shape mismatch"));
    }
    let mut dx = Tensor::zeros(vec![n, k]);
    let mut dw = Tensor::zeros(vec![k, c]);
    let mut db = Tensor::zeros(vec![c]);
    for nn in 0..n {
        let dy_row = &dy.data()[nn * c..(nn + 1) * c];
        let x_row = &x.data()[nn * k..(nn + 1) * k];
        axpy(db.data_mut(), 1.0, dy_row);
        for kk in 0..k {
            axpy(&mut dw.data_mut()[kk * c..(kk + 1) * c], x_row[kk], dy_row);
            dx.data_mut()[nn * k + kk] = dot(&weight.data()[kk * c..(kk + 1) * c], dy_row);
        }
    }
    Ok((dx, dw, db))
}

/// Mean cross-entropy between softmax(logits) and integer labels, with the
/// row max subtracted before exponentiation so finite logits always produce
/// a finite loss. Returns the loss and the softmax probabilities.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    logits.expect_ndim(2, "softmax_cross_entropy logits")?;
    let (n, c) = (logits.shape()[0], logits.shape()[1]);
    if n == 0 {
        return Err(Error::invalid("softmax_cross_entropy over an empty batch"));
    }
    if labels.len() != n {
        return Err(Error::invalid(format!(
            "softmax_cross_entropy: {n} rows but {} labels",
            labels.len()
        )));
    }
    let mut probs = Tensor::zeros(vec![n, c]);
    let mut loss = 0.0;
    for nn in 0..n {
        let label = labels[nn];
        if label >= c {
            return Err(Error::invalid(format!(
                "label {label} out of range for {c} classes"
            )));
        }
        let row = &logits.data()[nn * c..(nn + 1) * c];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let p_row = &mut probs.data_mut()[nn * c..(nn + 1) * c];
        let mut sum = 0.0;
        for (p, &z) in p_row.iter_mut().zip(row) {
            *p = (z - max).exp();
            sum += *p;
        }
        for p in p_row.iter_mut() {
            *p /= sum;
        }
        loss += sum.ln() - (row[label] - max);
    }
    Ok((loss / n as f64, probs))
}

/// d(loss)/d(logits) = (softmax - onehot) / n.
pub fn softmax_cross_entropy_backward(probs: &Tensor, labels: &[usize]) -> Tensor {
    let (n, c) = (probs.shape()[0], probs.shape()[1]);
    assert_eq!(labels.len(), n, "label count mismatch");
    let mut d = probs.clone();
    let inv_n = 1.0 / n as f64;
    for nn in 0..n {
        d.data_mut()[nn * c + labels[nn]] -= 1.0;
        for v in &mut d.data_mut()[nn * c..(nn + 1) * c] {
            *v *= inv_n;
        }
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    // Expected values below were worked out by hand on paper-size examples
    // before the operations were written.

    #[test]
    fn conv2d_all_ones_kernel_sums_neighborhoods() {
        let x = t(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let w = t(&[1, 1, 3, 3], &[1.0; 9]);
        let y = conv2d(&x, &w, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        let expect = [12., 21., 16., 27., 45., 33., 24., 39., 28.];
        assert_eq!(y.data(), &expect);
    }

    #[test]
    fn conv2d_output_dims_follow_floor_formula() {
        let x = Tensor::zeros(vec![2, 3, 4, 5]);
        let w = Tensor::zeros(vec![7, 3, 3, 3]);
        // (4 + 2 - 3)/2 + 1 = 2, (5 + 2 - 3)/2 + 1 = 3
        let y = conv2d(&x, &w, 2, 1).unwrap();
        assert_eq!(y.shape(), &[2, 7, 2, 3]);
    }

    #[test]
    fn conv2d_rejects_channel_mismatch_and_oversize_kernel() {
        let x = Tensor::zeros(vec![1, 2, 4, 4]);
        assert!(conv2d(&x, &Tensor::zeros(vec![1, 3, 3, 3]), 1, 1).is_err());
        assert!(conv2d(&x, &Tensor::zeros(vec![1, 2, 7, 7]), 1, 1).is_err());
        assert!(conv2d(&x, &Tensor::zeros(vec![1, 2, 3, 3]), 0, 1).is_err());
    }

    #[test]
    fn conv2d_is_linear_in_its_input() {
        let stream = RngStream::new(5);
        let x1 = Tensor::randn(vec![2, 3, 6, 6], 1.0, &mut stream.derive(&[1]));
        let x2 = Tensor::randn(vec![2, 3, 6, 6], 1.0, &mut stream.derive(&[2]));
        let w = Tensor::randn(vec![4, 3, 3, 3], 0.5, &mut stream.derive(&[3]));
        let mut combo = Tensor::zeros(vec![2, 3, 6, 6]);
        for i in 0..combo.len() {
            combo.data_mut()[i] = 2.0 * x1.data()[i] - 0.5 * x2.data()[i];
        }
        let y = conv2d(&combo, &w, 1, 1).unwrap();
        let y1 = conv2d(&x1, &w, 1, 1).unwrap();
        let y2 = conv2d(&x2, &w, 1, 1).unwrap();
        for i in 0..y.len() {
            let lin = 2.0 * y1.data()[i] - 0.5 * y2.data()[i];
            assert!((y.data()[i] - lin).abs() <= 1e-9 * (1.0 + lin.abs()));
        }
    }

    #[test]
    fn batch_norm_train_normalizes_channel() {
        // Channel values {1, 3}: mean 2, biased variance 1.
        let x = t(&[2, 1, 1, 1], &[1.0, 3.0]);
        let mut p = BatchNormParams::new(1);
        p.gamma.data_mut()[0] = 2.0;
        p.beta.data_mut()[0] = 1.0;
        let (y, _) = batch_norm_train(&x, &mut p).unwrap();
        assert!((y.data()[0] - -1.0).abs() < 1e-4, "{}", y.data()[0]);
        assert!((y.data()[1] - 3.0).abs() < 1e-4, "{}", y.data()[1]);
        // Fresh running stats moved one EMA step toward (2, 1).
        assert!((p.running_mean.data()[0] - 0.2).abs() < 1e-12);
        assert!((p.running_var.data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_single_value_batch_is_degenerate() {
        let x = Tensor::zeros(vec![1, 2, 1, 1]);
        let mut p = BatchNormParams::new(2);
        let err = batch_norm_train(&x, &mut p).unwrap_err();
        assert!(matches!(err, Error::DegenerateBatch(_)), "{err}");
    }

    #[test]
    fn batch_norm_eval_uses_running_stats_and_is_near_identity_when_fresh() {
        let stream = RngStream::new(9);
        let x = Tensor::randn(vec![2, 3, 4, 4], 1.0, &mut stream.derive(&[1]));
        let p = BatchNormParams::new(3);
        let y = batch_norm_eval(&x, &p).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            // (x - 0) / sqrt(1 + 1e-5): identity up to the eps factor.
            assert!((a - b).abs() <= 1e-5 * (1.0 + a.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn relu_clamps_negatives_only() {
        let y = relu(&t(&[3], &[-1.0, 0.0, 2.0]));
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn gap_means_each_plane() {
        let x = t(&[1, 2, 2, 2], &[1., 2., 3., 4., 10., 20., 30., 40.]);
        let y = gap(&x).unwrap();
        assert_eq!(y.shape(), &[1, 2]);
        assert_eq!(y.data(), &[2.5, 25.0]);
    }

    #[test]
    fn gap_of_relu_is_gap_for_nonnegative_input() {
        let stream = RngStream::new(10);
        let mut x = Tensor::randn(vec![2, 3, 4, 4], 1.0, &mut stream.derive(&[1]));
        for v in x.data_mut() {
            *v = v.abs();
        }
        assert_eq!(gap(&relu(&x)).unwrap(), gap(&x).unwrap());
    }

    #[test]
    fn linear_identity_weight_passes_input_through() {
        let x = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let mut w = Tensor::zeros(vec![3, 3]);
        for i in 0..3 {
            w.data_mut()[i * 3 + i] = 1.0;
        }
        let y = linear(&x, &w, &Tensor::zeros(vec![3])).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn softmax_cross_entropy_closed_form_two_logits() {
        // One row [1, 2], label 0: loss = -ln(e / (e + e^2)) = ln(1 + e).
        let (loss, probs) = softmax_cross_entropy(&t(&[1, 2], &[1.0, 2.0]), &[0]).unwrap();
        let expect = (1.0 + std::f64::consts::E).ln();
        assert!((loss - expect).abs() < 1e-12, "loss {loss} vs {expect}");
        let p0 = 1.0 / (1.0 + std::f64::consts::E);
        assert!((probs.data()[0] - p0).abs() < 1e-12);
        let d = softmax_cross_entropy_backward(&probs, &[0]);
        assert!((d.data()[0] - (p0 - 1.0)).abs() < 1e-12);
        assert!((d.data()[1] - (1.0 - p0)).abs() < 1e-12);
    }

    #[test]
    fn softmax_cross_entropy_is_finite_for_extreme_logits() {
        let (loss, probs) =
            softmax_cross_entropy(&t(&[1, 3], &[1e8, -1e8, 3e7]), &[1]).unwrap();
        assert!(loss.is_finite());
        assert!(probs.all_finite());
    }

    #[test]
    fn softmax_cross_entropy_rejects_bad_labels() {
        assert!(softmax_cross_entropy(&t(&[1, 2], &[0.0, 0.0]), &[2]).is_err());
        assert!(softmax_cross_entropy(&t(&[1, 2], &[0.0, 0.0]), &[0, 1]).is_err());
    }

    // Finite-difference checks for each backward rule in isolation. The
    // network-level sweep lives in the selftest battery; these pin down the
    // per-op rules with a scalar probe loss sum(y * z) for fixed random z.

    fn weighted_sum(y: &Tensor, z: &Tensor) -> f64 {
        dot(y.data(), z.data())
    }

    fn central_diff(mut f: impl FnMut(f64) -> f64, v0: f64, h: f64) -> f64 {
        (f(v0 + h) - f(v0 - h)) / (2.0 * h)
    }

    fn assert_close(analytic: f64, numeric: f64, what: &str) {
        let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-4);
        assert!(rel <= 1e-3, "{what}: analytic {analytic} vs numeric {numeric} (rel {rel})");
    }

    #[test]
    fn conv2d_backward_matches_finite_differences() {
        let stream = RngStream::new(21);
        let x = Tensor::randn(vec![2, 2, 5, 5], 1.0, &mut stream.derive(&[1]));
        let w = Tensor::randn(vec![3, 2, 3, 3], 0.5, &mut stream.derive(&[2]));
        let z = Tensor::randn(vec![2, 3, 3, 3], 1.0, &mut stream.derive(&[3]));
        let (dx, dw) = conv2d_backward(&x, &w, 2, 1, &z).unwrap();
        for i in [0usize, 7, 31, 49] {
            let mut xp = x.clone();
            let num = central_diff(
                |v| {
                    xp.data_mut()[i] = v;
                    weighted_sum(&conv2d(&xp, &w, 2, 1).unwrap(), &z)
                },
                x.data()[i],
                1e-3,
            );
            assert_close(dx.data()[i], num, &format!("conv dx[{i}]"));
        }
        for i in [0usize, 17, 53] {
            let mut wp = w.clone();
            let num = central_diff(
                |v| {
                    wp.data_mut()[i] = v;
                    weighted_sum(&conv2d(&x, &wp, 2, 1).unwrap(), &z)
                },
                w.data()[i],
                1e-3,
            );
            assert_close(dw.data()[i], num, &format!("conv dw[{i}]"));
        }
    }

    #[test]
    fn batch_norm_backward_matches_finite_differences() {
        let stream = RngStream::new(22);
        let x = Tensor::randn(vec![3, 2, 4, 4], 1.0, &mut stream.derive(&[1]));
        let z = Tensor::randn(vec![3, 2, 4, 4], 1.0, &mut stream.derive(&[2]));
        let mut p = BatchNormParams::new(2);
        p.gamma.data_mut().copy_from_slice(&[1.3, 0.7]);
        p.beta.data_mut().copy_from_slice(&[0.1, -0.2]);
        let (_, cache) = batch_norm_train(&x, &mut p.clone()).unwrap();
        let (dx, dgamma, dbeta) = batch_norm_backward(&z, &cache, &p.gamma).unwrap();
        let run = |xv: &Tensor, pv: &BatchNormParams| {
            let (y, _) = batch_norm_train(xv, &mut pv.clone()).unwrap();
            weighted_sum(&y, &z)
        };
        for i in [0usize, 13, 40, 95] {
            let mut xp = x.clone();
            let num = central_diff(
                |v| {
                    xp.data_mut()[i] = v;
                    run(&xp, &p)
                },
                x.data()[i],
                1e-3,
            );
            assert_close(dx.data()[i], num, &format!("bn dx[{i}]"));
        }
        for ch in 0..2 {
            let mut pp = p.clone();
            let num_g = central_diff(
                |v| {
                    pp.gamma.data_mut()[ch] = v;
                    run(&x, &pp)
                },
                p.gamma.data()[ch],
                1e-3,
            );
            assert_close(dgamma.data()[ch], num_g, &format!("bn dgamma[{ch}]"));
            let mut pb = p.clone();
            let num_b = central_diff(
                |v| {
                    pb.beta.data_mut()[ch] = v;
                    run(&x, &pb)
                },
                p.beta.data()[ch],
                1e-3,
            );
            assert_close(dbeta.data()[ch], num_b, &format!("bn dbeta[{ch}]"));
        }
    }

    #[test]
    fn linear_and_gap_backward_match_finite_differences() {
        let stream = RngStream::new(23);
        let x4 = Tensor::randn(vec![2, 3, 4, 4], 1.0, &mut stream.derive(&[1]));
        let pooled = gap(&x4).unwrap();
        let w = Tensor::randn(vec![3, 5], 0.5, &mut stream.derive(&[2]));
        let b = Tensor::randn(vec![5], 0.5, &mut stream.derive(&[3]));
        let z = Tensor::randn(vec![2, 5], 1.0, &mut stream.derive(&[4]));

        let (dpooled, dw, db) = linear_backward(&pooled, &w, &z).unwrap();
        let dx4 = gap_backward(x4.shape(), &dpooled).unwrap();
        let run = |x4v: &Tensor, wv: &Tensor, bv: &Tensor| {
            weighted_sum(&linear(&gap(x4v).unwrap(), wv, bv).unwrap(), &z)
        };
        for i in [0usize, 20, 47, 90] {
            let mut xp = x4.clone();
            let num = central_diff(
                |v| {
                    xp.data_mut()[i] = v;
                    run(&xp, &w, &b)
                },
                x4.data()[i],
                1e-3,
            );
            assert_close(dx4.data()[i], num, &format!("gap+linear dx[{i}]"));
        }
        for i in [0usize, 7, 14] {
            let mut wp = w.clone();
            let num = central_diff(
                |v| {
                    wp.data_mut()[i] = v;
                    run(&x4, &wp, &b)
                },
                w.data()[i],
                1e-3,
            );
            assert_close(dw.data()[i], num, &format!("linear dw[{i}]"));
        }
        for i in 0..5 {
            let mut bp = b.clone();
            let num = central_diff(
                |v| {
                    bp.data_mut()[i] = v;
                    run(&x4, &w, &bp)
                },
                b.data()[i],
                1e-3,
            );
            assert_close(db.data()[i], num, &format!("linear db[{i}]"));
        }
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        let stream = RngStream::new(24);
        let logits = Tensor::randn(vec![3, 4], 1.0, &mut stream.derive(&[1]));
        let labels = [2usize, 0, 3];
        let (_, probs) = softmax_cross_entropy(&logits, &labels).unwrap();
        let d = softmax_cross_entropy_backward(&probs, &labels);
        for i in 0..logits.len() {
            let mut lp = logits.clone();
            let num = central_diff(
                |v| {
                    lp.data_mut()[i] = v;
                    softmax_cross_entropy(&lp, &labels).unwrap().0
                },
                logits.data()[i],
                1e-3,
            );
            assert_close(d.data()[i], num, &format!("softmax dlogits[{i}]"));
        }
    }

    #[test]
    fn relu_backward_gates_by_input_sign() {
        let x = t(&[4], &[-2.0, -0.0, 0.5, 3.0]);
        let dy = t(&[4], &[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(relu_backward(&x, &dy).data(), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn forward_ops_are_bitwise_repeatable() {
        let stream = RngStream::new(31);
        let x = Tensor::randn(vec![2, 3, 8, 8], 1.0, &mut stream.derive(&[1]));
        let w = Tensor::randn(vec![4, 3, 3, 3], 0.5, &mut stream.derive(&[2]));
        let a = conv2d(&x, &w, 1, 1).unwrap();
        let b = conv2d(&x, &w, 1, 1).unwrap();
        assert_eq!(a, b);
    }
}
