//! Forward and backward kernels for the primitives used by the models.
//!
//! Sequence primitives accept either a single `[C, L]` sample or a batch
//! `[B, C, L]`; the output keeps the rank of the input. Every forward
//! kernel rejects non-finite results.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `(batch, channels, length, input_was_unbatched)`.
fn seq_dims(x: &Tensor, op: &str) -> Result<(usize, usize, usize, bool)> {
    match *x.shape() {
        [c, l] => Ok((1, c, l, true)),
        [b, c, l] => Ok((b, c, l, false)),
        ref s => Err(Error::Shape(format!(
            "{op}: expected [C, L] or [B, C, L], got {s:?}"
        ))),
    }
}

fn seq_shape(b: usize, c: usize, l: usize, unbatched: bool) -> Vec<usize> {
    if unbatched {
        vec![c, l]
    } else {
        vec![b, c, l]
    }
}

fn finite(t: Tensor, op: &str) -> Result<Tensor> {
    t.ensure_finite(op)?;
    Ok(t)
}

/// Output length of a 1-D convolution, or an error when the window does not fit.
pub fn conv1d_output_len(len: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 || kernel == 0 {
        return Err(Error::Shape("conv1d: kernel and stride must be positive".into()));
    }
    let padded = len + 2 * padding;
    if kernel > padded {
        return Err(Error::Shape(format!(
            "conv1d: kernel {kernel} exceeds padded length {padded} (L={len}, padding={padding})"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Output length of a pooling window with no padding.
pub fn pool_output_len(len: usize, kernel: usize, stride: usize) -> Result<usize> {
    if stride == 0 || kernel == 0 {
        return Err(Error::Shape("maxpool1d: kernel and stride must be positive".into()));
    }
    if kernel > len {
        return Err(Error::Shape(format!(
            "maxpool1d: kernel {kernel} exceeds length {len}"
        )));
    }
    Ok((len - kernel) / stride + 1)
}

/// Range of output positions `t` for which `t*stride + k - padding` lies in `[0, len)`.
#[inline]
fn valid_range(k: usize, stride: usize, padding: usize, len: usize, out_len: usize) -> (usize, usize) {
    let lo = if padding > k {
        (padding - k).div_ceil(stride)
    } else {
        0
    };
    // t*stride + k - padding <= len - 1
    let hi = if len + padding > k {
        ((len - 1 + padding - k) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

struct ConvDims {
    batch: usize,
    c_in: usize,
    c_out: usize,
    kernel: usize,
    len: usize,
    out_len: usize,
    unbatched: bool,
}

fn conv_dims(x: &Tensor, kernels: &Tensor, stride: usize, padding: usize) -> Result<ConvDims> {
    let (batch, c_in, len, unbatched) = seq_dims(x, "conv1d")?;
    let &[c_out, k_in, kernel] = kernels.shape() else {
        return Err(Error::Shape(format!(
            "conv1d: kernels must be [C_out, C_in, K], got {:?}",
            kernels.shape()
        )));
    };
    if k_in != c_in {
        return Err(Error::Shape(format!(
            "conv1d: input has {c_in} channels but kernels expect {k_in}"
        )));
    }
    let out_len = conv1d_output_len(len, kernel, stride, padding)?;
    Ok(ConvDims {
        batch,
        c_in,
        c_out,
        kernel,
        len,
        out_len,
        unbatched,
    })
}

/// 1-D cross-correlation with zero padding.
pub fn conv1d(
    x: &Tensor,
    kernels: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let d = conv_dims(x, kernels, stride, padding)?;
    if bias.shape() != [d.c_out] {
        return Err(Error::Shape(format!(
            "conv1d: bias must be [{}], got {:?}",
            d.c_out,
            bias.shape()
        )));
    }
    let xs = x.data();
    let ws = kernels.data();
    let mut out = vec![0.0; d.batch * d.c_out * d.out_len];
    for b in 0..d.batch {
        for co in 0..d.c_out {
            let o = &mut out[(b * d.c_out + co) * d.out_len..][..d.out_len];
            o.fill(bias.data()[co]);
            for ci in 0..d.c_in {
                let xrow = &xs[(b * d.c_in + ci) * d.len..][..d.len];
                let wrow = &ws[(co * d.c_in + ci) * d.kernel..][..d.kernel];
                for (k, &w) in wrow.iter().enumerate() {
                    let (lo, hi) = valid_range(k, stride, padding, d.len, d.out_len);
                    for (t, ov) in o.iter_mut().enumerate().take(hi).skip(lo) {
                        *ov += w * xrow[t * stride + k - padding];
                    }
                }
            }
        }
    }
    finite(
        Tensor::new(seq_shape(d.batch, d.c_out, d.out_len, d.unbatched), out)?,
        "conv1d",
    )
}

/// Gradients of [`conv1d`] with respect to input, kernels and bias.
pub fn conv1d_backward(
    x: &Tensor,
    kernels: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, Tensor, Tensor)> {
    let d = conv_dims(x, kernels, stride, padding)?;
    let expected = seq_shape(d.batch, d.c_out, d.out_len, d.unbatched);
    if grad_out.shape() != expected.as_slice() {
        return Err(Error::Shape(format!(
            "conv1d_backward: grad shape {:?}, expected {expected:?}",
            grad_out.shape()
        )));
    }
    let xs = x.data();
    let ws = kernels.data();
    let gs = grad_out.data();
    let mut gx = vec![0.0; xs.len()];
    let mut gw = vec![0.0; ws.len()];
    let mut gb = vec![0.0; d.c_out];
    for b in 0..d.batch {
        for co in 0..d.c_out {
            let g = &gs[(b * d.c_out + co) * d.out_len..][..d.out_len];
            gb[co] += g.iter().sum::<f64>();
            for ci in 0..d.c_in {
                let xoff = (b * d.c_in + ci) * d.len;
                let woff = (co * d.c_in + ci) * d.kernel;
                for k in 0..d.kernel {
                    let (lo, hi) = valid_range(k, stride, padding, d.len, d.out_len);
                    let w = ws[woff + k];
                    let mut acc = 0.0;
                    for (t, &gv) in g.iter().enumerate().take(hi).skip(lo) {
                        let xi = xoff + t * stride + k - padding;
                        acc += gv * xs[xi];
                        gx[xi] += gv * w;
                    }
                    gw[woff + k] += acc;
                }
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), gx)?,
        Tensor::new(kernels.shape().to_vec(), gw)?,
        Tensor::new(vec![d.c_out], gb)?,
    ))
}

/// Exponential linear unit, applied elementwise.
pub fn elu(x: &Tensor, alpha: f64) -> Result<Tensor> {
    finite(
        x.map(|v| if v > 0.0 { v } else { alpha * v.exp_m1() }),
        "elu",
    )
}

pub fn elu_backward(x: &Tensor, grad_out: &Tensor, alpha: f64) -> Result<Tensor> {
    if !x.same_shape(grad_out) {
        return Err(Error::Shape("elu_backward: shape mismatch".into()));
    }
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { g * alpha * v.exp() })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Windowed maximum. Also returns, for every output element, the flat
/// input index that produced it (first maximal index on ties).
pub fn maxpool1d_with_indices(x: &Tensor, kernel: usize, stride: usize) -> Result<(Tensor, Vec<usize>)> {
    let (batch, ch, len, unbatched) = seq_dims(x, "maxpool1d")?;
    let out_len = pool_output_len(len, kernel, stride)?;
    let xs = x.data();
    let mut out = Vec::with_capacity(batch * ch * out_len);
    let mut idx = Vec::with_capacity(batch * ch * out_len);
    for row in 0..batch * ch {
        let base = row * len;
        for t in 0..out_len {
            let start = base + t * stride;
            let mut best = start;
            for i in start + 1..start + kernel {
                if xs[i] > xs[best] {
                    best = i;
                }
            }
            out.push(xs[best]);
            idx.push(best);
        }
    }
    let out = finite(
        Tensor::new(seq_shape(batch, ch, out_len, unbatched), out)?,
        "maxpool1d",
    )?;
    Ok((out, idx))
}

pub fn maxpool1d(x: &Tensor, kernel: usize, stride: usize) -> Result<Tensor> {
    maxpool1d_with_indices(x, kernel, stride).map(|(t, _)| t)
}

/// Routes each output gradient to its argmax input position.
pub fn maxpool1d_backward(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    if argmax.len() != grad_out.len() {
        return Err(Error::Shape("maxpool1d_backward: index/grad length mismatch".into()));
    }
    let mut gx = vec![0.0; input_shape.iter().product()];
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        gx[i] += g;
    }
    Tensor::new(input_shape.to_vec(), gx)
}

/// Bin `i` of `out_len` over a length-`len` axis: `[floor(i*len/out), ceil((i+1)*len/out))`.
#[inline]
fn adaptive_bin(i: usize, len: usize, out_len: usize) -> (usize, usize) {
    let start = i * len / out_len;
    let end = ((i + 1) * len).div_ceil(out_len);
    (start, end)
}

pub fn adaptive_avg_pool1d(x: &Tensor, out_len: usize) -> Result<Tensor> {
    let (batch, ch, len, unbatched) = seq_dims(x, "adaptive_avg_pool1d")?;
    if out_len == 0 || out_len > len {
        return Err(Error::Shape(format!(
            "adaptive_avg_pool1d: out_len {out_len} must be in 1..={len}"
        )));
    }
    let xs = x.data();
    let mut out = Vec::with_capacity(batch * ch * out_len);
    for row in 0..batch * ch {
        let r = &xs[row * len..][..len];
        for i in 0..out_len {
            let (s, e) = adaptive_bin(i, len, out_len);
            out.push(r[s..e].iter().sum::<f64>() / (e - s) as f64);
        }
    }
    finite(
        Tensor::new(seq_shape(batch, ch, out_len, unbatched), out)?,
        "adaptive_avg_pool1d",
    )
}

pub fn adaptive_avg_pool1d_backward(input_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let len = *input_shape
        .last()
        .ok_or_else(|| Error::Shape("adaptive_avg_pool1d_backward: empty shape".into()))?;
    let out_len = *grad_out.shape().last().unwrap_or(&0);
    let rows = grad_out.len() / out_len.max(1);
    let mut gx = vec![0.0; input_shape.iter().product()];
    for row in 0..rows {
        for i in 0..out_len {
            let (s, e) = adaptive_bin(i, len, out_len);
            let g = grad_out.data()[row * out_len + i] / (e - s) as f64;
            for v in &mut gx[row * len + s..row * len + e] {
                *v += g;
            }
        }
    }
    Tensor::new(input_shape.to_vec(), gx)
}

/// Affine map `x @ weight^T + bias` for `x: [B, in]`, `weight: [out, in]`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (&[batch, n_in], &[n_out, w_in]) = (x.shape(), weight.shape()) else {
        return Err(Error::Shape(format!(
            "linear: expected x [B, in] and weight [out, in], got {:?} and {:?}",
            x.shape(),
            weight.shape()
        )));
    };
    if n_in != w_in || bias.shape() != [n_out] {
        return Err(Error::Shape(format!(
            "linear: x {:?}, weight {:?}, bias {:?} are incompatible",
            x.shape(),
            weight.shape(),
            bias.shape()
        )));
    }
    let mut out = Vec::with_capacity(batch * n_out);
    for b in 0..batch {
        let xr = x.row(b);
        for o in 0..n_out {
            let wr = &weight.data()[o * n_in..][..n_in];
            let dot: f64 = xr.iter().zip(wr).map(|(a, w)| a * w).sum();
            out.push(dot + bias.data()[o]);
        }
    }
    finite(Tensor::new(vec![batch, n_out], out)?, "linear")
}

pub fn linear_backward(x: &Tensor, weight: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (&[batch, n_in], &[n_out, _]) = (x.shape(), weight.shape()) else {
        return Err(Error::Shape("linear_backward: bad ranks".into()));
    };
    if grad_out.shape() != [batch, n_out] {
        return Err(Error::Shape(format!(
            "linear_backward: grad {:?}, expected [{batch}, {n_out}]",
            grad_out.shape()
        )));
    }
    let mut gx = vec![0.0; batch * n_in];
    let mut gw = vec![0.0; n_out * n_in];
    let mut gb = vec![0.0; n_out];
    for b in 0..batch {
        let xr = x.row(b);
        for o in 0..n_out {
            let g = grad_out.data()[b * n_out + o];
            gb[o] += g;
            let wr = &weight.data()[o * n_in..][..n_in];
            let gxr = &mut gx[b * n_in..][..n_in];
            let gwr = &mut gw[o * n_in..][..n_in];
            for i in 0..n_in {
                gxr[i] += g * wr[i];
                gwr[i] += g * xr[i];
            }
        }
    }
    Ok((
        Tensor::new(vec![batch, n_in], gx)?,
        Tensor::new(vec![n_out, n_in], gw)?,
        Tensor::new(vec![n_out], gb)?,
    ))
}

/// Row-wise softmax of `[B, C]` logits, max-shifted.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let &[batch, classes] = logits.shape() else {
        return Err(Error::Shape(format!(
            "softmax: expected [B, C], got {:?}",
            logits.shape()
        )));
    };
    let mut out = Vec::with_capacity(batch * classes);
    for b in 0..batch {
        let r = logits.row(b);
        let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = r.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        out.extend(exps.into_iter().map(|e| e / z));
    }
    finite(Tensor::new(vec![batch, classes], out)?, "softmax")
}

/// Per-sample cross-entropy and its gradient with respect to the logits.
///
/// No reduction is applied: `losses[i] = -log softmax(logits[i])[labels[i]]`
/// and row `i` of the gradient is `softmax(logits[i]) - onehot(labels[i])`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(Tensor, Tensor)> {
    let &[batch, classes] = logits.shape() else {
        return Err(Error::Shape(format!(
            "softmax_cross_entropy: expected [B, C], got {:?}",
            logits.shape()
        )));
    };
    if labels.len() != batch {
        return Err(Error::Validation(format!(
            "softmax_cross_entropy: {} labels for {batch} rows",
            labels.len()
        )));
    }
    if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= classes) {
        return Err(Error::Validation(format!(
            "label {y} at row {i} out of range for {classes} classes"
        )));
    }
    logits.ensure_finite("softmax_cross_entropy logits")?;
    let mut losses = Vec::with_capacity(batch);
    let mut grad = Vec::with_capacity(batch * classes);
    for (b, &y) in labels.iter().enumerate() {
        let r = logits.row(b);
        let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = r.iter().map(|v| (v - m).exp()).sum();
        let log_z = m + z.ln();
        losses.push(log_z - r[y]);
        for (c, &v) in r.iter().enumerate() {
            let p = (v - log_z).exp();
            grad.push(if c == y { p - 1.0 } else { p });
        }
    }
    Ok((
        finite(Tensor::new(vec![batch], losses)?, "cross-entropy")?,
        Tensor::new(vec![batch, classes], grad)?,
    ))
}
