//! Forward kernels (and their backward counterparts) for every primitive the
//! network uses. All kernels are pure, single-threaded, and accumulate in a
//! fixed order, so results are bit-stable across runs.

use crate::error::{Error, Result};

use super::{ensure_finite, Tensor};

/// Probabilities are clamped into [BCE_CLAMP, 1 - BCE_CLAMP] before logs.
pub const BCE_CLAMP: f64 = 1e-7;

/// Sigmoid outputs are clamped into the open interval (0, 1); without this,
/// f64 rounds sigmoid(x) to exactly 1.0 for x >= ~37.
const SIGMOID_CLAMP: f64 = 1e-15;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Per-channel running mean/variance used by batch norm in eval mode.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Tensor,
    pub var: Tensor,
}

impl RunningStats {
    /// Identity statistics (mean 0, variance 1) for `channels` channels.
    pub fn identity(channels: usize) -> Result<Self> {
        Ok(RunningStats {
            mean: Tensor::zeros(&[channels])?,
            var: Tensor::ones(&[channels])?,
        })
    }
}

fn require(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::InvalidInput(msg()))
    }
}

fn nchw(t: &Tensor, what: &str) -> Result<(usize, usize, usize, usize)> {
    require(t.rank() == 4, || {
        format!("{what} must be rank 4 (N,C,H,W), got shape {:?}", t.shape())
    })?;
    Ok((t.dim(0), t.dim(1), t.dim(2), t.dim(3)))
}

/// Output spatial extent of a strided window op: floor((in + 2*pad - k)/stride) + 1.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if kernel > padded || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Valid output range [lo, hi) along one axis for a given kernel offset, such
/// that `o*stride + k - pad` stays inside [0, input).
#[inline]
fn valid_range(out: usize, input: usize, stride: usize, pad: usize, k: usize) -> (usize, usize) {
    let lo = if k >= pad {
        0
    } else {
        (pad - k).div_ceil(stride)
    };
    let hi_in = input + pad;
    if hi_in <= k {
        return (0, 0);
    }
    let hi = ((hi_in - 1 - k) / stride + 1).min(out);
    (lo.min(hi), hi)
}

/// 2-D cross-correlation with bias: input [N,Cin,H,W] * kernel [Cout,Cin,Kh,Kw] + bias [Cout].
pub fn conv2d(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let (n, cin, h, w) = nchw(input, "conv2d input")?;
    let (cout, kcin, kh, kw) = nchw(kernel, "conv2d kernel")?;
    require(stride >= 1, || "conv2d stride must be >= 1".into())?;
    require(kcin == cin, || {
        format!("conv2d channel mismatch: input has {cin}, kernel expects {kcin}")
    })?;
    require(bias.rank() == 1 && bias.dim(0) == cout, || {
        format!(
            "conv2d bias must have shape [{cout}], got {:?}",
            bias.shape()
        )
    })?;
    let ho = conv_out_extent(h, kh, stride, pad);
    let wo = conv_out_extent(w, kw, stride, pad);
    let (ho, wo) = match (ho, wo) {
        (Some(ho), Some(wo)) if ho > 0 && wo > 0 => (ho, wo),
        _ => {
            return Err(Error::InvalidInput(format!(
                "conv2d produces empty output: input {h}x{w}, kernel {kh}x{kw}, stride {stride}, pad {pad}"
            )))
        }
    };

    let x = input.data();
    let k = kernel.data();
    let b = bias.data();
    let mut out = vec![0.0; n * cout * ho * wo];

    for ni in 0..n {
        for co in 0..cout {
            let out_slab = &mut out[(ni * cout + co) * ho * wo..][..ho * wo];
            out_slab.fill(b[co]);
            for ci in 0..cin {
                let x_slab = &x[(ni * cin + ci) * h * w..][..h * w];
                for khi in 0..kh {
                    let (oh_lo, oh_hi) = valid_range(ho, h, stride, pad, khi);
                    for kwi in 0..kw {
                        let wgt = k[((co * cin + ci) * kh + khi) * kw + kwi];
                        let (ow_lo, ow_hi) = valid_range(wo, w, stride, pad, kwi);
                        for oh in oh_lo..oh_hi {
                            let ih = oh * stride + khi - pad;
                            let row_in = ih * w;
                            let row_out = oh * wo;
                            for ow in ow_lo..ow_hi {
                                let iw = ow * stride + kwi - pad;
                                out_slab[row_out + ow] += wgt * x_slab[row_in + iw];
                            }
                        }
                    }
                }
            }
        }
    }

    Tensor::from_op(vec![n, cout, ho, wo], out, "conv2d")
}

/// Gradients of conv2d w.r.t. (input, kernel, bias).
pub(crate) fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
) -> (Tensor, Tensor, Tensor) {
    let (n, cin, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let (cout, _, kh, kw) = (kernel.dim(0), kernel.dim(1), kernel.dim(2), kernel.dim(3));
    let (ho, wo) = (grad_out.dim(2), grad_out.dim(3));

    let x = input.data();
    let k = kernel.data();
    let g = grad_out.data();
    let mut dx = vec![0.0; x.len()];
    let mut dk = vec![0.0; k.len()];
    let mut db = vec![0.0; cout];

    for ni in 0..n {
        for co in 0..cout {
            let g_slab = &g[(ni * cout + co) * ho * wo..][..ho * wo];
            let mut bias_acc = 0.0;
            for gv in g_slab {
                bias_acc += gv;
            }
            db[co] += bias_acc;
            for ci in 0..cin {
                let x_slab = &x[(ni * cin + ci) * h * w..][..h * w];
                let dx_slab = &mut dx[(ni * cin + ci) * h * w..][..h * w];
                for khi in 0..kh {
                    let (oh_lo, oh_hi) = valid_range(ho, h, stride, pad, khi);
                    for kwi in 0..kw {
                        let kidx = ((co * cin + ci) * kh + khi) * kw + kwi;
                        let wgt = k[kidx];
                        let (ow_lo, ow_hi) = valid_range(wo, w, stride, pad, kwi);
                        let mut w_acc = 0.0;
                        for oh in oh_lo..oh_hi {
                            let ih = oh * stride + khi - pad;
                            let row_in = ih * w;
                            let row_out = oh * wo;
                            for ow in ow_lo..ow_hi {
                                let iw = ow * stride + kwi - pad;
                                let gv = g_slab[row_out + ow];
                                w_acc += gv * x_slab[row_in + iw];
                                dx_slab[row_in + iw] += gv * wgt;
                            }
                        }
                        dk[kidx] += w_acc;
                    }
                }
            }
        }
    }

    let dx = Tensor::from_op(input.shape().to_vec(), dx, "conv2d backward").expect("finite");
    let dk = Tensor::from_op(kernel.shape().to_vec(), dk, "conv2d backward").expect("finite");
    let db = Tensor::from_op(vec![cout], db, "conv2d backward").expect("finite");
    (dx, dk, db)
}

/// Per-channel mean and inverse std-dev saved by the train-mode forward pass.
#[derive(Debug, Clone)]
pub(crate) struct BnSaved {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
}

/// Batch statistics published by a train-mode pass, for running-stat updates.
#[derive(Debug, Clone)]
pub struct BnBatchStats {
    pub mean: Tensor,
    /// Unbiased variance (sum of squares / (m - 1)).
    pub var: Tensor,
}

fn bn_check_shapes(input: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<usize> {
    let (_, c, _, _) = nchw(input, "batch_norm2d input")?;
    require(gamma.rank() == 1 && gamma.dim(0) == c, || {
        format!("batch_norm2d gamma must be [{c}], got {:?}", gamma.shape())
    })?;
    require(beta.rank() == 1 && beta.dim(0) == c, || {
        format!("batch_norm2d beta must be [{c}], got {:?}", beta.shape())
    })?;
    Ok(c)
}

pub(crate) fn bn_train_forward(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, BnSaved, BnBatchStats)> {
    let c = bn_check_shapes(input, gamma, beta)?;
    let (n, _, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let m = n * h * w;
    require(m >= 2, || {
        format!("batch_norm2d train mode needs N*H*W >= 2, got {m}")
    })?;

    let x = input.data();
    let hw = h * w;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ci in 0..c {
        let mut sum = 0.0;
        for ni in 0..n {
            let slab = &x[(ni * c + ci) * hw..][..hw];
            for v in slab {
                sum += v;
            }
        }
        let mu = sum / m as f64;
        let mut sq = 0.0;
        for ni in 0..n {
            let slab = &x[(ni * c + ci) * hw..][..hw];
            for v in slab {
                let d = v - mu;
                sq += d * d;
            }
        }
        mean[ci] = mu;
        var[ci] = sq / m as f64;
    }

    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut out = vec![0.0; x.len()];
    let (g, b) = (gamma.data(), beta.data());
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * hw;
            let (mu, istd) = (mean[ci], inv_std[ci]);
            let (gc, bc) = (g[ci], b[ci]);
            for i in 0..hw {
                out[base + i] = gc * (x[base + i] - mu) * istd + bc;
            }
        }
    }

    let unbiased: Vec<f64> = var.iter().map(|v| v * m as f64 / (m - 1) as f64).collect();
    let stats = BnBatchStats {
        mean: Tensor::from_op(vec![c], mean.clone(), "batch_norm2d")?,
        var: Tensor::from_op(vec![c], unbiased, "batch_norm2d")?,
    };
    let out = Tensor::from_op(input.shape().to_vec(), out, "batch_norm2d")?;
    Ok((out, BnSaved { mean, inv_std }, stats))
}

pub(crate) fn bn_train_backward(
    input: &Tensor,
    gamma: &Tensor,
    saved: &BnSaved,
    grad_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (n, c, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let hw = h * w;
    let m = (n * hw) as f64;
    let x = input.data();
    let g = grad_out.data();

    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    let mut sum_g = vec![0.0; c];
    let mut sum_gx = vec![0.0; c];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * hw;
            let (mu, istd) = (saved.mean[ci], saved.inv_std[ci]);
            for i in 0..hw {
                let xhat = (x[base + i] - mu) * istd;
                let gv = g[base + i];
                sum_g[ci] += gv;
                sum_gx[ci] += gv * xhat;
            }
        }
    }
    for ci in 0..c {
        dgamma[ci] = sum_gx[ci];
        dbeta[ci] = sum_g[ci];
    }

    let gm = gamma.data();
    let mut dx = vec![0.0; x.len()];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * hw;
            let (mu, istd) = (saved.mean[ci], saved.inv_std[ci]);
            let scale = gm[ci] * istd;
            let mean_g = sum_g[ci] / m;
            let mean_gx = sum_gx[ci] / m;
            for i in 0..hw {
                let xhat = (x[base + i] - mu) * istd;
                dx[base + i] = scale * (g[base + i] - mean_g - xhat * mean_gx);
            }
        }
    }

    let dx = Tensor::from_op(input.shape().to_vec(), dx, "batch_norm2d backward").expect("finite");
    let dgamma = Tensor::from_op(vec![c], dgamma, "batch_norm2d backward").expect("finite");
    let dbeta = Tensor::from_op(vec![c], dbeta, "batch_norm2d backward").expect("finite");
    (dx, dgamma, dbeta)
}

pub(crate) fn bn_eval_forward(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running: &RunningStats,
    eps: f64,
) -> Result<Tensor> {
    let c = bn_check_shapes(input, gamma, beta)?;
    require(
        running.mean.rank() == 1
            && running.mean.dim(0) == c
            && running.var.rank() == 1
            && running.var.dim(0) == c,
        || format!("running stats must be [{c}] tensors"),
    )?;
    require(running.var.data().iter().all(|&v| v >= 0.0), || {
        "running variance must be non-negative".into()
    })?;

    let (n, _, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let hw = h * w;
    let x = input.data();
    let (g, b) = (gamma.data(), beta.data());
    let (rm, rv) = (running.mean.data(), running.var.data());
    let mut out = vec![0.0; x.len()];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * hw;
            let istd = 1.0 / (rv[ci] + eps).sqrt();
            let (mu, gc, bc) = (rm[ci], g[ci], b[ci]);
            for i in 0..hw {
                out[base + i] = gc * (x[base + i] - mu) * istd + bc;
            }
        }
    }
    Tensor::from_op(input.shape().to_vec(), out, "batch_norm2d")
}

pub(crate) fn bn_eval_backward(
    input: &Tensor,
    gamma: &Tensor,
    running: &RunningStats,
    eps: f64,
    grad_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (n, c, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let hw = h * w;
    let x = input.data();
    let g = grad_out.data();
    let (rm, rv) = (running.mean.data(), running.var.data());
    let gm = gamma.data();

    let mut dx = vec![0.0; x.len()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * hw;
            let istd = 1.0 / (rv[ci] + eps).sqrt();
            let scale = gm[ci] * istd;
            for i in 0..hw {
                let gv = g[base + i];
                dx[base + i] = gv * scale;
                dgamma[ci] += gv * (x[base + i] - rm[ci]) * istd;
                dbeta[ci] += gv;
            }
        }
    }

    let dx = Tensor::from_op(input.shape().to_vec(), dx, "batch_norm2d backward").expect("finite");
    let dgamma = Tensor::from_op(vec![c], dgamma, "batch_norm2d backward").expect("finite");
    let dbeta = Tensor::from_op(vec![c], dbeta, "batch_norm2d backward").expect("finite");
    (dx, dgamma, dbeta)
}

/// Batch normalization over N,H,W per channel.
///
/// Train mode normalizes by batch statistics and returns running stats updated
/// with `momentum` (new = (1-momentum)*old + momentum*batch, unbiased variance).
/// Eval mode normalizes by the provided running stats and returns them unchanged.
pub fn batch_norm2d(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running: &RunningStats,
    mode: BnMode,
    eps: f64,
    momentum: f64,
) -> Result<(Tensor, RunningStats)> {
    match mode {
        BnMode::Train => {
            let (out, _, stats) = bn_train_forward(input, gamma, beta, eps)?;
            let c = gamma.dim(0);
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ci in 0..c {
                mean[ci] =
                    (1.0 - momentum) * running.mean.data()[ci] + momentum * stats.mean.data()[ci];
                var[ci] =
                    (1.0 - momentum) * running.var.data()[ci] + momentum * stats.var.data()[ci];
            }
            let updated = RunningStats {
                mean: Tensor::from_op(vec![c], mean, "batch_norm2d")?,
                var: Tensor::from_op(vec![c], var, "batch_norm2d")?,
            };
            Ok((out, updated))
        }
        BnMode::Eval => {
            let out = bn_eval_forward(input, gamma, beta, running, eps)?;
            Ok((out, running.clone()))
        }
    }
}

/// Max pooling; gradient routes to the first maximum in row-major window order.
pub fn max_pool2d(input: &Tensor, window: usize, stride: usize) -> Result<Tensor> {
    max_pool2d_with_argmax(input, window, stride).map(|(t, _)| t)
}

pub(crate) fn max_pool2d_with_argmax(
    input: &Tensor,
    window: usize,
    stride: usize,
) -> Result<(Tensor, Vec<usize>)> {
    let (n, c, h, w) = nchw(input, "max_pool2d input")?;
    require(stride >= 1 && window >= 1, || {
        "max_pool2d window and stride must be >= 1".into()
    })?;
    require(window <= h && window <= w, || {
        format!("max_pool2d window {window} exceeds spatial extent {h}x{w}")
    })?;
    let ho = (h - window) / stride + 1;
    let wo = (w - window) / stride + 1;

    let x = input.data();
    let hw = h * w;
    let mut out = vec![0.0; n * c * ho * wo];
    let mut argmax = vec![0usize; out.len()];
    for ni in 0..n {
        for ci in 0..c {
            let base_in = (ni * c + ci) * hw;
            let base_out = (ni * c + ci) * ho * wo;
            for oh in 0..ho {
                for ow in 0..wo {
                    let (h0, w0) = (oh * stride, ow * stride);
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = base_in + h0 * w + w0;
                    for dh in 0..window {
                        for dw in 0..window {
                            let idx = base_in + (h0 + dh) * w + (w0 + dw);
                            // Strict > keeps the first maximum on ties.
                            if x[idx] > best {
                                best = x[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out[base_out + oh * wo + ow] = best;
                    argmax[base_out + oh * wo + ow] = best_idx;
                }
            }
        }
    }
    let out = Tensor::from_op(vec![n, c, ho, wo], out, "max_pool2d")?;
    Ok((out, argmax))
}

pub(crate) fn max_pool2d_backward(
    input_len: usize,
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor,
) -> Tensor {
    let mut dx = vec![0.0; input_len];
    for (g, &idx) in grad_out.data().iter().zip(argmax.iter()) {
        dx[idx] += g;
    }
    Tensor::from_op(input_shape.to_vec(), dx, "max_pool2d backward").expect("finite")
}

/// Per-channel spatial mean: [N,C,H,W] -> [N,C].
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = nchw(input, "global_avg_pool input")?;
    let hw = h * w;
    let x = input.data();
    let mut out = vec![0.0; n * c];
    for ni in 0..n {
        for ci in 0..c {
            let slab = &x[(ni * c + ci) * hw..][..hw];
            let mut sum = 0.0;
            for v in slab {
                sum += v;
            }
            out[ni * c + ci] = sum / hw as f64;
        }
    }
    Tensor::from_op(vec![n, c], out, "global_avg_pool")
}

pub(crate) fn global_avg_pool_backward(input_shape: &[usize], grad_out: &Tensor) -> Tensor {
    let (n, c, h, w) = (
        input_shape[0],
        input_shape[1],
        input_shape[2],
        input_shape[3],
    );
    let hw = h * w;
    let g = grad_out.data();
    let mut dx = vec![0.0; n * c * hw];
    for ni in 0..n {
        for ci in 0..c {
            let gv = g[ni * c + ci] / hw as f64;
            let slab = &mut dx[(ni * c + ci) * hw..][..hw];
            slab.fill(gv);
        }
    }
    Tensor::from_op(input_shape.to_vec(), dx, "global_avg_pool backward").expect("finite")
}

/// Fully connected layer: input [N,F] x weight [F,O] + bias [O].
pub fn dense(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    require(input.rank() == 2, || {
        format!("dense input must be rank 2, got {:?}", input.shape())
    })?;
    require(weight.rank() == 2, || {
        format!("dense weight must be rank 2, got {:?}", weight.shape())
    })?;
    let (n, f) = (input.dim(0), input.dim(1));
    let (wf, o) = (weight.dim(0), weight.dim(1));
    require(f == wf, || {
        format!("dense inner dimensions disagree: input has {f}, weight expects {wf}")
    })?;
    require(bias.rank() == 1 && bias.dim(0) == o, || {
        format!("dense bias must be [{o}], got {:?}", bias.shape())
    })?;

    let x = input.data();
    let wt = weight.data();
    let b = bias.data();
    let mut out = vec![0.0; n * o];
    for ni in 0..n {
        let row = &mut out[ni * o..][..o];
        row.copy_from_slice(b);
        for fi in 0..f {
            let xv = x[ni * f + fi];
            let wrow = &wt[fi * o..][..o];
            for (acc, wv) in row.iter_mut().zip(wrow.iter()) {
                *acc += xv * wv;
            }
        }
    }
    Tensor::from_op(vec![n, o], out, "dense")
}

pub(crate) fn dense_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (n, f) = (input.dim(0), input.dim(1));
    let o = weight.dim(1);
    let x = input.data();
    let wt = weight.data();
    let g = grad_out.data();

    let mut dx = vec![0.0; n * f];
    let mut dw = vec![0.0; f * o];
    let mut db = vec![0.0; o];
    for ni in 0..n {
        let grow = &g[ni * o..][..o];
        for (dbv, gv) in db.iter_mut().zip(grow.iter()) {
            *dbv += gv;
        }
        for fi in 0..f {
            let xv = x[ni * f + fi];
            let wrow = &wt[fi * o..][..o];
            let dwrow = &mut dw[fi * o..][..o];
            let mut acc = 0.0;
            for oi in 0..o {
                acc += grow[oi] * wrow[oi];
                dwrow[oi] += xv * grow[oi];
            }
            dx[ni * f + fi] = acc;
        }
    }

    let dx = Tensor::from_op(input.shape().to_vec(), dx, "dense backward").expect("finite");
    let dw = Tensor::from_op(weight.shape().to_vec(), dw, "dense backward").expect("finite");
    let db = Tensor::from_op(vec![o], db, "dense backward").expect("finite");
    (dx, dw, db)
}

#[inline]
pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(SIGMOID_CLAMP, 1.0 - SIGMOID_CLAMP)
}

/// Elementwise ReLU or sigmoid. Sigmoid output is strictly inside (0, 1).
pub fn activation(input: &Tensor, kind: Activation) -> Tensor {
    let data: Vec<f64> = match kind {
        Activation::Relu => input.data().iter().map(|&v| v.max(0.0)).collect(),
        Activation::Sigmoid => input.data().iter().map(|&v| sigmoid_scalar(v)).collect(),
    };
    Tensor {
        shape: input.shape().to_vec(),
        data: data.into(),
        requires_grad: false,
    }
}

pub(crate) fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Tensor {
    let data: Vec<f64> = input
        .data()
        .iter()
        .zip(grad_out.data().iter())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_op(input.shape().to_vec(), data, "relu backward").expect("finite")
}

pub(crate) fn sigmoid_backward(output: &Tensor, grad_out: &Tensor) -> Tensor {
    let data: Vec<f64> = output
        .data()
        .iter()
        .zip(grad_out.data().iter())
        .map(|(&s, &g)| g * s * (1.0 - s))
        .collect();
    Tensor::from_op(output.shape().to_vec(), data, "sigmoid backward").expect("finite")
}

/// Elementwise sum of two same-shaped tensors.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    require(a.shape() == b.shape(), || {
        format!("add shape mismatch: {:?} vs {:?}", a.shape(), b.shape())
    })?;
    let data: Vec<f64> = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(x, y)| x + y)
        .collect();
    Tensor::from_op(a.shape().to_vec(), data, "add")
}

/// Sum of all elements, as a one-element tensor.
pub fn sum_all(input: &Tensor) -> Tensor {
    let mut acc = 0.0;
    for v in input.data() {
        acc += v;
    }
    Tensor {
        shape: vec![1],
        data: vec![acc].into(),
        requires_grad: false,
    }
}

/// Binary cross entropy with mean reduction over all elements; supports soft
/// labels in [0,1]. Probabilities are clamped at [`BCE_CLAMP`] before logs.
pub fn bce(probs: &Tensor, labels: &Tensor) -> Result<Tensor> {
    require(probs.len() == labels.len(), || {
        format!(
            "bce length mismatch: {} probabilities vs {} labels",
            probs.len(),
            labels.len()
        )
    })?;
    require(labels.data().iter().all(|&y| (0.0..=1.0).contains(&y)), || {
        "bce labels must lie in [0,1]".into()
    })?;
    let n = probs.len() as f64;
    let mut acc = 0.0;
    for (&p, &y) in probs.data().iter().zip(labels.data().iter()) {
        let pc = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        acc -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
    }
    let loss = acc / n;
    ensure_finite(&[loss], "bce")?;
    Ok(Tensor {
        shape: vec![1],
        data: vec![loss].into(),
        requires_grad: false,
    })
}

pub(crate) fn bce_backward(probs: &Tensor, labels: &Tensor, grad_out: f64) -> Tensor {
    let n = probs.len() as f64;
    let data: Vec<f64> = probs
        .data()
        .iter()
        .zip(labels.data().iter())
        .map(|(&p, &y)| {
            if p <= BCE_CLAMP || p >= 1.0 - BCE_CLAMP {
                // Clamped region: the loss is locally constant in p.
                0.0
            } else {
                grad_out * (p - y) / (p * (1.0 - p)) / n
            }
        })
        .collect();
    Tensor::from_op(probs.shape().to_vec(), data, "bce backward").expect("finite")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv2d_all_ones_counts_overlap() {
        let input = Tensor::ones(&[1, 1, 3, 3]).unwrap();
        let kernel = Tensor::ones(&[1, 1, 3, 3]).unwrap();
        let bias = Tensor::zeros(&[1]).unwrap();
        let out = conv2d(&input, &kernel, &bias, 1, 1).unwrap();
        assert_eq!(out.shape(), &[1, 1, 3, 3]);
        assert_eq!(out.at4(0, 0, 1, 1), 9.0);
        assert_eq!(out.at4(0, 0, 0, 0), 4.0);
        assert_eq!(out.at4(0, 0, 2, 2), 4.0);
        assert_eq!(out.at4(0, 0, 0, 1), 6.0);
    }

    #[test]
    fn conv2d_identity_kernel() {
        let input = t(&[1, 1, 2, 3], &[1.0, -2.0, 3.0, 4.0, 5.0, -6.0]);
        let kernel = t(&[1, 1, 1, 1], &[1.0]);
        let bias = Tensor::zeros(&[1]).unwrap();
        let out = conv2d(&input, &kernel, &bias, 1, 0).unwrap();
        assert!(out.bit_eq(&input));
    }

    #[test]
    fn conv2d_rejects_bad_shapes() {
        let input = Tensor::ones(&[1, 2, 4, 4]).unwrap();
        let kernel = Tensor::ones(&[3, 1, 2, 2]).unwrap(); // channel mismatch
        let bias = Tensor::zeros(&[3]).unwrap();
        assert!(conv2d(&input, &kernel, &bias, 1, 0).is_err());

        let kernel = Tensor::ones(&[3, 2, 5, 5]).unwrap(); // kernel larger than input
        assert!(conv2d(&input, &kernel, &bias, 1, 0).is_err());
    }

    /// Independent six-nested-loop reference convolution.
    fn conv2d_naive(
        input: &Tensor,
        kernel: &Tensor,
        bias: &Tensor,
        stride: usize,
        pad: usize,
    ) -> Tensor {
        let (n, cin, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
        let (cout, _, kh, kw) = (kernel.dim(0), kernel.dim(1), kernel.dim(2), kernel.dim(3));
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; n * cout * ho * wo];
        for ni in 0..n {
            for co in 0..cout {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut acc = bias.data()[co];
                        for ci in 0..cin {
                            for khi in 0..kh {
                                for kwi in 0..kw {
                                    let ih = oh * stride + khi;
                                    let iw = ow * stride + kwi;
                                    if ih >= pad && iw >= pad && ih - pad < h && iw - pad < w {
                                        acc += kernel.at4(co, ci, khi, kwi)
                                            * input.at4(ni, ci, ih - pad, iw - pad);
                                    }
                                }
                            }
                        }
                        out[((ni * cout + co) * ho + oh) * wo + ow] = acc;
                    }
                }
            }
        }
        Tensor::new(vec![n, cout, ho, wo], out).unwrap()
    }

    #[test]
    fn conv2d_matches_naive_loop_oracle() {
        use rand::Rng;
        let mut rng = crate::rng::stream(11, &[0]);
        let input = Tensor::new(
            vec![1, 2, 4, 4],
            (0..32).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let kernel = Tensor::new(
            vec![3, 2, 2, 2],
            (0..24).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let bias = Tensor::new(vec![3], vec![0.1, -0.2, 0.3]).unwrap();
        let got = conv2d(&input, &kernel, &bias, 2, 0).unwrap();
        let want = conv2d_naive(&input, &kernel, &bias, 2, 0);
        assert!(got.max_abs_diff(&want) < 1e-12);

        // Also with padding and stride 1.
        let got = conv2d(&input, &kernel, &bias, 1, 1).unwrap();
        let want = conv2d_naive(&input, &kernel, &bias, 1, 1);
        assert!(got.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn batch_norm_constant_input_normalizes_to_zero() {
        let input = Tensor::full(&[2, 1, 2, 2], 5.0).unwrap();
        let gamma = Tensor::ones(&[1]).unwrap();
        let beta = Tensor::zeros(&[1]).unwrap();
        let running = RunningStats::identity(1).unwrap();
        let (out, _) =
            batch_norm2d(&input, &gamma, &beta, &running, BnMode::Train, 1e-5, 0.1).unwrap();
        for v in out.data() {
            assert!(v.abs() < 1e-9, "constant batch should normalize to 0, got {v}");
        }
    }

    #[test]
    fn batch_norm_eval_identity_stats_is_identity() {
        let input = t(&[1, 2, 1, 2], &[0.5, -1.5, 2.0, 0.25]);
        let gamma = Tensor::ones(&[2]).unwrap();
        let beta = Tensor::zeros(&[2]).unwrap();
        let running = RunningStats::identity(2).unwrap();
        let eps = 1e-12;
        let (out, stats) =
            batch_norm2d(&input, &gamma, &beta, &running, BnMode::Eval, eps, 0.1).unwrap();
        assert!(out.max_abs_diff(&input) < 1e-9);
        assert_eq!(stats, running);
    }

    #[test]
    fn batch_norm_matches_direct_standardization() {
        // 2x1x2x2 input {1..8}, gamma=2, beta=1.
        let input = t(
            &[2, 1, 2, 2],
            &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0],
        );
        let gamma = Tensor::full(&[1], 2.0).unwrap();
        let beta = Tensor::ones(&[1]).unwrap();
        let running = RunningStats::identity(1).unwrap();
        let eps = 1e-5;
        let (out, _) =
            batch_norm2d(&input, &gamma, &beta, &running, BnMode::Train, eps, 0.1).unwrap();

        // Direct per-channel mean/variance oracle.
        let vals = input.data();
        let mean: f64 = vals.iter().sum::<f64>() / 8.0;
        let var: f64 = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        let expect: Vec<f64> = vals
            .iter()
            .map(|v| 2.0 * (v - mean) / (var + eps).sqrt() + 1.0)
            .collect();
        let expect = Tensor::new(vec![2, 1, 2, 2], expect).unwrap();
        assert!(out.max_abs_diff(&expect) < 1e-10);
    }

    #[test]
    fn batch_norm_train_rejects_single_element_stats() {
        let input = Tensor::ones(&[1, 3, 1, 1]).unwrap();
        let gamma = Tensor::ones(&[3]).unwrap();
        let beta = Tensor::zeros(&[3]).unwrap();
        let running = RunningStats::identity(3).unwrap();
        assert!(batch_norm2d(&input, &gamma, &beta, &running, BnMode::Train, 1e-5, 0.1).is_err());
    }

    #[test]
    fn max_pool_basics() {
        let input = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let out = max_pool2d(&input, 2, 2).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1, 1]);
        assert_eq!(out.data()[0], 4.0);

        let constant = Tensor::full(&[1, 2, 4, 4], 7.5).unwrap();
        let out = max_pool2d(&constant, 2, 2).unwrap();
        assert!(out.data().iter().all(|&v| v == 7.5));

        assert!(max_pool2d(&input, 3, 1).is_err());
    }

    #[test]
    fn max_pool_matches_window_scan() {
        use rand::Rng;
        let mut rng = crate::rng::stream(5, &[1]);
        let input = Tensor::new(
            vec![1, 1, 4, 4],
            (0..16).map(|_| rng.random_range(-2.0..2.0)).collect(),
        )
        .unwrap();
        let out = max_pool2d(&input, 2, 2).unwrap();
        for oh in 0..2 {
            for ow in 0..2 {
                let mut best = f64::NEG_INFINITY;
                for dh in 0..2 {
                    for dw in 0..2 {
                        best = best.max(input.at4(0, 0, oh * 2 + dh, ow * 2 + dw));
                    }
                }
                assert_eq!(out.at4(0, 0, oh, ow), best);
            }
        }
    }

    #[test]
    fn max_pool_tie_routes_to_first_in_row_major() {
        let input = t(&[1, 1, 2, 2], &[3.0, 3.0, 3.0, 3.0]);
        let (_, argmax) = max_pool2d_with_argmax(&input, 2, 2).unwrap();
        assert_eq!(argmax, vec![0]);
    }

    #[test]
    fn global_avg_pool_means() {
        let constant = Tensor::full(&[2, 3, 4, 4], 3.0).unwrap();
        let out = global_avg_pool(&constant).unwrap();
        assert_eq!(out.shape(), &[2, 3]);
        assert!(out.data().iter().all(|&v| v == 3.0));

        let input = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let out = global_avg_pool(&input).unwrap();
        assert_eq!(out.data(), &[2.5]);
    }

    #[test]
    fn global_avg_pool_matches_summation_oracle() {
        use rand::Rng;
        let mut rng = crate::rng::stream(9, &[2]);
        let input = Tensor::new(
            vec![2, 3, 5, 5],
            (0..150).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let out = global_avg_pool(&input).unwrap();
        for n in 0..2 {
            for c in 0..3 {
                let mut sum = 0.0;
                for h in 0..5 {
                    for w in 0..5 {
                        sum += input.at4(n, c, h, w);
                    }
                }
                assert!((out.data()[n * 3 + c] - sum / 25.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dense_identity_and_hand_dot() {
        let input = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let zero_bias = Tensor::zeros(&[2]).unwrap();
        let out = dense(&input, &eye, &zero_bias).unwrap();
        assert!(out.bit_eq(&input));

        let x = t(&[1, 2], &[1.0, 2.0]);
        let w = t(&[2, 1], &[1.0, 1.0]);
        let b = t(&[1], &[0.5]);
        let out = dense(&x, &w, &b).unwrap();
        assert_eq!(out.data(), &[3.5]);

        assert!(dense(&x, &eye, &t(&[1], &[0.0])).is_err()); // bias length mismatch
        let w_bad = t(&[3, 1], &[1.0, 1.0, 1.0]);
        assert!(dense(&x, &w_bad, &b).is_err()); // inner dim mismatch
    }

    #[test]
    fn dense_matches_triple_loop_matmul() {
        use rand::Rng;
        let mut rng = crate::rng::stream(3, &[7]);
        let x = Tensor::new(
            vec![3, 4],
            (0..12).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let w = Tensor::new(
            vec![4, 2],
            (0..8).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let b = Tensor::new(vec![2], vec![0.25, -0.75]).unwrap();
        let out = dense(&x, &w, &b).unwrap();
        for n in 0..3 {
            for o in 0..2 {
                let mut acc = b.data()[o];
                for f in 0..4 {
                    acc += x.data()[n * 4 + f] * w.data()[f * 2 + o];
                }
                assert!((out.data()[n * 2 + o] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn activation_values() {
        let x = t(&[3], &[0.0, -3.0, 3.0]);
        let s = activation(&x, Activation::Sigmoid);
        assert_eq!(s.data()[0], 0.5);
        let r = activation(&x, Activation::Relu);
        assert_eq!(r.data(), &[0.0, 0.0, 3.0]);
    }

    #[test]
    fn sigmoid_symmetry_identity() {
        for i in 0..100 {
            let x = -10.0 + 0.2 * i as f64;
            let s = sigmoid_scalar(x) + sigmoid_scalar(-x);
            assert!((s - 1.0).abs() < 1e-12, "sigmoid symmetry broke at {x}");
        }
    }

    #[test]
    fn sigmoid_stays_strictly_inside_unit_interval() {
        for &x in &[-1e6, -100.0, 0.0, 100.0, 1e6] {
            let s = sigmoid_scalar(x);
            assert!(s > 0.0 && s < 1.0, "sigmoid({x}) = {s}");
        }
    }

    #[test]
    fn add_identity_and_values() {
        let a = t(&[2], &[1.0, 2.0]);
        let b = t(&[2], &[3.0, 4.0]);
        let zeros = Tensor::zeros(&[2]).unwrap();
        assert!(add(&a, &zeros).unwrap().bit_eq(&a));
        assert_eq!(add(&a, &b).unwrap().data(), &[4.0, 6.0]);
        assert!(add(&a, &Tensor::zeros(&[3]).unwrap()).is_err());
    }

    #[test]
    fn bce_values() {
        let one = t(&[1], &[1.0]);
        let loss = bce(&one, &one).unwrap().item().unwrap();
        assert!(loss <= 1.2e-7, "perfect prediction loss {loss}");

        let half = t(&[2], &[0.5, 0.5]);
        let y = t(&[2], &[1.0, 0.0]);
        let loss = bce(&half, &y).unwrap().item().unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);

        // Soft label: p = y = 0.3 is the entropy, and the minimum over p.
        let p = t(&[1], &[0.3]);
        let y = t(&[1], &[0.3]);
        let at_match = bce(&p, &y).unwrap().item().unwrap();
        let entropy = -(0.3f64 * 0.3f64.ln() + 0.7 * 0.7f64.ln());
        assert!((at_match - entropy).abs() < 1e-12);
        assert!((at_match - 0.610864).abs() < 1e-6);
        // Scan a p-grid to confirm the minimum sits at p = y.
        for i in 1..100 {
            let pv = i as f64 / 100.0;
            let l = bce(&t(&[1], &[pv]), &y).unwrap().item().unwrap();
            assert!(l + 1e-12 >= at_match, "bce({pv}) = {l} below minimum");
        }
    }

    #[test]
    fn conv_out_extent_formula() {
        assert_eq!(conv_out_extent(4, 2, 2, 0), Some(2));
        assert_eq!(conv_out_extent(3, 3, 1, 1), Some(3));
        assert_eq!(conv_out_extent(2, 5, 1, 1), None);
    }
}
