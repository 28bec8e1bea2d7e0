//! Forward and backward kernels over raw NCHW buffers.
//!
//! Every kernel is a plain nested loop with a fixed accumulation order so that
//! repeated evaluation is bit-reproducible.

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2dGeom {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Conv2dGeom {
    pub fn new(stride: usize, padding: usize, dilation: usize, groups: usize) -> Self {
        Self {
            stride,
            padding,
            dilation,
            groups,
        }
    }
}

pub(crate) fn out_size(input: usize, kernel: usize, stride: usize, pad: usize, dil: usize) -> Result<usize> {
    let span = dil * (kernel - 1) + 1;
    if input + 2 * pad < span || stride == 0 {
        return Err(Error::dim("window", format!("input >= {span}"), input + 2 * pad));
    }
    Ok((input + 2 * pad - span) / stride + 1)
}

/// Output positions `[lo, hi)` along one axis whose tap at offset `k` lands inside the input.
fn valid_range(input: usize, output: usize, k: usize, stride: usize, pad: usize, dil: usize) -> (usize, usize) {
    let off = k * dil;
    let lo = if pad > off { (pad - off).div_ceil(stride) } else { 0 };
    if input + pad <= off {
        return (0, 0);
    }
    let hi = ((input - 1 + pad - off) / stride + 1).min(output);
    (lo.min(hi), hi)
}

pub(crate) fn conv2d_forward(x: &Tensor, w: &Tensor, g: Conv2dGeom) -> Result<Tensor> {
    let (b, cin, h, wd) = x.dims4("conv2d")?;
    let (cout, cin_g, kh, kw) = w.dims4("conv2d weight")?;
    if g.groups == 0 || cin % g.groups != 0 || cout % g.groups != 0 || cin / g.groups != cin_g {
        return Err(Error::dim(
            "conv2d",
            format!("weight in-channels {} with {} groups", cin / g.groups.max(1), g.groups),
            cin_g,
        ));
    }
    let oh = out_size(h, kh, g.stride, g.padding, g.dilation)?;
    let ow = out_size(wd, kw, g.stride, g.padding, g.dilation)?;
    let xd = x.data();
    let wdata = w.data();
    let cout_g = cout / g.groups;
    let mut out = vec![0.0; b * cout * oh * ow];
    for bi in 0..b {
        for co in 0..cout {
            let grp = co / cout_g;
            let o_base = (bi * cout + co) * oh * ow;
            for cl in 0..cin_g {
                let ci = grp * cin_g + cl;
                let x_base = (bi * cin + ci) * h * wd;
                for ky in 0..kh {
                    let (oy0, oy1) = valid_range(h, oh, ky, g.stride, g.padding, g.dilation);
                    for kx in 0..kw {
                        let wv = wdata[((co * cin_g + cl) * kh + ky) * kw + kx];
                        let (ox0, ox1) = valid_range(wd, ow, kx, g.stride, g.padding, g.dilation);
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ky * g.dilation - g.padding;
                            let xrow = x_base + iy * wd;
                            let orow = o_base + oy * ow;
                            for ox in ox0..ox1 {
                                let ix = ox * g.stride + kx * g.dilation - g.padding;
                                out[orow + ox] += wv * xd[xrow + ix];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, cout, oh, ow], out)
}

/// Returns `(grad_x, grad_w)`.
pub(crate) fn conv2d_backward(x: &Tensor, w: &Tensor, g: Conv2dGeom, gout: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (b, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, cin_g, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * g.padding - g.dilation * (kh - 1) - 1) / g.stride + 1;
    let ow = (wd + 2 * g.padding - g.dilation * (kw - 1) - 1) / g.stride + 1;
    let xd = x.data();
    let wdata = w.data();
    let cout_g = cout / g.groups;
    let mut gx = vec![0.0; xd.len()];
    let mut gw = vec![0.0; wdata.len()];
    for bi in 0..b {
        for co in 0..cout {
            let grp = co / cout_g;
            let o_base = (bi * cout + co) * oh * ow;
            for cl in 0..cin_g {
                let ci = grp * cin_g + cl;
                let x_base = (bi * cin + ci) * h * wd;
                for ky in 0..kh {
                    let (oy0, oy1) = valid_range(h, oh, ky, g.stride, g.padding, g.dilation);
                    for kx in 0..kw {
                        let widx = ((co * cin_g + cl) * kh + ky) * kw + kx;
                        let wv = wdata[widx];
                        let (ox0, ox1) = valid_range(wd, ow, kx, g.stride, g.padding, g.dilation);
                        let mut acc = 0.0;
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ky * g.dilation - g.padding;
                            let xrow = x_base + iy * wd;
                            let orow = o_base + oy * ow;
                            for ox in ox0..ox1 {
                                let ix = ox * g.stride + kx * g.dilation - g.padding;
                                let go = gout[orow + ox];
                                gx[xrow + ix] += wv * go;
                                acc += go * xd[xrow + ix];
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
    (gx, gw)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoolKind {
    Max,
    /// Average over in-bounds taps only (padding excluded from the divisor).
    Avg,
}

/// Returns the pooled tensor and, for max pooling, the flat input index chosen per output.
pub(crate) fn pool_forward(
    x: &Tensor,
    kind: PoolKind,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, Vec<usize>)> {
    let (b, c, h, w) = x.dims4(match kind {
        PoolKind::Max => "max_pool",
        PoolKind::Avg => "avg_pool",
    })?;
    let oh = out_size(h, kernel, stride, pad, 1)?;
    let ow = out_size(w, kernel, stride, pad, 1)?;
    let xd = x.data();
    let mut out = vec![0.0; b * c * oh * ow];
    let mut arg = if kind == PoolKind::Max {
        vec![0usize; out.len()]
    } else {
        Vec::new()
    };
    for plane in 0..b * c {
        let xb = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let o = (plane * oh + oy) * ow + ox;
                let mut best = f64::NEG_INFINITY;
                let mut best_i = usize::MAX;
                let mut sum = 0.0;
                let mut count = 0usize;
                for ky in 0..kernel {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kernel {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let i = xb + iy as usize * w + ix as usize;
                        let v = xd[i];
                        match kind {
                            PoolKind::Max => {
                                if best_i == usize::MAX || v > best {
                                    best = v;
                                    best_i = i;
                                }
                            }
                            PoolKind::Avg => {
                                sum += v;
                                count += 1;
                            }
                        }
                    }
                }
                match kind {
                    PoolKind::Max => {
                        out[o] = best;
                        arg[o] = best_i;
                    }
                    PoolKind::Avg => out[o] = sum / count as f64,
                }
            }
        }
    }
    Ok((Tensor::new(vec![b, c, oh, ow], out)?, arg))
}

pub(crate) fn pool_backward(
    x: &Tensor,
    kind: PoolKind,
    kernel: usize,
    stride: usize,
    pad: usize,
    argmax: &[usize],
    gout: &[f64],
) -> Vec<f64> {
    let mut gx = vec![0.0; x.len()];
    match kind {
        PoolKind::Max => {
            for (o, &i) in argmax.iter().enumerate() {
                gx[i] += gout[o];
            }
        }
        PoolKind::Avg => {
            let s = x.shape();
            let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
            let oh = (h + 2 * pad - kernel) / stride + 1;
            let ow = (w + 2 * pad - kernel) / stride + 1;
            for plane in 0..planes {
                let xb = plane * h * w;
                for oy in 0..oh {
                    let ys: Vec<usize> = (0..kernel)
                        .map(|ky| (oy * stride + ky) as isize - pad as isize)
                        .filter(|&iy| iy >= 0 && iy < h as isize)
                        .map(|iy| iy as usize)
                        .collect();
                    for ox in 0..ow {
                        let xs: Vec<usize> = (0..kernel)
                            .map(|kx| (ox * stride + kx) as isize - pad as isize)
                            .filter(|&ix| ix >= 0 && ix < w as isize)
                            .map(|ix| ix as usize)
                            .collect();
                        let g = gout[(plane * oh + oy) * ow + ox] / (ys.len() * xs.len()) as f64;
                        for &iy in &ys {
                            for &ix in &xs {
                                gx[xb + iy * w + ix] += g;
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

/// Saved state of a batch-norm application.
#[derive(Clone, Debug)]
pub struct BnSaved {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
    /// Per-channel batch mean (training mode) or the running mean used.
    pub mean: Vec<f64>,
    /// Per-channel biased batch variance (training mode) or the running variance used.
    pub var: Vec<f64>,
    pub batch_stats: bool,
}

pub(crate) fn batch_norm_forward(
    x: &Tensor,
    gamma: Option<&[f64]>,
    beta: Option<&[f64]>,
    running: Option<(&[f64], &[f64])>,
) -> Result<(Tensor, BnSaved)> {
    let (b, c, h, w) = x.dims4("batch_norm")?;
    for p in [gamma, beta].into_iter().flatten() {
        if p.len() != c {
            return Err(Error::dim("batch_norm affine", c, p.len()));
        }
    }
    if let Some((m, v)) = running {
        if m.len() != c || v.len() != c {
            return Err(Error::dim("batch_norm running stats", c, m.len()));
        }
    }
    let hw = h * w;
    let n = (b * hw) as f64;
    let xd = x.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    match running {
        None => {
            for ch in 0..c {
                let mut s = 0.0;
                for bi in 0..b {
                    let base = (bi * c + ch) * hw;
                    s += xd[base..base + hw].iter().sum::<f64>();
                }
                let m = s / n;
                let mut q = 0.0;
                for bi in 0..b {
                    let base = (bi * c + ch) * hw;
                    q += xd[base..base + hw].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
                }
                mean[ch] = m;
                var[ch] = q / n;
            }
        }
        Some((m, v)) => {
            mean.copy_from_slice(m);
            var.copy_from_slice(v);
        }
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = vec![0.0; xd.len()];
    let mut out = vec![0.0; xd.len()];
    for bi in 0..b {
        for ch in 0..c {
            let base = (bi * c + ch) * hw;
            let g = gamma.map_or(1.0, |g| g[ch]);
            let be = beta.map_or(0.0, |b| b[ch]);
            for i in base..base + hw {
                let xh = (xd[i] - mean[ch]) * inv_std[ch];
                xhat[i] = xh;
                out[i] = g * xh + be;
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), out)?,
        BnSaved {
            xhat,
            inv_std,
            mean,
            var,
            batch_stats: running.is_none(),
        },
    ))
}

/// Returns `(grad_x, grad_gamma, grad_beta)`.
pub(crate) fn batch_norm_backward(
    shape: &[usize],
    gamma: Option<&[f64]>,
    saved: &BnSaved,
    gout: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (b, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let n = (b * hw) as f64;
    let mut gx = vec![0.0; gout.len()];
    let mut gg = vec![0.0; c];
    let mut gb = vec![0.0; c];
    for ch in 0..c {
        let mut sg = 0.0;
        let mut sgx = 0.0;
        for bi in 0..b {
            let base = (bi * c + ch) * hw;
            for i in base..base + hw {
                sg += gout[i];
                sgx += gout[i] * saved.xhat[i];
            }
        }
        gg[ch] = sgx;
        gb[ch] = sg;
        let scale = gamma.map_or(1.0, |g| g[ch]) * saved.inv_std[ch];
        for bi in 0..b {
            let base = (bi * c + ch) * hw;
            for i in base..base + hw {
                gx[i] = if saved.batch_stats {
                    scale * (gout[i] - sg / n - saved.xhat[i] * sgx / n)
                } else {
                    scale * gout[i]
                };
            }
        }
    }
    (gx, gg, gb)
}

/// Softmax along the last axis, optionally multiplied by a mask and renormalised.
///
/// Returns `(output, exps, row_sums)` where `exps` are the unmasked shifted
/// exponentials and `row_sums` the masked normalisers. Rows whose masked sum
/// is zero produce all-zero output.
pub(crate) fn softmax_forward(x: &Tensor, mask: Option<&Tensor>) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    if x.rank() == 0 {
        return Err(Error::Rank {
            op: "softmax",
            expected: 1,
            got: Vec::new(),
        });
    }
    if let Some(m) = mask {
        if m.shape() != x.shape() {
            return Err(Error::dim("softmax mask", x.shape(), m.shape()));
        }
    }
    let cols = *x.shape().last().unwrap();
    let rows = x.len() / cols;
    let xd = x.data();
    let mut exps = vec![0.0; xd.len()];
    let mut out = vec![0.0; xd.len()];
    let mut sums = vec![0.0; rows];
    for r in 0..rows {
        let row = &xd[r * cols..(r + 1) * cols];
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for j in 0..cols {
            let e = (row[j] - mx).exp();
            exps[r * cols + j] = e;
            let em = match mask {
                Some(m) => m.data()[r * cols + j] * e,
                None => e,
            };
            out[r * cols + j] = em;
            s += em;
        }
        sums[r] = s;
        if s > 0.0 {
            for v in &mut out[r * cols..(r + 1) * cols] {
                *v /= s;
            }
        }
    }
    Ok((Tensor::new(x.shape().to_vec(), out)?, exps, sums))
}

/// Returns `(grad_logits, grad_mask)`.
pub(crate) fn softmax_backward(y: &[f64], exps: &[f64], sums: &[f64], gout: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let rows = sums.len();
    let cols = y.len() / rows;
    let mut gx = vec![0.0; y.len()];
    let mut gm = vec![0.0; y.len()];
    for r in 0..rows {
        let range = r * cols..(r + 1) * cols;
        let s = sums[r];
        if s > 0.0 {
            let dot: f64 = range.clone().map(|i| gout[i] * y[i]).sum();
            for i in range {
                gx[i] = y[i] * (gout[i] - dot);
                gm[i] = exps[i] / s * (gout[i] - dot);
            }
        } else {
            // Fully masked row: linearise the numerator against the unmasked normaliser.
            let total: f64 = exps[range.clone()].iter().sum();
            for i in range {
                gm[i] = gout[i] * exps[i] / total;
            }
        }
    }
    (gx, gm)
}

/// Mean negative log-likelihood. Returns `(loss, probabilities)`.
pub(crate) fn cross_entropy_forward(logits: &Tensor, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    let (b, classes) = logits.dims2("cross_entropy")?;
    if labels.len() != b {
        return Err(Error::dim("cross_entropy labels", b, labels.len()));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelRange { label, classes });
    }
    let (p, _, _) = softmax_forward(logits, None)?;
    let ld = logits.data();
    let mut loss = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        let row = &ld[r * classes..(r + 1) * classes];
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        loss += lse - row[label];
    }
    Ok((loss / b as f64, p.into_data()))
}
