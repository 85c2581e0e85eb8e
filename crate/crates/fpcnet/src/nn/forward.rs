//! Forward passes. All are pure: output depends only on (input, weights).

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::{spatial_out, KernelWeights};

/// 1×1 convolution: out[o,h,w] = bias[o] + Σ_c x[c,h,w]·w[o,c].
///
/// Spatial dimensions are unchanged; this is a per-pixel linear map across
/// channels, so it commutes exactly with any permutation of pixel positions.
pub fn pointwise_conv_forward<S: Scalar>(x: &Tensor<S>, w: &KernelWeights<S>) -> Result<Tensor<S>> {
    if w.kh != 1 {
        return Err(Error::dim("kernel height", 1, w.kh));
    }
    if w.kw != 1 {
        return Err(Error::dim("kernel width", 1, w.kw));
    }
    if x.channels() != w.in_channels {
        return Err(Error::dim("input channels", w.in_channels, x.channels()));
    }
    let (_, h, wd) = x.shape();
    let mut out = Tensor::zeros(w.out_channels, h, wd);
    for o in 0..w.out_channels {
        let bias = w.bias[o];
        let ochan = out.channel_mut(o);
        ochan.fill(bias);
        for c in 0..w.in_channels {
            let coef = w.weights[o * w.in_channels + c];
            for (ov, &xv) in ochan.iter_mut().zip(x.channel(c)) {
                *ov += coef * xv;
            }
        }
    }
    Ok(out)
}

/// Cross-correlation with zero padding.
pub fn conv2d_forward<S: Scalar>(
    x: &Tensor<S>,
    w: &KernelWeights<S>,
    pad: usize,
    stride: usize,
) -> Result<Tensor<S>> {
    if x.channels() != w.in_channels {
        return Err(Error::dim("input channels", w.in_channels, x.channels()));
    }
    let (_, h, wd) = x.shape();
    let (oh, ow) = spatial_out(h, wd, (w.kh, w.kw), pad, stride)?;
    let mut out = Tensor::zeros(w.out_channels, oh, ow);
    for o in 0..w.out_channels {
        for i in 0..oh {
            let h0 = (i * stride) as isize - pad as isize;
            for j in 0..ow {
                let w0 = (j * stride) as isize - pad as isize;
                let mut acc = w.bias[o];
                for c in 0..w.in_channels {
                    let plane = x.channel(c);
                    for m in 0..w.kh {
                        let hh = h0 + m as isize;
                        if hh < 0 || hh >= h as isize {
                            continue;
                        }
                        let row = &plane[hh as usize * wd..(hh as usize + 1) * wd];
                        for n in 0..w.kw {
                            let ww = w0 + n as isize;
                            if ww < 0 || ww >= wd as isize {
                                continue;
                            }
                            acc += row[ww as usize] * w.weight(o, c, m, n);
                        }
                    }
                }
                *out.at_mut(o, i, j) = acc;
            }
        }
    }
    Ok(out)
}

/// Max pooling. Padded cells count as −∞ and are never selected; a window
/// made entirely of padding is a degenerate configuration and errors.
///
/// Returns the pooled tensor and, per output element, the linear index of
/// the winning input cell (for gradient routing).
pub fn max_pool_forward<S: Scalar>(
    x: &Tensor<S>,
    kernel: (usize, usize),
    pad: usize,
    stride: usize,
) -> Result<(Tensor<S>, Vec<usize>)> {
    let (c, h, w) = x.shape();
    let (oh, ow) = spatial_out(h, w, kernel, pad, stride)?;
    let mut out = Tensor::zeros(c, oh, ow);
    let mut argmax = vec![0usize; c * oh * ow];
    for ch in 0..c {
        let plane = x.channel(ch);
        for i in 0..oh {
            let (h_lo, h_hi) = window_bounds(i, stride, pad, kernel.0, h);
            for j in 0..ow {
                let (w_lo, w_hi) = window_bounds(j, stride, pad, kernel.1, w);
                if h_lo >= h_hi || w_lo >= w_hi {
                    return Err(Error::Config(format!(
                        "max pool window at ({i},{j}) covers only padding"
                    )));
                }
                let mut best = S::neg_infinity();
                let mut best_idx = 0usize;
                for hh in h_lo..h_hi {
                    let row = hh * w;
                    for ww in w_lo..w_hi {
                        let v = plane[row + ww];
                        if v > best {
                            best = v;
                            best_idx = row + ww;
                        }
                    }
                }
                let oi = (ch * oh + i) * ow + j;
                out.data_mut()[oi] = best;
                argmax[oi] = ch * h * w + best_idx;
            }
        }
    }
    Ok((out, argmax))
}

/// Average pooling; padding cells are excluded from the divisor, so a
/// constant input stays exactly constant.
pub fn avg_pool_forward<S: Scalar>(
    x: &Tensor<S>,
    kernel: (usize, usize),
    pad: usize,
    stride: usize,
) -> Result<Tensor<S>> {
    let (c, h, w) = x.shape();
    let (oh, ow) = spatial_out(h, w, kernel, pad, stride)?;
    let mut out = Tensor::zeros(c, oh, ow);
    for ch in 0..c {
        let plane = x.channel(ch);
        for i in 0..oh {
            let (h_lo, h_hi) = window_bounds(i, stride, pad, kernel.0, h);
            for j in 0..ow {
                let (w_lo, w_hi) = window_bounds(j, stride, pad, kernel.1, w);
                if h_lo >= h_hi || w_lo >= w_hi {
                    return Err(Error::Config(format!(
                        "avg pool window at ({i},{j}) covers only padding"
                    )));
                }
                let mut acc = S::zero();
                for hh in h_lo..h_hi {
                    let row = hh * w;
                    for ww in w_lo..w_hi {
                        acc += plane[row + ww];
                    }
                }
                let count = (h_hi - h_lo) * (w_hi - w_lo);
                *out.at_mut(ch, i, j) = acc / S::from_usize(count);
            }
        }
    }
    Ok(out)
}

/// Real-cell bounds of the pooling/conv window for output index `i`.
#[inline]
pub(crate) fn window_bounds(
    i: usize,
    stride: usize,
    pad: usize,
    k: usize,
    limit: usize,
) -> (usize, usize) {
    let start = i as isize * stride as isize - pad as isize;
    let lo = start.max(0) as usize;
    let hi = ((start + k as isize).max(0) as usize).min(limit);
    (lo, hi.max(lo))
}

/// Channel-group max: out[g] = max over the g-th group of `group` channels.
///
/// Returns the reduced tensor and, per output element, the absolute input
/// channel that won.
pub fn maxout_forward<S: Scalar>(x: &Tensor<S>, group: usize) -> Result<(Tensor<S>, Vec<usize>)> {
    let (c, h, w) = x.shape();
    if group == 0 || c % group != 0 {
        return Err(Error::Config(format!(
            "maxout group {group} must divide {c} channels"
        )));
    }
    let oc = c / group;
    let plane = h * w;
    let mut out = Tensor::zeros(oc, h, w);
    let mut winners = vec![0usize; oc * plane];
    for g in 0..oc {
        let ochan_base = g * plane;
        for p in 0..plane {
            let mut best = S::neg_infinity();
            let mut best_c = 0usize;
            for k in 0..group {
                let ch = g * group + k;
                let v = x.data()[ch * plane + p];
                if v > best {
                    best = v;
                    best_c = ch;
                }
            }
            out.data_mut()[ochan_base + p] = best;
            winners[ochan_base + p] = best_c;
        }
    }
    Ok((out, winners))
}

/// max(x, 0) elementwise.
pub fn relu_forward<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(|v| if v > S::zero() { v } else { S::zero() })
}

/// Bounded ReLU: clamp to [0, 1].
pub fn brelu_forward<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(|v| {
        if v < S::zero() {
            S::zero()
        } else if v > S::one() {
            S::one()
        } else {
            v
        }
    })
}

/// Stack tensors along the channel axis; spatial shapes must agree.
pub fn concat_channels<S: Scalar>(xs: &[&Tensor<S>]) -> Result<Tensor<S>> {
    if xs.is_empty() {
        return Err(Error::Empty("concat inputs"));
    }
    let (_, h, w) = xs[0].shape();
    for x in xs {
        if x.height() != h {
            return Err(Error::dim("concat height", h, x.height()));
        }
        if x.width() != w {
            return Err(Error::dim("concat width", w, x.width()));
        }
    }
    let total: usize = xs.iter().map(|x| x.channels()).sum();
    let mut data = Vec::with_capacity(total * h * w);
    for x in xs {
        data.extend_from_slice(x.data());
    }
    Tensor::new(total, h, w, data)
}
