//! Analytic gradients for every layer kind.
//!
//! Each function takes what its forward pass retained (input, argmax,
//! winners) plus the upstream gradient, and produces the input gradient and,
//! for parametric layers, the weight/bias gradients. Setting `need_dx` to
//! false skips the input gradient for layers fed directly by the network
//! input.

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::{spatial_out, window_bounds, KernelWeights};

pub fn pointwise_conv_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &KernelWeights<S>,
    dy: &Tensor<S>,
    need_dx: bool,
) -> (Option<Tensor<S>>, KernelWeights<S>) {
    let mut grads = KernelWeights::zeros(w.out_channels, w.in_channels, 1, 1);
    for o in 0..w.out_channels {
        let dchan = dy.channel(o);
        grads.bias[o] = dchan.iter().copied().sum();
        for c in 0..w.in_channels {
            let dot = dchan
                .iter()
                .zip(x.channel(c))
                .map(|(&d, &v)| d * v)
                .sum::<S>();
            grads.weights[o * w.in_channels + c] = dot;
        }
    }
    let dx = need_dx.then(|| {
        let (_, h, wd) = x.shape();
        let mut dx = Tensor::zeros(w.in_channels, h, wd);
        for o in 0..w.out_channels {
            let dchan = dy.channel(o);
            for c in 0..w.in_channels {
                let coef = w.weights[o * w.in_channels + c];
                for (dv, &d) in dx.channel_mut(c).iter_mut().zip(dchan) {
                    *dv += coef * d;
                }
            }
        }
        dx
    });
    (dx, grads)
}

pub fn conv2d_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &KernelWeights<S>,
    pad: usize,
    stride: usize,
    dy: &Tensor<S>,
    need_dx: bool,
) -> Result<(Option<Tensor<S>>, KernelWeights<S>)> {
    let (_, h, wd) = x.shape();
    let (oh, ow) = spatial_out(h, wd, (w.kh, w.kw), pad, stride)?;
    let mut grads = KernelWeights::zeros(w.out_channels, w.in_channels, w.kh, w.kw);
    let mut dx = need_dx.then(|| Tensor::zeros(w.in_channels, h, wd));
    for o in 0..w.out_channels {
        for i in 0..oh {
            let h0 = (i * stride) as isize - pad as isize;
            for j in 0..ow {
                let w0 = (j * stride) as isize - pad as isize;
                let d = dy.at(o, i, j);
                grads.bias[o] += d;
                for c in 0..w.in_channels {
                    for m in 0..w.kh {
                        let hh = h0 + m as isize;
                        if hh < 0 || hh >= h as isize {
                            continue;
                        }
                        for n in 0..w.kw {
                            let ww = w0 + n as isize;
                            if ww < 0 || ww >= wd as isize {
                                continue;
                            }
                            let gi = grads.weight_index(o, c, m, n);
                            grads.weights[gi] += d * x.at(c, hh as usize, ww as usize);
                            if let Some(dx) = dx.as_mut() {
                                *dx.at_mut(c, hh as usize, ww as usize) +=
                                    d * w.weight(o, c, m, n);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((dx, grads))
}

/// Routes each upstream gradient to the cell that won the max.
pub fn max_pool_backward<S: Scalar>(
    in_shape: (usize, usize, usize),
    argmax: &[usize],
    dy: &Tensor<S>,
) -> Tensor<S> {
    let (c, h, w) = in_shape;
    let mut dx = Tensor::zeros(c, h, w);
    for (&idx, &d) in argmax.iter().zip(dy.data()) {
        dx.data_mut()[idx] += d;
    }
    dx
}

/// Spreads each upstream gradient uniformly over the real cells of its window.
pub fn avg_pool_backward<S: Scalar>(
    in_shape: (usize, usize, usize),
    kernel: (usize, usize),
    pad: usize,
    stride: usize,
    dy: &Tensor<S>,
) -> Result<Tensor<S>> {
    let (c, h, w) = in_shape;
    let (oh, ow) = spatial_out(h, w, kernel, pad, stride)?;
    let mut dx = Tensor::zeros(c, h, w);
    for ch in 0..c {
        for i in 0..oh {
            let (h_lo, h_hi) = window_bounds(i, stride, pad, kernel.0, h);
            for j in 0..ow {
                let (w_lo, w_hi) = window_bounds(j, stride, pad, kernel.1, w);
                let count = (h_hi - h_lo) * (w_hi - w_lo);
                let share = dy.at(ch, i, j) / S::from_usize(count);
                for hh in h_lo..h_hi {
                    for ww in w_lo..w_hi {
                        *dx.at_mut(ch, hh, ww) += share;
                    }
                }
            }
        }
    }
    Ok(dx)
}

/// Routes each upstream gradient to the channel that won its group max.
pub fn maxout_backward<S: Scalar>(
    in_shape: (usize, usize, usize),
    winners: &[usize],
    dy: &Tensor<S>,
) -> Tensor<S> {
    let (c, h, w) = in_shape;
    let plane = h * w;
    let mut dx = Tensor::zeros(c, h, w);
    for (pos, (&win, &d)) in winners.iter().zip(dy.data()).enumerate() {
        let p = pos % plane;
        dx.data_mut()[win * plane + p] += d;
    }
    dx
}

pub fn relu_backward<S: Scalar>(input: &Tensor<S>, dy: &Tensor<S>) -> Tensor<S> {
    let mut dx = dy.clone();
    for (dv, &v) in dx.data_mut().iter_mut().zip(input.data()) {
        if v <= S::zero() {
            *dv = S::zero();
        }
    }
    dx
}

/// Gradient passes only where the pre-activation was strictly inside (0, 1).
pub fn brelu_backward<S: Scalar>(input: &Tensor<S>, dy: &Tensor<S>) -> Tensor<S> {
    let mut dx = dy.clone();
    for (dv, &v) in dx.data_mut().iter_mut().zip(input.data()) {
        if v <= S::zero() || v >= S::one() {
            *dv = S::zero();
        }
    }
    dx
}

/// Splits the upstream gradient back into the concatenated channel blocks.
pub fn concat_backward<S: Scalar>(channel_counts: &[usize], dy: &Tensor<S>) -> Vec<Tensor<S>> {
    let (_, h, w) = dy.shape();
    let plane = h * w;
    let mut parts = Vec::with_capacity(channel_counts.len());
    let mut offset = 0usize;
    for &c in channel_counts {
        let slice = &dy.data()[offset * plane..(offset + c) * plane];
        parts.push(Tensor::new(c, h, w, slice.to_vec()).expect("split shape"));
        offset += c;
    }
    parts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{brelu_forward, pointwise_conv_forward};

    #[test]
    fn pointwise_weight_gradient_is_the_input_pixel() {
        // Single pixel, single output: d(out)/d(w[o,c]) = x[c].
        let x = Tensor::new(3, 1, 1, vec![0.2, -0.7, 1.3]).unwrap();
        let w = KernelWeights::new(1, 3, 1, 1, vec![0.5, 0.1, -0.2], vec![0.0]).unwrap();
        let dy = Tensor::filled(1, 1, 1, 1.0f64);
        let (_, grads) = pointwise_conv_backward(&x, &w, &dy, false);
        assert_eq!(grads.weights, vec![0.2, -0.7, 1.3]);
        assert_eq!(grads.bias, vec![1.0]);
    }

    #[test]
    fn brelu_gradient_zero_when_saturated() {
        let x = Tensor::new(1, 1, 3, vec![1.4, 0.5, -0.1]).unwrap();
        let _ = brelu_forward(&x);
        let dy = Tensor::filled(1, 1, 3, 1.0f64);
        let dx = brelu_backward(&x, &dy);
        assert_eq!(dx.data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn max_pool_gradient_routes_to_argmax() {
        let x = Tensor::new(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (_, argmax) = crate::nn::max_pool_forward(&x, (2, 2), 0, 2).unwrap();
        let dy = Tensor::filled(1, 1, 1, 5.0f64);
        let dx = max_pool_backward((1, 2, 2), &argmax, &dy);
        assert_eq!(dx.data(), &[0.0, 0.0, 0.0, 5.0]);
    }

    #[test]
    fn pointwise_forward_then_backward_shapes_align() {
        let x = Tensor::filled(2, 3, 3, 0.5f64);
        let w = KernelWeights::new(4, 2, 1, 1, vec![0.1; 8], vec![0.0; 4]).unwrap();
        let y = pointwise_conv_forward(&x, &w).unwrap();
        let (dx, dw) = pointwise_conv_backward(&x, &w, &y, true);
        assert_eq!(dx.unwrap().shape(), x.shape());
        assert_eq!(dw.weights.len(), w.weights.len());
    }
}
