//! Layer primitives: specs, kernels, forward and backward passes.
//!
//! Forward ops are pure functions of (input, weights). Backward ops consume
//! state retained explicitly by the `*_saved` variants, so inference can run
//! concurrently while training keeps exact analytic gradients.

mod backward;
mod forward;

pub use backward::*;
pub use forward::*;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    PointwiseConv,
    Conv2d,
    MaxPool,
    AvgPool,
    Maxout,
    Relu,
    BRelu,
    ConcatChannels,
}

/// Declarative description of one layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub pad: usize,
    pub stride: usize,
    /// Consecutive channels reduced by max (Maxout only).
    pub maxout_group: usize,
}

impl LayerSpec {
    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        LayerSpec {
            kind: LayerKind::PointwiseConv,
            in_channels,
            out_channels,
            kernel: (1, 1),
            pad: 0,
            stride: 1,
            maxout_group: 0,
        }
    }

    pub fn conv2d(
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        pad: usize,
        stride: usize,
    ) -> Self {
        LayerSpec {
            kind: LayerKind::Conv2d,
            in_channels,
            out_channels,
            kernel,
            pad,
            stride,
            maxout_group: 0,
        }
    }

    pub fn max_pool(channels: usize, kernel: usize, pad: usize, stride: usize) -> Self {
        LayerSpec {
            kind: LayerKind::MaxPool,
            in_channels: channels,
            out_channels: channels,
            kernel: (kernel, kernel),
            pad,
            stride,
            maxout_group: 0,
        }
    }

    pub fn avg_pool(channels: usize, kernel: usize, pad: usize, stride: usize) -> Self {
        LayerSpec {
            kind: LayerKind::AvgPool,
            in_channels: channels,
            out_channels: channels,
            kernel: (kernel, kernel),
            pad,
            stride,
            maxout_group: 0,
        }
    }

    pub fn maxout(in_channels: usize, group: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Maxout,
            in_channels,
            out_channels: in_channels.checked_div(group).unwrap_or(0),
            kernel: (1, 1),
            pad: 0,
            stride: 1,
            maxout_group: group,
        }
    }

    pub fn relu(channels: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Relu,
            in_channels: channels,
            out_channels: channels,
            kernel: (1, 1),
            pad: 0,
            stride: 1,
            maxout_group: 0,
        }
    }

    pub fn brelu(channels: usize) -> Self {
        LayerSpec {
            kind: LayerKind::BRelu,
            in_channels: channels,
            out_channels: channels,
            kernel: (1, 1),
            pad: 0,
            stride: 1,
            maxout_group: 0,
        }
    }

    pub fn concat(total_channels: usize) -> Self {
        LayerSpec {
            kind: LayerKind::ConcatChannels,
            in_channels: total_channels,
            out_channels: total_channels,
            kernel: (1, 1),
            pad: 0,
            stride: 1,
            maxout_group: 0,
        }
    }

    pub fn has_weights(&self) -> bool {
        matches!(self.kind, LayerKind::PointwiseConv | LayerKind::Conv2d)
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            LayerKind::PointwiseConv => {
                if self.kernel != (1, 1) || self.pad != 0 || self.stride != 1 {
                    return Err(Error::Config(
                        "pointwise conv requires kernel (1,1), pad 0, stride 1".into(),
                    ));
                }
            }
            LayerKind::Maxout => {
                if self.maxout_group == 0 || self.in_channels % self.maxout_group != 0 {
                    return Err(Error::Config(format!(
                        "maxout group {} must divide {} channels",
                        self.maxout_group, self.in_channels
                    )));
                }
            }
            LayerKind::Conv2d | LayerKind::MaxPool | LayerKind::AvgPool
                if self.stride == 0 || self.kernel.0 == 0 || self.kernel.1 == 0 =>
            {
                return Err(Error::Config("kernel and stride must be nonzero".into()));
            }
            _ => {}
        }
        Ok(())
    }

    /// Output shape for a given input shape, per floor((n+2·pad−k)/stride)+1.
    pub fn output_shape(&self, input: (usize, usize, usize)) -> Result<(usize, usize, usize)> {
        let (c, h, w) = input;
        self.validate()?;
        match self.kind {
            LayerKind::PointwiseConv | LayerKind::Conv2d => {
                if c != self.in_channels {
                    return Err(Error::dim("input channels", self.in_channels, c));
                }
                let (oh, ow) = spatial_out(h, w, self.kernel, self.pad, self.stride)?;
                Ok((self.out_channels, oh, ow))
            }
            LayerKind::MaxPool | LayerKind::AvgPool => {
                let (oh, ow) = spatial_out(h, w, self.kernel, self.pad, self.stride)?;
                Ok((c, oh, ow))
            }
            LayerKind::Maxout => {
                if c != self.in_channels {
                    return Err(Error::dim("input channels", self.in_channels, c));
                }
                Ok((c / self.maxout_group, h, w))
            }
            LayerKind::Relu | LayerKind::BRelu => Ok((c, h, w)),
            LayerKind::ConcatChannels => Ok((self.in_channels, h, w)),
        }
    }
}

/// floor((n + 2·pad − k)/stride) + 1 for both spatial axes.
pub fn spatial_out(
    h: usize,
    w: usize,
    kernel: (usize, usize),
    pad: usize,
    stride: usize,
) -> Result<(usize, usize)> {
    let (kh, kw) = kernel;
    if h + 2 * pad < kh {
        return Err(Error::dim("kernel height vs padded input", h + 2 * pad, kh));
    }
    if w + 2 * pad < kw {
        return Err(Error::dim("kernel width vs padded input", w + 2 * pad, kw));
    }
    Ok((
        (h + 2 * pad - kh) / stride + 1,
        (w + 2 * pad - kw) / stride + 1,
    ))
}

/// Convolution kernel: weights shaped (out_channels, in_channels, kh, kw)
/// plus one bias per output channel.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelWeights<S> {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub weights: Vec<S>,
    pub bias: Vec<S>,
}

impl<S: Scalar> KernelWeights<S> {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        kh: usize,
        kw: usize,
        weights: Vec<S>,
        bias: Vec<S>,
    ) -> Result<Self> {
        if weights.len() != out_channels * in_channels * kh * kw {
            return Err(Error::dim(
                "weight length",
                out_channels * in_channels * kh * kw,
                weights.len(),
            ));
        }
        if bias.len() != out_channels {
            return Err(Error::dim("bias length", out_channels, bias.len()));
        }
        Ok(KernelWeights {
            out_channels,
            in_channels,
            kh,
            kw,
            weights,
            bias,
        })
    }

    pub fn zeros(out_channels: usize, in_channels: usize, kh: usize, kw: usize) -> Self {
        KernelWeights {
            out_channels,
            in_channels,
            kh,
            kw,
            weights: vec![S::zero(); out_channels * in_channels * kh * kw],
            bias: vec![S::zero(); out_channels],
        }
    }

    #[inline]
    pub fn weight_index(&self, o: usize, i: usize, m: usize, n: usize) -> usize {
        ((o * self.in_channels + i) * self.kh + m) * self.kw + n
    }

    #[inline]
    pub fn weight(&self, o: usize, i: usize, m: usize, n: usize) -> S {
        self.weights[self.weight_index(o, i, m, n)]
    }

    pub fn num_weights(&self) -> usize {
        self.weights.len()
    }

    /// w += other · scale, elementwise over weights and biases.
    pub fn add_scaled(&mut self, other: &KernelWeights<S>, scale: S) {
        debug_assert_eq!(self.weights.len(), other.weights.len());
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += *b * scale;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += *b * scale;
        }
    }

    pub fn scale(&mut self, factor: S) {
        for v in self.weights.iter_mut() {
            *v *= factor;
        }
        for v in self.bias.iter_mut() {
            *v *= factor;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.weights.iter().all(|v| v.is_finite()) && self.bias.iter().all(|v| v.is_finite())
    }
}
