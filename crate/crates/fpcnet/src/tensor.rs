//! Dense C×H×W tensor in row-major (c, h, w) order.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense tensor over `S` with shape (channels, height, width).
///
/// Data is stored row-major in (c, h, w) order, so each channel is a
/// contiguous H·W slice.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<S>) -> Result<Self> {
        let expected = channels * height * width;
        if data.len() != expected {
            return Err(Error::dim("data length", expected, data.len()));
        }
        Ok(Tensor {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Tensor {
            channels,
            height,
            width,
            data: vec![S::zero(); channels * height * width],
        }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: S) -> Self {
        Tensor {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, c: usize, h: usize, w: usize) -> usize {
        debug_assert!(c < self.channels && h < self.height && w < self.width);
        (c * self.height + h) * self.width + w
    }

    #[inline]
    pub fn at(&self, c: usize, h: usize, w: usize) -> S {
        self.data[self.index(c, h, w)]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, h: usize, w: usize) -> &mut S {
        let i = self.index(c, h, w);
        &mut self.data[i]
    }

    #[inline]
    pub fn data(&self) -> &[S] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Contiguous H·W slice for one channel.
    #[inline]
    pub fn channel(&self, c: usize) -> &[S] {
        let plane = self.height * self.width;
        &self.data[c * plane..(c + 1) * plane]
    }

    #[inline]
    pub fn channel_mut(&mut self, c: usize) -> &mut [S] {
        let plane = self.height * self.width;
        &mut self.data[c * plane..(c + 1) * plane]
    }

    pub fn channel_mean(&self, c: usize) -> S {
        let plane = self.channel(c);
        plane.iter().copied().sum::<S>() / S::from_usize(plane.len())
    }

    pub fn channel_std(&self, c: usize) -> S {
        let plane = self.channel(c);
        let mean = self.channel_mean(c);
        let var = plane
            .iter()
            .map(|&v| (v - mean) * (v - mean))
            .sum::<S>()
            / S::from_usize(plane.len());
        var.sqrt()
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Tensor<S> {
        Tensor {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copy a spatial sub-block across all channels.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Tensor<S> {
        assert!(top + h <= self.height && left + w <= self.width);
        let mut out = Tensor::zeros(self.channels, h, w);
        for c in 0..self.channels {
            let src = self.channel(c);
            let dst = out.channel_mut(c);
            for r in 0..h {
                let s = (top + r) * self.width + left;
                dst[r * w..(r + 1) * w].copy_from_slice(&src[s..s + w]);
            }
        }
        out
    }

    /// Convert element type (f32 ↔ f64).
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| T::from_f64(v.to_f64())).collect(),
        }
    }
}
