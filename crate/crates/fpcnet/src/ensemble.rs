//! Pixel-ensembles: shuffled or sampled pixel blocks that keep an image's
//! value statistics while destroying its spatial structure.
//!
//! Every ensemble remembers the permutation that produced it, so responses
//! computed on the ensemble can later be re-projected onto the source image.
//! Sampling is uniform without replacement within an ensemble and independent
//! across ensembles; each ensemble draws from its own ChaCha8 stream keyed by
//! (seed, ensemble index), so results are independent of scheduling order.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A block of pixels lifted out of a source image, plus the mapping back.
#[derive(Debug, Clone)]
pub struct PixelEnsemble<S> {
    /// C×h×w block of shuffled pixels.
    pub pixels: Tensor<S>,
    /// Ensemble position (row-major over h×w) → source (row, col).
    pub permutation: Vec<(usize, usize)>,
    /// (H, W) of the source image.
    pub source_shape: (usize, usize),
}

impl<S: Scalar> PixelEnsemble<S> {
    /// Number of pixel positions in the block.
    pub fn len(&self) -> usize {
        self.permutation.len()
    }

    pub fn is_empty(&self) -> bool {
        self.permutation.is_empty()
    }
}

/// Per-channel mean over one index subset of an ensemble.
#[derive(Debug, Clone)]
pub struct SubsetStats<S> {
    pub channel_means: Vec<S>,
    pub subset_size: usize,
}

/// Shuffle all pixels of an image into a same-shape ensemble.
///
/// Whole pixels move together (all channels), each exactly once. The same
/// seed always yields the same permutation.
pub fn shuffle_image<S: Scalar>(image: &Tensor<S>, seed: u64) -> Result<PixelEnsemble<S>> {
    let (c, h, w) = image.shape();
    if image.is_empty() {
        return Err(Error::Empty("image"));
    }
    let mut order: Vec<usize> = (0..h * w).collect();
    let mut rng = rng::stream(seed, 0);
    order.shuffle(&mut rng);
    let mut pixels = Tensor::zeros(c, h, w);
    for (pos, &src) in order.iter().enumerate() {
        for ch in 0..c {
            pixels.data_mut()[ch * h * w + pos] = image.data()[ch * h * w + src];
        }
    }
    let permutation = order.iter().map(|&src| (src / w, src % w)).collect();
    Ok(PixelEnsemble {
        pixels,
        permutation,
        source_shape: (h, w),
    })
}

/// Draw `count` ensembles of shape C×h×w from an image.
///
/// Each ensemble samples h·w distinct pixels uniformly without replacement,
/// independently of the other ensembles (stream (seed, index)).
pub fn sample_ensembles<S: Scalar>(
    image: &Tensor<S>,
    count: usize,
    size: (usize, usize),
    seed: u64,
) -> Result<Vec<PixelEnsemble<S>>> {
    let (c, src_h, src_w) = image.shape();
    let (h, w) = size;
    if h * w > src_h * src_w {
        return Err(Error::dim("ensemble pixels", src_h * src_w, h * w));
    }
    if h == 0 || w == 0 {
        return Err(Error::Empty("ensemble size"));
    }
    let mut out = Vec::with_capacity(count);
    for e in 0..count {
        let mut rng = rng::stream(seed, e as u64);
        let picked = rand::seq::index::sample(&mut rng, src_h * src_w, h * w);
        let mut pixels = Tensor::zeros(c, h, w);
        let mut permutation = Vec::with_capacity(h * w);
        for (pos, src) in picked.iter().enumerate() {
            for ch in 0..c {
                pixels.data_mut()[ch * h * w + pos] = image.data()[ch * src_h * src_w + src];
            }
            permutation.push((src / src_w, src % src_w));
        }
        out.push(PixelEnsemble {
            pixels,
            permutation,
            source_shape: (src_h, src_w),
        });
    }
    Ok(out)
}

/// Lift a contiguous patch into an ensemble without shuffling; the
/// permutation records the patch's source coordinates so re-projection
/// works the same as for shuffled ensembles.
pub fn patch_ensemble<S: Scalar>(
    image: &Tensor<S>,
    top: usize,
    left: usize,
    h: usize,
    w: usize,
) -> Result<PixelEnsemble<S>> {
    let (_, src_h, src_w) = image.shape();
    if top + h > src_h || left + w > src_w {
        return Err(Error::dim("patch extent", src_h.min(src_w), (top + h).max(left + w)));
    }
    let mut permutation = Vec::with_capacity(h * w);
    for r in top..top + h {
        for c in left..left + w {
            permutation.push((r, c));
        }
    }
    Ok(PixelEnsemble {
        pixels: image.crop(top, left, h, w),
        permutation,
        source_shape: (src_h, src_w),
    })
}

/// Per-channel stats of one rectangular sub-block of the ensemble.
pub fn subset_stats<S: Scalar>(
    e: &PixelEnsemble<S>,
    top: usize,
    left: usize,
    bh: usize,
    bw: usize,
) -> SubsetStats<S> {
    let (c, _, w) = e.pixels.shape();
    let mut means = Vec::with_capacity(c);
    for ch in 0..c {
        let plane = e.pixels.channel(ch);
        let mut acc = S::zero();
        for r in top..top + bh {
            for col in left..left + bw {
                acc += plane[r * w + col];
            }
        }
        means.push(acc / S::from_usize(bh * bw));
    }
    SubsetStats {
        channel_means: means,
        subset_size: bh * bw,
    }
}

/// Deviation of subset means from the ensemble mean, per channel.
#[derive(Debug, Clone)]
pub struct SubsetDeviation<S> {
    pub max_dev: S,
    pub mean_dev: S,
}

/// Empirically probe how close subset means stay to the ensemble mean.
///
/// Draws `trials` random contiguous sub-blocks of roughly `subset_size`
/// pixels (square blocks of side ⌊√size⌋; the full block when `subset_size`
/// covers the whole ensemble) and reports the max and mean absolute
/// deviation per channel.
pub fn subset_mean_check<S: Scalar>(
    e: &PixelEnsemble<S>,
    subset_size: usize,
    trials: usize,
    seed: u64,
) -> Result<Vec<SubsetDeviation<S>>> {
    let (c, h, w) = e.pixels.shape();
    if subset_size > h * w {
        return Err(Error::dim("subset size", h * w, subset_size));
    }
    if subset_size == 0 {
        return Err(Error::Empty("subset"));
    }
    let (bh, bw) = if subset_size == h * w {
        (h, w)
    } else {
        let side = ((subset_size as f64).sqrt().floor() as usize).clamp(1, h.min(w));
        (side, side)
    };
    let ensemble_means: Vec<S> = (0..c).map(|ch| e.pixels.channel_mean(ch)).collect();
    let mut rng = rng::stream(seed, 0);
    let mut devs = vec![
        SubsetDeviation {
            max_dev: S::zero(),
            mean_dev: S::zero(),
        };
        c
    ];
    for _ in 0..trials {
        let top = rng::uniform::<f64>(&mut rng, 0.0, (h - bh + 1) as f64) as usize;
        let left = rng::uniform::<f64>(&mut rng, 0.0, (w - bw + 1) as f64) as usize;
        let stats = subset_stats(e, top.min(h - bh), left.min(w - bw), bh, bw);
        for ch in 0..c {
            let dev = (stats.channel_means[ch] - ensemble_means[ch]).abs();
            if dev > devs[ch].max_dev {
                devs[ch].max_dev = dev;
            }
            devs[ch].mean_dev += dev;
        }
    }
    if trials > 0 {
        for d in devs.iter_mut() {
            d.mean_dev /= S::from_usize(trials);
        }
    }
    Ok(devs)
}

/// Per-channel gradient-magnitude image from forward differences with a
/// replicated-edge boundary: sqrt(dx² + dy²).
pub fn edge_augment<S: Scalar>(image: &Tensor<S>) -> Result<Tensor<S>> {
    let (c, h, w) = image.shape();
    if h < 2 || w < 2 {
        return Err(Error::Config(format!(
            "edge augmentation needs at least 2x2 pixels, got {h}x{w}"
        )));
    }
    let mut out = Tensor::zeros(c, h, w);
    for ch in 0..c {
        let plane = image.channel(ch);
        for r in 0..h {
            for col in 0..w {
                let v = plane[r * w + col];
                let dx = if col + 1 < w {
                    plane[r * w + col + 1] - v
                } else {
                    S::zero()
                };
                let dy = if r + 1 < h {
                    plane[(r + 1) * w + col] - v
                } else {
                    S::zero()
                };
                *out.at_mut(ch, r, col) = (dx * dx + dy * dy).sqrt();
            }
        }
    }
    Ok(out)
}
