//! Executable check that a k×k convolution followed by average pooling over
//! all its positions collapses, on i.i.d. pixel blocks, to a 1×1 convolution
//! whose per-channel weight is the spatial sum of the kernel.
//!
//! The two routes are computed independently: the exact route runs a real
//! k×k convolution over a (2k−1)×(2k−1) input and averages the k² responses;
//! the collapsed route applies the summed kernel per pixel and averages over
//! all (2k−1)² pixels. On constant inputs they agree to machine precision;
//! on shuffled natural-image blocks they agree statistically, and the sweep
//! quantifies how much better shuffled inputs fare than structured patches.

use rayon::prelude::*;

use crate::ensemble::sample_ensembles;
use crate::error::{Error, Result};
use crate::nn::{avg_pool_forward, conv2d_forward, KernelWeights};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-channel spatial sums of a kernel: K_c[o][c] = Σ_{m,n} K[o,c,m,n].
#[derive(Debug, Clone, PartialEq)]
pub struct CollapsedKernel<S> {
    pub out_channels: usize,
    pub in_channels: usize,
    /// Row-major [o][c].
    pub sums: Vec<S>,
}

pub fn collapse_kernel<S: Scalar>(kernel: &KernelWeights<S>) -> CollapsedKernel<S> {
    let mut sums = Vec::with_capacity(kernel.out_channels * kernel.in_channels);
    for o in 0..kernel.out_channels {
        for c in 0..kernel.in_channels {
            let mut acc = S::zero();
            for m in 0..kernel.kh {
                for n in 0..kernel.kw {
                    acc += kernel.weight(o, c, m, n);
                }
            }
            sums.push(acc);
        }
    }
    CollapsedKernel {
        out_channels: kernel.out_channels,
        in_channels: kernel.in_channels,
        sums,
    }
}

/// Both routes evaluated on one input, with their difference.
#[derive(Debug, Clone)]
pub struct EquivalenceReport<S> {
    pub k: usize,
    pub channels: usize,
    pub exact_output: S,
    pub collapsed_output: S,
    pub abs_diff: S,
    pub rel_diff: S,
}

/// Evaluate both routes on a C×(2k−1)×(2k−1) input with a single-output
/// k×k×C kernel (stride 1, no padding).
pub fn verify_equivalence<S: Scalar>(
    input: &Tensor<S>,
    kernel: &KernelWeights<S>,
) -> Result<EquivalenceReport<S>> {
    if kernel.out_channels != 1 {
        return Err(Error::dim("kernel output channels", 1, kernel.out_channels));
    }
    if kernel.kh != kernel.kw {
        return Err(Error::dim("square kernel", kernel.kh, kernel.kw));
    }
    let k = kernel.kh;
    if k < 1 {
        return Err(Error::Empty("kernel"));
    }
    let (c, h, w) = input.shape();
    let expect = 2 * k - 1;
    if h != expect {
        return Err(Error::dim("input height", expect, h));
    }
    if w != expect {
        return Err(Error::dim("input width", expect, w));
    }
    if c != kernel.in_channels {
        return Err(Error::dim("input channels", kernel.in_channels, c));
    }

    // Exact route: k×k convolution over all k² positions, averaged.
    let conv = conv2d_forward(input, kernel, 0, 1)?;
    let pooled = avg_pool_forward(&conv, (k, k), 0, 1)?;
    let exact = pooled.data()[0];

    // Collapsed route: summed kernel applied per pixel, averaged over all
    // (2k−1)² pixels. The bias enters both routes identically.
    let collapsed_kernel = collapse_kernel(kernel);
    let mut acc = S::zero();
    for ch in 0..c {
        let kc = collapsed_kernel.sums[ch];
        for &v in input.channel(ch) {
            acc += v * kc;
        }
    }
    let collapsed = kernel.bias[0] + acc / S::from_usize(expect * expect);

    let abs_diff = (exact - collapsed).abs();
    let denom = exact.abs().max(collapsed.abs()).max(S::from_f64(1e-12));
    Ok(EquivalenceReport {
        k,
        channels: c,
        exact_output: exact,
        collapsed_output: collapsed,
        abs_diff,
        rel_diff: abs_diff / denom,
    })
}

/// One sweep row: shuffled vs unshuffled diffs for a kernel size.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub k: usize,
    pub channels: usize,
    pub trials: usize,
    pub shuffled_mean_diff: f64,
    pub unshuffled_mean_diff: f64,
    pub p95_shuffled: f64,
    pub p95_unshuffled: f64,
}

/// Paired comparison over one image: for each trial the same random kernel
/// is applied to a freshly sampled shuffled ensemble and to a random
/// contiguous patch of the same size.
pub fn sweep_equivalence<S: Scalar>(
    image: &Tensor<S>,
    k_list: &[usize],
    trials: usize,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    let (c, h, w) = image.shape();
    let mut rows = Vec::with_capacity(k_list.len());
    for &k in k_list {
        if k < 2 {
            return Err(Error::Config(format!("kernel size {k} must be >= 2")));
        }
        let side = 2 * k - 1;
        if side > h || side > w {
            return Err(Error::dim("image side vs 2k-1", side, h.min(w)));
        }
        // Kernels and patch corners are drawn sequentially so the trial set
        // is independent of how trials are scheduled below.
        let mut master = rng::stream2(seed, k as u64, 0);
        let mut kernels = Vec::with_capacity(trials);
        let mut corners = Vec::with_capacity(trials);
        for _ in 0..trials {
            let weights: Vec<S> = (0..c * k * k)
                .map(|_| rng::uniform_symmetric(&mut master, 1.0))
                .collect();
            kernels.push(KernelWeights::new(1, c, k, k, weights, vec![S::zero()])?);
            let top = rng::uniform::<f64>(&mut master, 0.0, (h - side + 1) as f64) as usize;
            let left = rng::uniform::<f64>(&mut master, 0.0, (w - side + 1) as f64) as usize;
            corners.push((top.min(h - side), left.min(w - side)));
        }
        let ensembles = sample_ensembles(image, trials, (side, side), rng::mix(seed, k as u64))?;

        let diffs: Vec<(f64, f64)> = (0..trials)
            .into_par_iter()
            .map(|t| {
                let shuffled = verify_equivalence(&ensembles[t].pixels, &kernels[t])
                    .expect("shapes fixed above");
                let (top, left) = corners[t];
                let patch = image.crop(top, left, side, side);
                let unshuffled =
                    verify_equivalence(&patch, &kernels[t]).expect("shapes fixed above");
                (shuffled.abs_diff.to_f64(), unshuffled.abs_diff.to_f64())
            })
            .collect();

        let mut shuffled: Vec<f64> = diffs.iter().map(|d| d.0).collect();
        let mut unshuffled: Vec<f64> = diffs.iter().map(|d| d.1).collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        let row = SweepRow {
            k,
            channels: c,
            trials,
            shuffled_mean_diff: mean(&shuffled),
            unshuffled_mean_diff: mean(&unshuffled),
            p95_shuffled: quantile_nearest_rank(&mut shuffled, 0.95),
            p95_unshuffled: quantile_nearest_rank(&mut unshuffled, 0.95),
        };
        rows.push(row);
    }
    Ok(rows)
}

/// Nearest-rank quantile; sorts in place.
pub fn quantile_nearest_rank(values: &mut [f64], q: f64) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(f64::total_cmp);
    let rank = ((q * values.len() as f64).ceil() as usize).clamp(1, values.len());
    values[rank - 1]
}

pub const SWEEP_CSV_HEADER: &str =
    "k,channels,trials,shuffled_mean_diff,unshuffled_mean_diff,p95_shuffled,p95_unshuffled";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.k,
            r.channels,
            r.trials,
            r.shuffled_mean_diff,
            r.unshuffled_mean_diff,
            r.p95_shuffled,
            r.p95_unshuffled
        ));
    }
    out
}
