//! Color constancy: synthetic casts, illuminant estimation by median
//! pooling over pixel-ensembles, correction, angular-error metrics, and the
//! gray-world baseline.
//!
//! Casts are parameterized as (R/G, 1, B/G): applying a cast multiplies each
//! channel of the reflectance image, correcting divides by the cast rescaled
//! to G = 1. Estimates are stored unit-L2-normalized; angular error is scale
//! invariant, so either convention compares cleanly against ground truth.

use rayon::prelude::*;

use crate::ensemble::sample_ensembles;
use crate::error::{Error, Result};
use crate::models::{forward, NetworkSpec, ParamStore};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::trainer::SampleSource;

/// A per-channel multiplicative color cast, components strictly positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IlluminantEstimate<S> {
    rgb: [S; 3],
}

impl<S: Scalar> IlluminantEstimate<S> {
    pub fn new(rgb: [S; 3]) -> Result<Self> {
        if rgb.iter().any(|c| *c <= S::zero() || !c.is_finite()) {
            return Err(Error::Config(format!(
                "illuminant components must be positive and finite, got {rgb:?}"
            )));
        }
        Ok(IlluminantEstimate { rgb })
    }

    pub fn rgb(&self) -> [S; 3] {
        self.rgb
    }

    /// Unit L2 norm (the storage convention).
    pub fn normalized(&self) -> Self {
        let n = self.rgb.iter().map(|c| *c * *c).sum::<S>().sqrt();
        IlluminantEstimate {
            rgb: [self.rgb[0] / n, self.rgb[1] / n, self.rgb[2] / n],
        }
    }

    /// Rescaled so the G component is 1 (the brightness-preserving
    /// convention used when dividing a cast out of an image).
    pub fn g_normalized(&self) -> Self {
        let g = self.rgb[1];
        IlluminantEstimate {
            rgb: [self.rgb[0] / g, S::one(), self.rgb[2] / g],
        }
    }
}

/// I_c = J_c · E_c, with E used at the scale given.
pub fn apply_cast<S: Scalar>(j: &Tensor<S>, e: &IlluminantEstimate<S>) -> Result<Tensor<S>> {
    if j.channels() != 3 {
        return Err(Error::dim("image channels", 3, j.channels()));
    }
    let mut out = j.clone();
    for c in 0..3 {
        let factor = e.rgb[c];
        for v in out.channel_mut(c) {
            *v *= factor;
        }
    }
    Ok(out)
}

/// J_c = I_c / E_c with E rescaled so its G component is 1.
pub fn correct_image<S: Scalar>(i: &Tensor<S>, e: &IlluminantEstimate<S>) -> Result<Tensor<S>> {
    if i.channels() != 3 {
        return Err(Error::dim("image channels", 3, i.channels()));
    }
    let e = e.g_normalized();
    let mut out = i.clone();
    for c in 0..3 {
        let inv = S::one() / e.rgb[c];
        for v in out.channel_mut(c) {
            *v *= inv;
        }
    }
    Ok(out)
}

/// Angle between two cast vectors in degrees: arccos of their cosine
/// similarity, with the argument clamped into [−1, 1]. Any nonzero vectors
/// are accepted; the result is invariant to positive rescaling of either.
pub fn angular_error<S: Scalar>(est: &[S; 3], gt: &[S; 3]) -> Result<S> {
    let dot = est.iter().zip(gt).map(|(a, b)| *a * *b).sum::<S>();
    let na = est.iter().map(|c| *c * *c).sum::<S>().sqrt();
    let nb = gt.iter().map(|c| *c * *c).sum::<S>().sqrt();
    if na == S::zero() || nb == S::zero() {
        return Err(Error::Empty("illuminant vector"));
    }
    let cos = (dot / (na * nb)).max(-S::one()).min(S::one());
    Ok(cos.acos() * S::from_f64(180.0 / std::f64::consts::PI))
}

/// Angular error between two estimates.
pub fn estimate_angular_error<S: Scalar>(
    est: &IlluminantEstimate<S>,
    gt: &IlluminantEstimate<S>,
) -> Result<S> {
    angular_error(&est.rgb, &gt.rgb)
}

/// Gray-world baseline: the cast is proportional to the per-channel mean.
pub fn gray_world<S: Scalar>(image: &Tensor<S>) -> Result<IlluminantEstimate<S>> {
    if image.channels() != 3 {
        return Err(Error::dim("image channels", 3, image.channels()));
    }
    let means = [
        image.channel_mean(0),
        image.channel_mean(1),
        image.channel_mean(2),
    ];
    IlluminantEstimate::new(means).map(|e| e.normalized())
}

/// Run the network on `n_ensembles` pixel-ensembles and median-pool the
/// per-channel predictions (lower median for even counts).
///
/// Raw head outputs can be non-positive for untrained models; medians are
/// floored at 1e-6 before normalization so the estimate stays valid.
pub fn estimate_illuminant<S: Scalar>(
    image: &Tensor<S>,
    spec: &NetworkSpec,
    params: &ParamStore<S>,
    n_ensembles: usize,
    seed: u64,
) -> Result<IlluminantEstimate<S>> {
    if n_ensembles == 0 {
        return Err(Error::Empty("ensembles"));
    }
    if spec.output_len()? != 3 {
        return Err(Error::dim("prediction heads", 3, spec.output_len()?));
    }
    let (_, h, w) = spec.input_shape;
    let ensembles = sample_ensembles(image, n_ensembles, (h, w), seed)?;
    let preds: Vec<Vec<S>> = ensembles
        .par_iter()
        .map(|e| forward(spec, params, &e.pixels))
        .collect::<Result<_>>()?;
    let mut rgb = [S::zero(); 3];
    for (c, slot) in rgb.iter_mut().enumerate() {
        let mut column: Vec<S> = preds.iter().map(|p| p[c]).collect();
        *slot = lower_median(&mut column).max(S::from_f64(1e-6));
    }
    IlluminantEstimate::new(rgb).map(|e| e.normalized())
}

/// Lower median: element at rank ⌈n/2⌉ (1-based) of the sorted values.
pub fn lower_median<S: Scalar>(values: &mut [S]) -> S {
    assert!(!values.is_empty());
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    values[(values.len() - 1) / 2]
}

/// The standard robust error statistics over a set of angular errors.
#[derive(Debug, Clone, PartialEq)]
pub struct CcMetrics<S> {
    pub mean: S,
    pub median: S,
    pub trimean: S,
    pub best25: S,
    pub worst25: S,
    pub q95: S,
}

pub const CC_METRICS_CSV_HEADER: &str = "method,mean,median,trimean,best25,worst25,q95";

impl<S: Scalar> CcMetrics<S> {
    pub fn csv_row(&self, method: &str) -> String {
        format!(
            "{method},{},{},{},{},{},{}",
            self.mean, self.median, self.trimean, self.best25, self.worst25, self.q95
        )
    }
}

/// Conventions: lower median; quartiles and the 95% quantile by nearest
/// rank; best/worst-25% average the lowest/highest ⌊n/4⌋ values (at least
/// one).
pub fn cc_metrics<S: Scalar>(errors: &[S]) -> Result<CcMetrics<S>> {
    if errors.is_empty() {
        return Err(Error::Empty("error list"));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = sorted.len();
    let nearest_rank = |q: f64| -> S {
        let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
        sorted[rank - 1]
    };
    let mean = sorted.iter().copied().sum::<S>() / S::from_usize(n);
    let median = sorted[(n - 1) / 2];
    let q1 = nearest_rank(0.25);
    let q3 = nearest_rank(0.75);
    let trimean = (q1 + median + median + q3) / S::from_f64(4.0);
    let quarter = (n / 4).max(1);
    let best25 = sorted[..quarter].iter().copied().sum::<S>() / S::from_usize(quarter);
    let worst25 = sorted[n - quarter..].iter().copied().sum::<S>() / S::from_usize(quarter);
    Ok(CcMetrics {
        mean,
        median,
        trimean,
        best25,
        worst25,
        q95: nearest_rank(0.95),
    })
}

// --- Synthetic-cast dataset --------------------------------------------------
//
// On disk: `<root>/clear/*.ppm` plus `<root>/casts.csv` with rows
// image,e_r,e_g,e_b (several casts per image allowed). In memory the clear
// images stay uncast; casted pixels are produced on the fly, so nothing is
// ever clipped before training.

#[derive(Debug, Clone)]
pub struct CcDataset<S> {
    /// (file name, clear image), sorted by name.
    pub images: Vec<(String, Tensor<S>)>,
    /// Per image: casts as (R/G, 1, B/G) triples.
    pub casts: Vec<Vec<[S; 3]>>,
}

impl<S: Scalar> CcDataset<S> {
    /// Draw `casts_per_image` casts per clear image with R/G and B/G uniform
    /// in `e_range`.
    pub fn synthesize(
        images: Vec<(String, Tensor<S>)>,
        casts_per_image: usize,
        e_range: (f64, f64),
        seed: u64,
    ) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Empty("clear images"));
        }
        if e_range.0 <= 0.0 || e_range.1 < e_range.0 {
            return Err(Error::Config(format!(
                "cast range {e_range:?} must be positive and ordered"
            )));
        }
        let mut images = images;
        images.sort_by(|a, b| a.0.cmp(&b.0));
        let mut casts = Vec::with_capacity(images.len());
        for i in 0..images.len() {
            let mut r = rng::stream2(seed, 2, i as u64);
            let mut per_image = Vec::with_capacity(casts_per_image);
            for _ in 0..casts_per_image {
                let rg: S = rng::uniform(&mut r, e_range.0, e_range.1);
                let bg: S = rng::uniform(&mut r, e_range.0, e_range.1);
                per_image.push([rg, S::one(), bg]);
            }
            casts.push(per_image);
        }
        Ok(CcDataset { images, casts })
    }

    /// Every `test_every`-th image (by sorted index) is held out.
    pub fn split(&self, test_every: usize) -> (Vec<usize>, Vec<usize>) {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for i in 0..self.images.len() {
            if test_every > 0 && i % test_every == 0 {
                test.push(i);
            } else {
                train.push(i);
            }
        }
        (train, test)
    }

    pub fn save_dir(&self, root: impl AsRef<std::path::Path>) -> Result<()> {
        let root = root.as_ref();
        let clear = root.join("clear");
        std::fs::create_dir_all(&clear)?;
        let mut csv = String::from("image,e_r,e_g,e_b\n");
        for ((name, image), casts) in self.images.iter().zip(&self.casts) {
            crate::netpbm::ppm_write(image, clear.join(name))?;
            for e in casts {
                csv.push_str(&format!(
                    "{name},{},{},{}\n",
                    e[0].to_f64(),
                    e[1].to_f64(),
                    e[2].to_f64()
                ));
            }
        }
        std::fs::write(root.join("casts.csv"), csv)?;
        Ok(())
    }

    pub fn load_dir(root: impl AsRef<std::path::Path>) -> Result<Self> {
        let root = root.as_ref();
        let clear = root.join("clear");
        let mut names: Vec<String> = std::fs::read_dir(&clear)?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n.ends_with(".ppm"))
            .collect();
        names.sort();
        if names.is_empty() {
            return Err(Error::Empty("clear images"));
        }
        let mut images = Vec::with_capacity(names.len());
        for name in &names {
            images.push((name.clone(), crate::netpbm::ppm_read(clear.join(name))?));
        }
        let csv_path = root.join("casts.csv");
        let text = std::fs::read_to_string(&csv_path)?;
        let mut casts = vec![Vec::new(); images.len()];
        for (lineno, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            let bad = |msg: &str| Error::Malformed {
                path: csv_path.display().to_string(),
                offset: lineno,
                message: msg.into(),
            };
            if fields.len() != 4 {
                return Err(bad("expected image,e_r,e_g,e_b"));
            }
            let idx = names
                .iter()
                .position(|n| n == fields[0])
                .ok_or_else(|| bad("cast references unknown image"))?;
            let mut e = [S::zero(); 3];
            for (c, f) in fields[1..].iter().enumerate() {
                e[c] = S::from_f64(f.parse::<f64>().map_err(|_| bad("bad cast value"))?);
            }
            casts[idx].push(e);
        }
        Ok(CcDataset { images, casts })
    }
}

/// Training stream over a cast dataset: each index deterministically picks a
/// train image, one of its casts, and a fresh pixel-ensemble of the casted
/// (optionally edge-augmented) image. Edge images share the cast target
/// because the gradient magnitude scales linearly per channel.
pub struct CcSampleSource<'a, S> {
    data: &'a CcDataset<S>,
    train_images: Vec<usize>,
    edge_images: Vec<Tensor<S>>,
    ensemble_shape: (usize, usize),
    ensembles_per_cast: usize,
    casts_per_image: usize,
    edge_augment: bool,
    seed: u64,
}

impl<'a, S: Scalar> CcSampleSource<'a, S> {
    pub fn new(
        data: &'a CcDataset<S>,
        train_images: Vec<usize>,
        ensemble_shape: (usize, usize),
        ensembles_per_cast: usize,
        edge_augment: bool,
        seed: u64,
    ) -> Result<Self> {
        if train_images.is_empty() {
            return Err(Error::Empty("training images"));
        }
        let casts_per_image = data.casts.first().map(|c| c.len()).unwrap_or(0);
        if casts_per_image == 0 {
            return Err(Error::Empty("casts"));
        }
        let edge_images = if edge_augment {
            train_images
                .iter()
                .map(|&i| crate::ensemble::edge_augment(&data.images[i].1))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        Ok(CcSampleSource {
            data,
            train_images,
            edge_images,
            ensemble_shape,
            ensembles_per_cast,
            casts_per_image,
            edge_augment,
            seed,
        })
    }
}

impl<S: Scalar> SampleSource<S> for CcSampleSource<'_, S> {
    fn len(&self) -> usize {
        let base = self.train_images.len() * self.casts_per_image * self.ensembles_per_cast;
        if self.edge_augment {
            base * 2
        } else {
            base
        }
    }

    fn sample(&self, index: usize) -> (Tensor<S>, Vec<S>) {
        let base = self.train_images.len() * self.casts_per_image * self.ensembles_per_cast;
        let edge = index >= base;
        let idx = index % base;
        let img_pos = idx / (self.casts_per_image * self.ensembles_per_cast);
        let cast_idx = (idx / self.ensembles_per_cast) % self.casts_per_image;
        let img_idx = self.train_images[img_pos];
        let source = if edge {
            &self.edge_images[img_pos]
        } else {
            &self.data.images[img_idx].1
        };
        let e = self.data.casts[img_idx][cast_idx];
        let (h, w) = self.ensemble_shape;
        let (_, src_h, src_w) = source.shape();
        let mut r = rng::stream2(self.seed, 3, index as u64);
        let picked = rand::seq::index::sample(&mut r, src_h * src_w, h * w);
        let mut block = Tensor::zeros(3, h, w);
        for (pos, src) in picked.iter().enumerate() {
            for c in 0..3 {
                block.data_mut()[c * h * w + pos] = source.data()[c * src_h * src_w + src] * e[c];
            }
        }
        let target = IlluminantEstimate { rgb: e }.normalized();
        (block, target.rgb().to_vec())
    }
}

/// Paired angular errors on held-out images: the model (median-pooled over
/// `n_ensembles`) and the gray-world baseline on the same casted images.
pub fn eval_cc<S: Scalar>(
    data: &CcDataset<S>,
    test_images: &[usize],
    spec: &NetworkSpec,
    params: &ParamStore<S>,
    n_ensembles: usize,
    seed: u64,
) -> Result<(Vec<S>, Vec<S>)> {
    let mut model_errors = Vec::new();
    let mut gw_errors = Vec::new();
    for (k, &i) in test_images.iter().enumerate() {
        for (c, e) in data.casts[i].iter().enumerate() {
            let gt = IlluminantEstimate::new(*e)?;
            let casted = apply_cast(&data.images[i].1, &gt)?;
            let est = estimate_illuminant(
                &casted,
                spec,
                params,
                n_ensembles,
                rng::mix(seed, (k * 1000 + c) as u64),
            )?;
            model_errors.push(estimate_angular_error(&est, &gt)?);
            gw_errors.push(estimate_angular_error(&gray_world(&casted)?, &gt)?);
        }
    }
    Ok((model_errors, gw_errors))
}
