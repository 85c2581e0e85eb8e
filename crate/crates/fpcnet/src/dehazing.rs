//! Dehazing: haze synthesis, per-patch transmission prediction, full-image
//! transmission maps, atmospheric light, scene recovery, the dark-channel
//! baseline, and PSNR/SSIM.
//!
//! The haze model is I_c = J_c·t + A_c·(1−t); recovery inverts it with the
//! transmission floored at `T_MIN` so thin-haze divisions stay stable.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::models::{forward, NetworkSpec, ParamStore};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::trainer::SampleSource;

/// Transmission floor used when inverting the haze model and when clamping
/// estimated maps.
pub const T_MIN: f64 = 0.1;

/// Default dark-channel parameters (from the classic prior).
pub const DCP_OMEGA: f64 = 0.95;
pub const DCP_WINDOW: usize = 15;

/// Scalar transmission field at pixel resolution, values in [t_min, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct TransmissionMap<S> {
    pub field: Tensor<S>,
}

impl<S: Scalar> TransmissionMap<S> {
    pub fn constant(height: usize, width: usize, t: S) -> Self {
        TransmissionMap {
            field: Tensor::filled(1, height, width, t),
        }
    }
}

/// Global airlight color, components in (0, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AtmosphericLight<S> {
    pub rgb: [S; 3],
}

impl<S: Scalar> AtmosphericLight<S> {
    pub fn uniform(a: S) -> Self {
        AtmosphericLight { rgb: [a, a, a] }
    }
}

/// I_c = J_c·t + A_c·(1−t) with a single t for the whole patch.
pub fn synthesize_hazy_patch<S: Scalar>(
    j: &Tensor<S>,
    t: S,
    a: &AtmosphericLight<S>,
) -> Result<Tensor<S>> {
    if t <= S::zero() || t > S::one() {
        return Err(Error::Config(format!("transmission {t} outside (0, 1]")));
    }
    Ok(hazy_with(j, |_, _| t, a))
}

/// Haze with a per-pixel transmission field (full synthetic images).
pub fn synthesize_hazy_image<S: Scalar>(
    j: &Tensor<S>,
    t_field: &Tensor<S>,
    a: &AtmosphericLight<S>,
) -> Result<Tensor<S>> {
    if t_field.channels() != 1 {
        return Err(Error::dim("t-field channels", 1, t_field.channels()));
    }
    if (t_field.height(), t_field.width()) != (j.height(), j.width()) {
        return Err(Error::dim("t-field height", j.height(), t_field.height()));
    }
    Ok(hazy_with(j, |h, w| t_field.at(0, h, w), a))
}

fn hazy_with<S: Scalar>(
    j: &Tensor<S>,
    t_at: impl Fn(usize, usize) -> S,
    a: &AtmosphericLight<S>,
) -> Tensor<S> {
    let (c, h, w) = j.shape();
    let mut out = Tensor::zeros(c, h, w);
    for ch in 0..c {
        let ac = a.rgb[ch.min(2)];
        for row in 0..h {
            for col in 0..w {
                let t = t_at(row, col);
                *out.at_mut(ch, row, col) = j.at(ch, row, col) * t + ac * (S::one() - t);
            }
        }
    }
    out
}

/// J_c = (I_c − A_c)/max(t, t_min) + A_c. Values are not clipped here; clip
/// to [0,1] on export.
pub fn recover_clear<S: Scalar>(
    i: &Tensor<S>,
    t_map: &TransmissionMap<S>,
    a: &AtmosphericLight<S>,
    t_min: f64,
) -> Result<Tensor<S>> {
    if a.rgb.iter().any(|c| *c <= S::zero()) {
        return Err(Error::Config("atmospheric light must be positive".into()));
    }
    let (c, h, w) = i.shape();
    if (t_map.field.height(), t_map.field.width()) != (h, w) {
        return Err(Error::dim("t-map height", h, t_map.field.height()));
    }
    let floor = S::from_f64(t_min);
    let mut out = Tensor::zeros(c, h, w);
    for ch in 0..c {
        let ac = a.rgb[ch.min(2)];
        for row in 0..h {
            for col in 0..w {
                let t = t_map.field.at(0, row, col).max(floor);
                *out.at_mut(ch, row, col) = (i.at(ch, row, col) - ac) / t + ac;
            }
        }
    }
    Ok(out)
}

/// Single-patch transmission from a trained model; BReLU keeps it in [0,1].
pub fn predict_transmission<S: Scalar>(
    spec: &NetworkSpec,
    params: &ParamStore<S>,
    patch: &Tensor<S>,
) -> Result<S> {
    let out = forward(spec, params, patch)?;
    if out.len() != 1 {
        return Err(Error::dim("transmission outputs", 1, out.len()));
    }
    Ok(out[0])
}

/// Slide the model over the image (edge-aligned windows included), average
/// overlapping predictions per pixel, and clamp to [T_MIN, 1].
pub fn transmission_map<S: Scalar>(
    image: &Tensor<S>,
    spec: &NetworkSpec,
    params: &ParamStore<S>,
    patch: usize,
    stride: usize,
) -> Result<TransmissionMap<S>> {
    let (_, h, w) = image.shape();
    if h < patch || w < patch {
        return Err(Error::dim("image side vs patch", patch, h.min(w)));
    }
    if stride == 0 {
        return Err(Error::Config("stride must be >= 1".into()));
    }
    let tops = window_starts(h, patch, stride);
    let lefts = window_starts(w, patch, stride);
    let windows: Vec<(usize, usize)> = tops
        .iter()
        .flat_map(|&r| lefts.iter().map(move |&c| (r, c)))
        .collect();
    let preds: Vec<S> = windows
        .par_iter()
        .map(|&(top, left)| {
            let block = image.crop(top, left, patch, patch);
            predict_transmission(spec, params, &block)
        })
        .collect::<Result<_>>()?;

    let mut sum = vec![S::zero(); h * w];
    let mut count = vec![0u32; h * w];
    for (&(top, left), &t) in windows.iter().zip(&preds) {
        for r in top..top + patch {
            for c in left..left + patch {
                sum[r * w + c] += t;
                count[r * w + c] += 1;
            }
        }
    }
    let floor = S::from_f64(T_MIN);
    let data: Vec<S> = sum
        .into_iter()
        .zip(count)
        .map(|(s, n)| (s / S::from_usize(n as usize)).max(floor).min(S::one()))
        .collect();
    Ok(TransmissionMap {
        field: Tensor::new(1, h, w, data)?,
    })
}

fn window_starts(extent: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut starts: Vec<usize> = (0..=extent - patch).step_by(stride).collect();
    if *starts.last().expect("nonempty") != extent - patch {
        starts.push(extent - patch);
    }
    starts
}

/// Min over channels, then a centered `window`×`window` min (shrunk at the
/// borders).
pub fn dark_channel<S: Scalar>(i: &Tensor<S>, window: usize) -> Tensor<S> {
    let (c, h, w) = i.shape();
    let mut min_plane = vec![S::infinity(); h * w];
    for ch in 0..c {
        for (m, &v) in min_plane.iter_mut().zip(i.channel(ch)) {
            if v < *m {
                *m = v;
            }
        }
    }
    erode_min(&min_plane, h, w, window)
}

fn erode_min<S: Scalar>(plane: &[S], h: usize, w: usize, window: usize) -> Tensor<S> {
    let radius = window / 2;
    let mut out = Tensor::zeros(1, h, w);
    for r in 0..h {
        let r_lo = r.saturating_sub(radius);
        let r_hi = (r + radius + 1).min(h);
        for c in 0..w {
            let c_lo = c.saturating_sub(radius);
            let c_hi = (c + radius + 1).min(w);
            let mut best = S::infinity();
            for rr in r_lo..r_hi {
                for cc in c_lo..c_hi {
                    let v = plane[rr * w + cc];
                    if v < best {
                        best = v;
                    }
                }
            }
            *out.at_mut(0, r, c) = best;
        }
    }
    out
}

/// Dark-channel airlight: among the 0.1% of pixels with the highest dark
/// channel value (ties included), take the per-channel maximum intensity.
pub fn estimate_atmospheric_light<S: Scalar>(i: &Tensor<S>) -> AtmosphericLight<S> {
    let (_, h, w) = i.shape();
    let dark = dark_channel(i, DCP_WINDOW);
    let mut sorted: Vec<S> = dark.data().to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
    let count = ((h * w) as f64 * 0.001).ceil().max(1.0) as usize;
    let threshold = sorted[count.min(sorted.len()) - 1];
    let mut rgb = [S::zero(); 3];
    for (idx, &d) in dark.data().iter().enumerate() {
        if d >= threshold {
            for (ch, slot) in rgb.iter_mut().enumerate() {
                let v = i.data()[ch * h * w + idx];
                if v > *slot {
                    *slot = v;
                }
            }
        }
    }
    // Keep the invariant A ∈ (0,1] even for degenerate black inputs.
    for c in rgb.iter_mut() {
        *c = c.max(S::from_f64(1e-6));
    }
    AtmosphericLight { rgb }
}

/// Classic prior: t = 1 − ω · min-over-window min-over-channel (I_c/A_c),
/// clamped to [T_MIN, 1].
pub fn dcp_transmission<S: Scalar>(
    i: &Tensor<S>,
    a: &AtmosphericLight<S>,
    omega: f64,
    window: usize,
) -> Result<TransmissionMap<S>> {
    if a.rgb.iter().any(|c| *c <= S::zero()) {
        return Err(Error::Config("atmospheric light must be positive".into()));
    }
    let (c, h, w) = i.shape();
    let mut ratio_min = vec![S::infinity(); h * w];
    for ch in 0..c {
        let ac = a.rgb[ch.min(2)];
        for (m, &v) in ratio_min.iter_mut().zip(i.channel(ch)) {
            let r = v / ac;
            if r < *m {
                *m = r;
            }
        }
    }
    let eroded = erode_min(&ratio_min, h, w, window);
    let om = S::from_f64(omega);
    let floor = S::from_f64(T_MIN);
    let field = eroded.map(|v| (S::one() - om * v).max(floor).min(S::one()));
    Ok(TransmissionMap { field })
}

/// Whole-patch variant used as the per-record baseline: the window is the
/// entire patch.
pub fn dcp_transmission_patch<S: Scalar>(
    patch: &Tensor<S>,
    a: &AtmosphericLight<S>,
    omega: f64,
) -> S {
    let (c, _, _) = patch.shape();
    let mut m = S::infinity();
    for ch in 0..c {
        let ac = a.rgb[ch.min(2)];
        for &v in patch.channel(ch) {
            let r = v / ac;
            if r < m {
                m = r;
            }
        }
    }
    (S::one() - S::from_f64(omega) * m)
        .max(S::from_f64(T_MIN))
        .min(S::one())
}

/// Peak signal-to-noise ratio in dB for images in [0,1], capped at 99.
pub fn psnr<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<S> {
    if a.shape() != b.shape() {
        return Err(Error::dim("psnr elements", a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(Error::Empty("psnr input"));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<S>()
        / S::from_usize(a.len());
    let cap = S::from_f64(99.0);
    if mse == S::zero() {
        return Ok(cap);
    }
    let db = S::from_f64(10.0) * (S::one() / mse).log10();
    Ok(db.min(cap))
}

/// Single-scale structural similarity with an 11×11 Gaussian window
/// (σ = 1.5), k1 = 0.01, k2 = 0.03, dynamic range 1, averaged over valid
/// window positions and channels.
pub fn ssim<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<S> {
    if a.shape() != b.shape() {
        return Err(Error::dim("ssim elements", a.len(), b.len()));
    }
    let (channels, h, w) = a.shape();
    const WIN: usize = 11;
    if h < WIN || w < WIN {
        return Err(Error::dim("ssim image side", WIN, h.min(w)));
    }
    let kernel = gaussian_kernel::<S>(WIN, 1.5);
    let c1 = S::from_f64(0.01 * 0.01);
    let c2 = S::from_f64(0.03 * 0.03);
    let mut total = S::zero();
    let mut positions = 0usize;
    for ch in 0..channels {
        let pa = a.channel(ch);
        let pb = b.channel(ch);
        for top in 0..=h - WIN {
            for left in 0..=w - WIN {
                let mut mu_a = S::zero();
                let mut mu_b = S::zero();
                let mut aa = S::zero();
                let mut bb = S::zero();
                let mut ab = S::zero();
                for r in 0..WIN {
                    for c in 0..WIN {
                        let g = kernel[r * WIN + c];
                        let x = pa[(top + r) * w + left + c];
                        let y = pb[(top + r) * w + left + c];
                        mu_a += g * x;
                        mu_b += g * y;
                        aa += g * x * x;
                        bb += g * y * y;
                        ab += g * x * y;
                    }
                }
                let var_a = aa - mu_a * mu_a;
                let var_b = bb - mu_b * mu_b;
                let cov = ab - mu_a * mu_b;
                let two = S::from_f64(2.0);
                let num = (two * mu_a * mu_b + c1) * (two * cov + c2);
                let den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
                total += num / den;
                positions += 1;
            }
        }
    }
    Ok(total / S::from_usize(positions))
}

fn gaussian_kernel<S: Scalar>(size: usize, sigma: f64) -> Vec<S> {
    let center = (size as f64 - 1.0) / 2.0;
    let mut k = vec![0.0f64; size * size];
    let mut sum = 0.0;
    for r in 0..size {
        for c in 0..size {
            let dr = r as f64 - center;
            let dc = c as f64 - center;
            let v = (-(dr * dr + dc * dc) / (2.0 * sigma * sigma)).exp();
            k[r * size + c] = v;
            sum += v;
        }
    }
    k.into_iter().map(|v| S::from_f64(v / sum)).collect()
}

// --- Synthetic patch dataset -------------------------------------------------

#[derive(Debug, Clone)]
pub struct DhRecord<S> {
    pub patch: Tensor<S>,
    pub t: S,
    pub a: [S; 3],
    pub src_image: u32,
    pub test: bool,
}

#[derive(Debug, Clone)]
pub struct DhDataset<S> {
    pub patch_size: usize,
    pub records: Vec<DhRecord<S>>,
}

impl<S: Scalar> DhDataset<S> {
    /// Sample `patches / haze_levels` clear patches and haze each at
    /// `haze_levels` transmissions drawn from `t_range`; airlight is drawn
    /// once per source image from `a_range`. Every `test_every`-th source
    /// image is held out.
    #[allow(clippy::too_many_arguments)]
    pub fn synthesize(
        images: &[Tensor<S>],
        patches: usize,
        patch_size: usize,
        haze_levels: usize,
        t_range: (f64, f64),
        a_range: (f64, f64),
        test_every: usize,
        seed: u64,
    ) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Empty("clear images"));
        }
        if haze_levels == 0 || patches < haze_levels {
            return Err(Error::Config("patches must be >= haze_levels >= 1".into()));
        }
        if t_range.0 <= 0.0 || t_range.1 > 1.0 || t_range.1 < t_range.0 {
            return Err(Error::Config(format!(
                "t range {t_range:?} must lie inside (0, 1]"
            )));
        }
        for img in images {
            if img.height() < patch_size || img.width() < patch_size {
                return Err(Error::dim(
                    "clear image side",
                    patch_size,
                    img.height().min(img.width()),
                ));
            }
        }
        let airlight: Vec<S> = (0..images.len())
            .map(|i| {
                let mut r = rng::stream2(seed, 5, i as u64);
                rng::uniform(&mut r, a_range.0, a_range.1)
            })
            .collect();
        let clear_patches = patches / haze_levels;
        let mut records = Vec::with_capacity(clear_patches * haze_levels);
        for p in 0..clear_patches {
            let mut r = rng::stream2(seed, 4, p as u64);
            let img_idx =
                (rng::uniform::<f64>(&mut r, 0.0, images.len() as f64) as usize).min(images.len() - 1);
            let img = &images[img_idx];
            let top = (rng::uniform::<f64>(&mut r, 0.0, (img.height() - patch_size + 1) as f64)
                as usize)
                .min(img.height() - patch_size);
            let left = (rng::uniform::<f64>(&mut r, 0.0, (img.width() - patch_size + 1) as f64)
                as usize)
                .min(img.width() - patch_size);
            let clear = img.crop(top, left, patch_size, patch_size);
            let a = AtmosphericLight::uniform(airlight[img_idx]);
            let test = test_every > 0 && img_idx % test_every == 0;
            for _ in 0..haze_levels {
                let t: S = rng::uniform(&mut r, t_range.0, t_range.1);
                let hazy = synthesize_hazy_patch(&clear, t, &a)?;
                records.push(DhRecord {
                    patch: hazy,
                    t,
                    a: a.rgb,
                    src_image: img_idx as u32,
                    test,
                });
            }
        }
        Ok(DhDataset {
            patch_size,
            records,
        })
    }

    pub fn train_indices(&self) -> Vec<usize> {
        (0..self.records.len())
            .filter(|&i| !self.records[i].test)
            .collect()
    }

    pub fn test_indices(&self) -> Vec<usize> {
        (0..self.records.len())
            .filter(|&i| self.records[i].test)
            .collect()
    }

    /// Binary layout (little-endian): magic "FPDH", version u8 = 1,
    /// channels u8, patch_size u16, count u64, then per record:
    /// src_image u32, test u8, t f32, a 3×f32, pixels C·P·P f32 in
    /// (c, h, w) order.
    pub fn save_bin(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut out: Vec<u8> = Vec::new();
        out.extend_from_slice(b"FPDH");
        out.push(1u8);
        out.push(3u8);
        out.extend_from_slice(&(self.patch_size as u16).to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for rec in &self.records {
            out.extend_from_slice(&rec.src_image.to_le_bytes());
            out.push(rec.test as u8);
            out.extend_from_slice(&(rec.t.to_f64() as f32).to_le_bytes());
            for c in rec.a {
                out.extend_from_slice(&(c.to_f64() as f32).to_le_bytes());
            }
            for &v in rec.patch.data() {
                out.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
            }
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load_bin(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path_str = path.as_ref().display().to_string();
        let bytes = std::fs::read(&path)?;
        let fail = |offset: usize, message: &str| Error::Malformed {
            path: path_str.clone(),
            offset,
            message: message.into(),
        };
        if bytes.len() < 16 || &bytes[0..4] != b"FPDH" {
            return Err(fail(0, "expected FPDH magic"));
        }
        if bytes[4] != 1 {
            return Err(fail(4, "unsupported version"));
        }
        let channels = bytes[5] as usize;
        let patch_size = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
        let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let record_len = 4 + 1 + 4 + 12 + channels * patch_size * patch_size * 4;
        let expected = 16 + count * record_len;
        if bytes.len() != expected {
            return Err(fail(
                bytes.len().min(expected),
                &format!("expected {expected} bytes, found {}", bytes.len()),
            ));
        }
        let f32_at = |pos: usize| -> f32 {
            f32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap())
        };
        let mut records = Vec::with_capacity(count);
        let mut pos = 16;
        for _ in 0..count {
            let src_image = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap());
            let test = bytes[pos + 4] != 0;
            let t = S::from_f64(f32_at(pos + 5) as f64);
            let a = [
                S::from_f64(f32_at(pos + 9) as f64),
                S::from_f64(f32_at(pos + 13) as f64),
                S::from_f64(f32_at(pos + 17) as f64),
            ];
            let mut data = Vec::with_capacity(channels * patch_size * patch_size);
            let mut p = pos + 21;
            for _ in 0..channels * patch_size * patch_size {
                data.push(S::from_f64(f32_at(p) as f64));
                p += 4;
            }
            records.push(DhRecord {
                patch: Tensor::new(channels, patch_size, patch_size, data)?,
                t,
                a,
                src_image,
                test,
            });
            pos += record_len;
        }
        Ok(DhDataset {
            patch_size,
            records,
        })
    }
}

/// Training stream over a fixed list of record indices.
pub struct DhSampleSource<'a, S> {
    data: &'a DhDataset<S>,
    indices: Vec<usize>,
}

impl<'a, S: Scalar> DhSampleSource<'a, S> {
    pub fn new(data: &'a DhDataset<S>, indices: Vec<usize>) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Empty("training records"));
        }
        Ok(DhSampleSource { data, indices })
    }
}

impl<S: Scalar> SampleSource<S> for DhSampleSource<'_, S> {
    fn len(&self) -> usize {
        self.indices.len()
    }
    fn sample(&self, index: usize) -> (Tensor<S>, Vec<S>) {
        let rec = &self.data.records[self.indices[index]];
        (rec.patch.clone(), vec![rec.t])
    }
}

/// Mean squared error of model transmissions over the given records.
pub fn transmission_mse<S: Scalar>(
    spec: &NetworkSpec,
    params: &ParamStore<S>,
    data: &DhDataset<S>,
    indices: &[usize],
) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::Empty("eval records"));
    }
    let errs: Vec<f64> = indices
        .par_iter()
        .map(|&i| {
            let rec = &data.records[i];
            predict_transmission(spec, params, &rec.patch)
                .map(|p| (p.to_f64() - rec.t.to_f64()).powi(2))
        })
        .collect::<Result<_>>()?;
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}

/// Patch-level dark-channel baseline MSE over the same records, using each
/// record's stored airlight.
pub fn dcp_patch_mse<S: Scalar>(data: &DhDataset<S>, indices: &[usize], omega: f64) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::Empty("eval records"));
    }
    let errs: Vec<f64> = indices
        .par_iter()
        .map(|&i| {
            let rec = &data.records[i];
            let a = AtmosphericLight { rgb: rec.a };
            let p = dcp_transmission_patch(&rec.patch, &a, omega);
            (p.to_f64() - rec.t.to_f64()).powi(2)
        })
        .collect();
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}
