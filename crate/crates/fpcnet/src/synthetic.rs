//! Procedural test images.
//!
//! The benchmark corpora this crate's applications were designed around are
//! licensed datasets, so everything here is generated: deterministic,
//! seed-addressed scenes with the statistics the pipelines care about --
//! textured regions, smooth gradients, dark shadows, and near-white
//! highlights. Desk-scale experiments and the test suites all draw from
//! these generators.

use rand::Rng;

use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Mosaic of random-colored 2×2 cells with mild noise: strong structured
/// contrast at the convolution-window scale (cells any larger leave too
/// many small windows inside a single cell, which weakens the structured
/// signal the kernel-collapse sweeps compare against).
pub fn textured_image<S: Scalar>(height: usize, width: usize, seed: u64) -> Tensor<S> {
    let mut r = rng::stream(seed, 0);
    let cell = 2usize;
    let cells_y = height.div_ceil(cell);
    let cells_x = width.div_ceil(cell);
    let mut colors = Vec::with_capacity(cells_y * cells_x * 3);
    for _ in 0..cells_y * cells_x * 3 {
        colors.push(r.gen::<f64>());
    }
    let mut img = Tensor::zeros(3, height, width);
    for ch in 0..3 {
        for row in 0..height {
            for col in 0..width {
                let cidx = ((row / cell) * cells_x + col / cell) * 3 + ch;
                let noise = (r.gen::<f64>() - 0.5) * 0.04;
                *img.at_mut(ch, row, col) = S::from_f64((colors[cidx] + noise).clamp(0.0, 1.0));
            }
        }
    }
    img
}

/// A haze-free, canonically lit scene: tinted background gradient, colored
/// blocks and ellipses, dark shadow patches, and a sprinkle of near-white
/// specular highlights. Some scenes carry a bright low-saturation band.
pub fn clear_image<S: Scalar>(height: usize, width: usize, seed: u64) -> Tensor<S> {
    scene(height, width, seed, false)
}

/// Like [`clear_image`] but always with a sky-like band: an outdoor scene
/// with a large region that has no dark pixels at all, the classic failure
/// mode of dark-channel transmission estimates.
pub fn outdoor_scene<S: Scalar>(height: usize, width: usize, seed: u64) -> Tensor<S> {
    scene(height, width, seed, true)
}

fn scene<S: Scalar>(height: usize, width: usize, seed: u64, force_sky: bool) -> Tensor<S> {
    let mut r = rng::stream(seed, 0);
    // Per-image tint biases the scene average away from gray.
    let tint = [
        0.5 + 0.5 * r.gen::<f64>(),
        0.5 + 0.5 * r.gen::<f64>(),
        0.5 + 0.5 * r.gen::<f64>(),
    ];
    let top: Vec<f64> = (0..3).map(|c| (0.45 + 0.5 * r.gen::<f64>()) * tint[c]).collect();
    let bottom: Vec<f64> = (0..3).map(|c| (0.15 + 0.5 * r.gen::<f64>()) * tint[c]).collect();

    let mut img = Tensor::zeros(3, height, width);
    for ch in 0..3 {
        for row in 0..height {
            let t = row as f64 / (height - 1).max(1) as f64;
            let v = top[ch] * (1.0 - t) + bottom[ch] * t;
            let plane = img.channel_mut(ch);
            for col in 0..width {
                plane[row * width + col] = S::from_f64(v);
            }
        }
    }

    // Some scenes get a bright, low-saturation band (sky or a lit wall).
    // It creates large regions without dark pixels; more of them would also
    // flood the patch set with transmission-ambiguous uniform blocks.
    // Indoor-ish scenes paint it here so objects may partially occlude it;
    // forced outdoor scenes paint it after the objects, keeping it intact.
    let paint_band = |r: &mut rand_chacha::ChaCha8Rng, img: &mut Tensor<S>| {
        let band = height * 3 / 10 + (r.gen::<f64>() * 0.2 * height as f64) as usize;
        let base = 0.6 + 0.2 * r.gen::<f64>();
        let jitter: Vec<f64> = (0..3).map(|_| (r.gen::<f64>() - 0.5) * 0.08).collect();
        for ch in 0..3 {
            let v = (base + jitter[ch]).clamp(0.0, 1.0);
            for row in 0..band.min(height) {
                let plane = img.channel_mut(ch);
                for col in 0..width {
                    plane[row * width + col] = S::from_f64(v);
                }
            }
        }
    };
    if !force_sky && r.gen::<f64>() < 0.4 {
        paint_band(&mut r, &mut img);
    }

    // Colored objects: rectangles and ellipses, some very dark (shadows),
    // some bright and nearly gray (white walls, pale surfaces).
    let objects = 6 + (r.gen::<u64>() % 7) as usize;
    for _ in 0..objects {
        let roll = r.gen::<f64>();
        let color: Vec<f64> = if roll < 0.3 {
            // Dark object.
            (0..3)
                .map(|c| (0.02 + 0.18 * r.gen::<f64>()) * tint[c])
                .collect()
        } else if roll < 0.4 {
            // Bright low-saturation object.
            let base = 0.7 + 0.25 * r.gen::<f64>();
            (0..3)
                .map(|_| (base + (r.gen::<f64>() - 0.5) * 0.08).clamp(0.0, 1.0))
                .collect()
        } else {
            (0..3)
                .map(|c| ((0.1 + 0.85 * r.gen::<f64>()) * tint[c]).min(1.0))
                .collect()
        };
        let cy = (r.gen::<f64>() * height as f64) as usize;
        let cx = (r.gen::<f64>() * width as f64) as usize;
        let ry = 2 + (r.gen::<f64>() * 0.22 * height as f64) as usize;
        let rx = 2 + (r.gen::<f64>() * 0.22 * width as f64) as usize;
        let ellipse = r.gen::<bool>();
        for row in cy.saturating_sub(ry)..(cy + ry).min(height) {
            for col in cx.saturating_sub(rx)..(cx + rx).min(width) {
                if ellipse {
                    let dy = (row as f64 - cy as f64) / ry as f64;
                    let dx = (col as f64 - cx as f64) / rx as f64;
                    if dy * dy + dx * dx > 1.0 {
                        continue;
                    }
                }
                for ch in 0..3 {
                    *img.at_mut(ch, row, col) = S::from_f64(color[ch]);
                }
            }
        }
    }

    if force_sky {
        paint_band(&mut r, &mut img);
    }

    // Specular highlights: small near-white clusters plus isolated pixels.
    let clusters = 2 + (r.gen::<u64>() % 3) as usize;
    for _ in 0..clusters {
        let cy = (r.gen::<f64>() * height as f64) as usize;
        let cx = (r.gen::<f64>() * width as f64) as usize;
        let rad = 1 + (r.gen::<u64>() % 2) as usize;
        for row in cy.saturating_sub(rad)..(cy + rad + 1).min(height) {
            for col in cx.saturating_sub(rad)..(cx + rad + 1).min(width) {
                let v = 0.93 + 0.07 * r.gen::<f64>();
                for ch in 0..3 {
                    *img.at_mut(ch, row, col) = S::from_f64(v);
                }
            }
        }
    }
    let sparks = (height * width) / 200;
    for _ in 0..sparks {
        let row = (r.gen::<f64>() * height as f64) as usize % height;
        let col = (r.gen::<f64>() * width as f64) as usize % width;
        let v = 0.92 + 0.08 * r.gen::<f64>();
        for ch in 0..3 {
            *img.at_mut(ch, row, col) = S::from_f64(v);
        }
    }

    // Sensor-ish noise, clamped into range.
    for v in img.data_mut().iter_mut() {
        let noisy = v.to_f64() + (r.gen::<f64>() - 0.5) * 0.02;
        *v = S::from_f64(noisy.clamp(0.0, 1.0));
    }
    img
}

/// Smooth scalar field in [lo, hi]: a small mixture of low-frequency
/// cosines, rescaled to span the range exactly. Used as synthetic
/// transmission maps.
pub fn smooth_field<S: Scalar>(height: usize, width: usize, lo: f64, hi: f64, seed: u64) -> Tensor<S> {
    let mut r = rng::stream(seed, 0);
    let mut comps = Vec::new();
    for _ in 0..3 {
        comps.push((
            0.4 + 1.6 * r.gen::<f64>(),            // cycles over the height
            0.4 + 1.6 * r.gen::<f64>(),            // cycles over the width
            r.gen::<f64>() * std::f64::consts::TAU, // phase
            0.3 + 0.7 * r.gen::<f64>(),            // amplitude
        ));
    }
    let mut raw = vec![0.0f64; height * width];
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for row in 0..height {
        for col in 0..width {
            let mut v = 0.0;
            for &(fy, fx, phase, amp) in &comps {
                let arg = std::f64::consts::TAU
                    * (fy * row as f64 / height as f64 + fx * col as f64 / width as f64)
                    + phase;
                v += amp * arg.cos();
            }
            raw[row * width + col] = v;
            min = min.min(v);
            max = max.max(v);
        }
    }
    let span = (max - min).max(1e-12);
    let data = raw
        .into_iter()
        .map(|v| S::from_f64(lo + (v - min) / span * (hi - lo)))
        .collect();
    Tensor::new(1, height, width, data).expect("sized above")
}
