//! Visual inspection of what a trained network attends to.
//!
//! Pooled response maps are averaged across channels, spread back to input
//! resolution (uniformly within each pooling window, averaging where windows
//! overlap), re-projected onto the source image through the ensemble's
//! permutation, and accumulated into weighted histograms: 2-D chroma
//! (R/G, B/G) for color constancy, 1-D min-channel for dehazing.

use crate::ensemble::PixelEnsemble;
use crate::error::{Error, Result};
use crate::models::{forward_trace, NetworkSpec, NodeInput, ParamStore};
use crate::nn::LayerKind;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Nonnegative per-position weights aligned to a pixel-ensemble.
#[derive(Debug, Clone)]
pub struct ActivationWeights<S> {
    pub values: Vec<S>,
}

/// Channel-mean response of a pooling layer, pushed back to the network's
/// input resolution. Negative means clamp to zero.
pub fn activation_weights<S: Scalar>(
    spec: &NetworkSpec,
    params: &ParamStore<S>,
    ensemble: &PixelEnsemble<S>,
    layer_id: &str,
) -> Result<ActivationWeights<S>> {
    let probe = spec
        .node_index(layer_id)
        .ok_or_else(|| Error::Layer(format!("no layer named {layer_id}")))?;
    let kind = spec.nodes[probe].layer.kind;
    if !matches!(kind, LayerKind::MaxPool | LayerKind::AvgPool) {
        return Err(Error::Layer(format!(
            "layer {layer_id} is not a pooling layer"
        )));
    }
    let path = spec.path_to_source(probe)?;
    let shapes = spec.node_shapes()?;
    let trace = forward_trace(spec, params, &ensemble.pixels)?;
    let response = trace.node_output(probe);
    let (c, mut h, mut w) = response.shape();

    // Mean across channels, clamped at zero.
    let mut map = vec![S::zero(); h * w];
    for ch in 0..c {
        for (m, &v) in map.iter_mut().zip(response.channel(ch)) {
            *m += v;
        }
    }
    let inv = S::one() / S::from_usize(c);
    for m in map.iter_mut() {
        *m = (*m * inv).max(S::zero());
    }

    // Walk back towards the input, expanding through every layer that
    // changes the spatial grid.
    for &node in path.iter().rev() {
        let layer = &spec.nodes[node].layer;
        let in_shape = match spec.nodes[node].inputs[0] {
            NodeInput::Source => spec.input_shape,
            NodeInput::Node(j) => shapes[j],
        };
        let (ih, iw) = (in_shape.1, in_shape.2);
        if (ih, iw) == (h, w) {
            continue;
        }
        map = expand_through_windows(&map, h, w, ih, iw, layer.kernel, layer.pad, layer.stride);
        h = ih;
        w = iw;
    }
    debug_assert_eq!(h * w, ensemble.len());
    Ok(ActivationWeights { values: map })
}

/// Each input cell takes the average of the map values of all windows that
/// cover it (exactly one for non-overlapping pooling grids).
fn expand_through_windows<S: Scalar>(
    map: &[S],
    oh: usize,
    ow: usize,
    ih: usize,
    iw: usize,
    kernel: (usize, usize),
    pad: usize,
    stride: usize,
) -> Vec<S> {
    let mut sum = vec![S::zero(); ih * iw];
    let mut count = vec![0u32; ih * iw];
    for i in 0..oh {
        let h0 = i as isize * stride as isize - pad as isize;
        for j in 0..ow {
            let w0 = j as isize * stride as isize - pad as isize;
            let v = map[i * ow + j];
            for r in h0.max(0)..(h0 + kernel.0 as isize).min(ih as isize) {
                for c in w0.max(0)..(w0 + kernel.1 as isize).min(iw as isize) {
                    let idx = r as usize * iw + c as usize;
                    sum[idx] += v;
                    count[idx] += 1;
                }
            }
        }
    }
    sum.into_iter()
        .zip(count)
        .map(|(s, n)| {
            if n == 0 {
                S::zero()
            } else {
                s / S::from_usize(n as usize)
            }
        })
        .collect()
}

/// Scatter ensemble-aligned weights onto the source image grid; untouched
/// pixels stay zero. Total mass is conserved exactly.
pub fn reproject<S: Scalar>(
    weights: &ActivationWeights<S>,
    ensemble: &PixelEnsemble<S>,
) -> Result<Tensor<S>> {
    if weights.values.len() != ensemble.len() {
        return Err(Error::dim(
            "weight length",
            ensemble.len(),
            weights.values.len(),
        ));
    }
    let (h, w) = ensemble.source_shape;
    let mut map = Tensor::zeros(1, h, w);
    for (&v, &(r, c)) in weights.values.iter().zip(&ensemble.permutation) {
        *map.at_mut(0, r, c) += v;
    }
    Ok(map)
}

/// 2-D (or 1-D when `y_bins` is 1) histogram of weighted pixel statistics.
#[derive(Debug, Clone)]
pub struct WeightedHistogram<S> {
    pub x_bins: usize,
    pub y_bins: usize,
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    /// Row-major [y][x].
    pub mass: Vec<S>,
    /// Pixels that carried weight but fell outside the binnable domain.
    pub skipped: u64,
}

impl<S: Scalar> WeightedHistogram<S> {
    fn new(x_bins: usize, y_bins: usize, x_range: (f64, f64), y_range: (f64, f64)) -> Self {
        WeightedHistogram {
            x_bins,
            y_bins,
            x_range,
            y_range,
            mass: vec![S::zero(); x_bins * y_bins],
            skipped: 0,
        }
    }

    pub fn total_mass(&self) -> S {
        self.mass.iter().copied().sum()
    }

    /// Bin-wise addition; both histograms must share a layout.
    pub fn merge(&mut self, other: &WeightedHistogram<S>) -> Result<()> {
        if self.mass.len() != other.mass.len() {
            return Err(Error::dim("histogram bins", self.mass.len(), other.mass.len()));
        }
        for (a, b) in self.mass.iter_mut().zip(&other.mass) {
            *a += *b;
        }
        self.skipped += other.skipped;
        Ok(())
    }

    /// Prefix sums over x (1-D histograms only).
    pub fn cumulative(&self) -> Result<Vec<S>> {
        if self.y_bins != 1 {
            return Err(Error::Config("cumulative needs a 1-D histogram".into()));
        }
        let mut acc = S::zero();
        Ok(self
            .mass
            .iter()
            .map(|&m| {
                acc += m;
                acc
            })
            .collect())
    }

    /// Center coordinate of a bin along x.
    pub fn x_center(&self, i: usize) -> f64 {
        let width = (self.x_range.1 - self.x_range.0) / self.x_bins as f64;
        self.x_range.0 + (i as f64 + 0.5) * width
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_x,bin_y,mass\n");
        for y in 0..self.y_bins {
            for x in 0..self.x_bins {
                out.push_str(&format!(
                    "{},{},{}\n",
                    x,
                    y,
                    self.mass[y * self.x_bins + x].to_f64()
                ));
            }
        }
        out
    }

    pub fn to_csv_1d(&self) -> Result<String> {
        let cumulative = self.cumulative()?;
        let mut out = String::from("bin,center,mass,cumulative\n");
        for (x, (&m, &c)) in self.mass.iter().zip(&cumulative).enumerate() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                x,
                self.x_center(x),
                m.to_f64(),
                c.to_f64()
            ));
        }
        Ok(out)
    }
}

/// Bin index for value `v` in `bins` half-open-from-below bins over (lo, hi].
fn bin_open_low(v: f64, lo: f64, hi: f64, bins: usize) -> Option<usize> {
    if !(v > lo && v <= hi) {
        return None;
    }
    let width = (hi - lo) / bins as f64;
    let idx = ((v - lo) / width).ceil() as usize;
    Some(idx.saturating_sub(1).min(bins - 1))
}

/// Bin index for value `v` in closed-range bins over [lo, hi].
fn bin_closed(v: f64, lo: f64, hi: f64, bins: usize) -> Option<usize> {
    if !(v >= lo && v <= hi) {
        return None;
    }
    let width = (hi - lo) / bins as f64;
    Some((((v - lo) / width).floor() as usize).min(bins - 1))
}

/// Accumulate (R/G, B/G) of each pixel, weighted. Pixels with nonzero
/// weight but G ≤ 0 or chroma outside (0, hi] are counted as skipped.
pub fn weighted_chroma_histogram<S: Scalar>(
    pairs: &[(&Tensor<S>, &Tensor<S>)],
    bins: usize,
    hi: f64,
) -> Result<WeightedHistogram<S>> {
    let mut hist = WeightedHistogram::new(bins, bins, (0.0, hi), (0.0, hi));
    for (image, weights) in pairs {
        check_weight_map(image, weights)?;
        let (_, h, w) = image.shape();
        for i in 0..h * w {
            let weight = weights.data()[i];
            if weight == S::zero() {
                continue;
            }
            let g = image.data()[h * w + i].to_f64();
            if g <= 0.0 {
                hist.skipped += 1;
                continue;
            }
            let rg = image.data()[i].to_f64() / g;
            let bg = image.data()[2 * h * w + i].to_f64() / g;
            match (
                bin_open_low(rg, 0.0, hi, bins),
                bin_open_low(bg, 0.0, hi, bins),
            ) {
                (Some(x), Some(y)) => hist.mass[y * bins + x] += weight,
                _ => hist.skipped += 1,
            }
        }
    }
    Ok(hist)
}

/// Accumulate min(R,G,B) of each pixel over [0,1], weighted.
pub fn min_channel_histogram<S: Scalar>(
    pairs: &[(&Tensor<S>, &Tensor<S>)],
    bins: usize,
) -> Result<WeightedHistogram<S>> {
    let mut hist = WeightedHistogram::new(bins, 1, (0.0, 1.0), (0.0, 0.0));
    for (image, weights) in pairs {
        check_weight_map(image, weights)?;
        let (_, h, w) = image.shape();
        for i in 0..h * w {
            let weight = weights.data()[i];
            if weight == S::zero() {
                continue;
            }
            let m = image.data()[i]
                .min(image.data()[h * w + i])
                .min(image.data()[2 * h * w + i])
                .to_f64();
            match bin_closed(m, 0.0, 1.0, bins) {
                Some(x) => hist.mass[x] += weight,
                None => hist.skipped += 1,
            }
        }
    }
    Ok(hist)
}

fn check_weight_map<S: Scalar>(image: &Tensor<S>, weights: &Tensor<S>) -> Result<()> {
    if image.channels() != 3 {
        return Err(Error::dim("image channels", 3, image.channels()));
    }
    if weights.channels() != 1 {
        return Err(Error::dim("weight channels", 1, weights.channels()));
    }
    if (weights.height(), weights.width()) != (image.height(), image.width()) {
        return Err(Error::dim("weight height", image.height(), weights.height()));
    }
    Ok(())
}

// --- SVG emission ------------------------------------------------------------

/// Standalone SVG heatmap of a 2-D histogram (log-scaled ramp), with an
/// optional cross marker at data coordinates.
pub fn heatmap_svg<S: Scalar>(hist: &WeightedHistogram<S>, marker: Option<(f64, f64)>) -> String {
    let cell = 8usize;
    let wpx = hist.x_bins * cell;
    let hpx = hist.y_bins * cell;
    let peak = hist
        .mass
        .iter()
        .map(|&m| m.to_f64())
        .fold(0.0f64, f64::max)
        .max(1e-300);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{wpx}\" height=\"{hpx}\" \
         viewBox=\"0 0 {wpx} {hpx}\">\n<rect width=\"{wpx}\" height=\"{hpx}\" fill=\"#10142a\"/>\n"
    );
    for y in 0..hist.y_bins {
        for x in 0..hist.x_bins {
            let m = hist.mass[y * hist.x_bins + x].to_f64();
            if m <= 0.0 {
                continue;
            }
            let v = ((m / peak).ln() / 9.0 + 1.0).clamp(0.0, 1.0); // ~4 decades
            let (r, g, b) = ramp(v);
            // SVG y grows downward; histogram y grows upward.
            let py = (hist.y_bins - 1 - y) * cell;
            svg.push_str(&format!(
                "<rect x=\"{}\" y=\"{py}\" width=\"{cell}\" height=\"{cell}\" fill=\"rgb({r},{g},{b})\"/>\n",
                x * cell
            ));
        }
    }
    if let Some((mx, my)) = marker {
        let fx = (mx - hist.x_range.0) / (hist.x_range.1 - hist.x_range.0);
        let fy = (my - hist.y_range.0) / (hist.y_range.1 - hist.y_range.0);
        if (0.0..=1.0).contains(&fx) && (0.0..=1.0).contains(&fy) {
            let px = fx * wpx as f64;
            let py = (1.0 - fy) * hpx as f64;
            svg.push_str(&format!(
                "<path d=\"M {x0} {py} H {x1} M {px} {y0} V {y1}\" stroke=\"#ff4444\" stroke-width=\"2\"/>\n",
                x0 = px - 6.0,
                x1 = px + 6.0,
                y0 = py - 6.0,
                y1 = py + 6.0
            ));
        }
    }
    svg.push_str("</svg>\n");
    svg
}

fn ramp(v: f64) -> (u8, u8, u8) {
    // Dark blue → magenta → yellow-white.
    let r = (255.0 * v.powf(0.7)).round() as u8;
    let g = (255.0 * (v * v)).round() as u8;
    let b = (90.0 + 165.0 * (1.0 - v) * v * 4.0).clamp(0.0, 255.0) as u8;
    (r, g, b)
}

/// Standalone SVG polyline over (x, y) points, axes at the data bounds.
pub fn curve_svg(points: &[(f64, f64)]) -> String {
    let (w, h, m) = (480.0, 320.0, 24.0);
    let x_max = points.iter().map(|p| p.0).fold(1e-12_f64, f64::max);
    let y_max = points.iter().map(|p| p.1).fold(1e-12_f64, f64::max);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n\
         <path d=\"M {m} {m} V {ybase} H {xend}\" stroke=\"black\" fill=\"none\"/>\n",
        ybase = h - m,
        xend = w - m
    );
    let mut d = String::from("M");
    for &(x, y) in points {
        let px = m + (x / x_max) * (w - 2.0 * m);
        let py = (h - m) - (y / y_max) * (h - 2.0 * m);
        d.push_str(&format!(" {px:.2} {py:.2}"));
        d.push_str(" L");
    }
    d.truncate(d.len() - 2);
    svg.push_str(&format!(
        "<path d=\"{d}\" stroke=\"#0044cc\" stroke-width=\"1.5\" fill=\"none\"/>\n</svg>\n"
    ));
    svg
}
