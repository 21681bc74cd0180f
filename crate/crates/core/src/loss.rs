//! The training objective: pixel-weighted softmax cross entropy plus the
//! precomputed weight map that balances class frequencies and emphasizes the
//! narrow background gaps separating touching instances.
//!
//! The gap term needs, per pixel, the Euclidean distance to the nearest and
//! second-nearest instance. Those are computed exactly with a separable
//! squared-distance transform (lower envelope of parabolas), one pass per
//! instance, then reduced to the two smallest values per pixel.

use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::tape::PROB_CLAMP;
use crate::tensor::{Scalar, Tensor4};

/// Per-pixel instance identifiers; 0 is background, ids >= 1 are instances.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceLabelMap {
    labels: Raster<u32>,
}

impl InstanceLabelMap {
    pub fn new(labels: Raster<u32>) -> Self {
        Self { labels }
    }

    pub fn raster(&self) -> &Raster<u32> {
        &self.labels
    }

    pub fn height(&self) -> usize {
        self.labels.height()
    }

    pub fn width(&self) -> usize {
        self.labels.width()
    }

    /// Sorted distinct non-background ids.
    pub fn instance_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.labels.data().iter().copied().filter(|&v| v != 0).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Relabels the instances to the contiguous set `{1..M}`, preserving the
    /// order of the original ids.
    pub fn canonicalize(&self) -> InstanceLabelMap {
        let ids = self.instance_ids();
        let remap: std::collections::HashMap<u32, u32> = ids
            .iter()
            .enumerate()
            .map(|(i, &id)| (id, (i + 1) as u32))
            .collect();
        InstanceLabelMap {
            labels: self.labels.map(|v| if v == 0 { 0 } else { remap[&v] }),
        }
    }

    /// Binary foreground mask (any instance id).
    pub fn foreground(&self) -> Raster<bool> {
        self.labels.map(|v| v != 0)
    }
}

/// Per-pixel class labels in `1..=num_classes`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassLabelMap {
    labels: Raster<u32>,
    num_classes: usize,
}

impl ClassLabelMap {
    pub fn new(labels: Raster<u32>, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::BadArgument("num_classes must be >= 2".into()));
        }
        if let Some(&bad) = labels.data().iter().find(|&&v| v < 1 || v as usize > num_classes) {
            return Err(Error::BadArgument(format!(
                "class label {bad} outside 1..={num_classes}"
            )));
        }
        Ok(Self { labels, num_classes })
    }

    pub fn raster(&self) -> &Raster<u32> {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn height(&self) -> usize {
        self.labels.height()
    }

    pub fn width(&self) -> usize {
        self.labels.width()
    }

    /// 0-based channel index per pixel, row-major.
    pub fn channel_indices(&self) -> Vec<u32> {
        self.labels.data().iter().map(|&v| v - 1).collect()
    }
}

/// Parameters of the weight-map composition.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMapParams {
    /// Amplitude of the gap term.
    pub w0: f64,
    /// Gaussian width of the gap term, in pixels.
    pub sigma: f64,
    /// Chebyshev radius of the separation-border neighborhood test.
    pub border_radius: usize,
}

impl Default for WeightMapParams {
    fn default() -> Self {
        Self {
            w0: 10.0,
            sigma: 5.0,
            border_radius: 2,
        }
    }
}

impl WeightMapParams {
    pub fn validate(&self) -> Result<()> {
        if self.w0 <= 0.0 || self.sigma <= 0.0 || self.border_radius == 0 {
            return Err(Error::BadArgument(
                "weight-map parameters must be strictly positive".into(),
            ));
        }
        Ok(())
    }
}

/// Per-pixel positive loss weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMap {
    pub values: Raster<f64>,
}

// ---------------------------------------------------------------------------
// distance maps
// ---------------------------------------------------------------------------

/// 1-D squared-distance transform (lower envelope of parabolas).
/// `f` holds per-position seed costs; infinite entries mean "no seed".
fn dt1d(f: &[f64], d: &mut Vec<f64>) {
    let n = f.len();
    d.clear();
    d.resize(n, f64::INFINITY);
    let mut sites: Vec<usize> = Vec::with_capacity(n);
    let mut bounds: Vec<f64> = Vec::with_capacity(n + 1);
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            match sites.last() {
                None => {
                    sites.push(q);
                    bounds.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    // intersection of the parabolas rooted at p and q
                    let s = (f[q] + (q * q) as f64 - f[p] - (p * p) as f64) / (2 * (q - p)) as f64;
                    if s <= *bounds.last().unwrap() {
                        sites.pop();
                        bounds.pop();
                    } else {
                        sites.push(q);
                        bounds.push(s);
                        break;
                    }
                }
            }
        }
    }
    if sites.is_empty() {
        return;
    }
    bounds.push(f64::INFINITY);
    let mut k = 0;
    for (x, out) in d.iter_mut().enumerate() {
        while bounds[k + 1] < x as f64 {
            k += 1;
        }
        let p = sites[k];
        let dx = x as f64 - p as f64;
        *out = dx * dx + f[p];
    }
}

/// Exact squared Euclidean distance to the nearest seed, or infinity when
/// the mask has no seeds.
fn edt_squared(seeds: &Raster<bool>) -> Raster<f64> {
    let (h, w) = (seeds.height(), seeds.width());
    // pass 1: squared distance to the nearest seed within each column
    let mut column = Raster::new(h, w, f64::INFINITY);
    for x in 0..w {
        let mut run = f64::INFINITY;
        for y in 0..h {
            run = if seeds.get(y, x) { 0.0 } else { run + 1.0 };
            column.set(y, x, run);
        }
        run = f64::INFINITY;
        for y in (0..h).rev() {
            run = if seeds.get(y, x) { 0.0 } else { run + 1.0 };
            if run < column.get(y, x) {
                column.set(y, x, run);
            }
        }
    }
    for v in column.data_mut() {
        if v.is_finite() {
            *v = *v * *v;
        }
    }
    // pass 2: relax along rows through the parabola envelope
    let mut out = Raster::new(h, w, f64::INFINITY);
    let mut d = Vec::new();
    for y in 0..h {
        dt1d(column.row(y), &mut d);
        out.data_mut()[y * w..(y + 1) * w].copy_from_slice(&d);
    }
    out
}

/// Per-pixel Euclidean distances to the nearest instance (`d1`) and to the
/// second-nearest distinct instance (`d2`).
///
/// Pixels inside an instance are at distance 0 to it. When fewer than two
/// instances exist the missing distances are infinite, which makes the gap
/// term of the weight map vanish.
pub fn distance_maps(instances: &InstanceLabelMap) -> (Raster<f64>, Raster<f64>) {
    let (h, w) = (instances.height(), instances.width());
    let mut best = Raster::new(h, w, f64::INFINITY);
    let mut second = Raster::new(h, w, f64::INFINITY);
    for id in instances.instance_ids() {
        let seeds = instances.raster().map(|v| v == id);
        let sq = edt_squared(&seeds);
        for i in 0..h * w {
            let d = sq.data()[i];
            if d < best.data()[i] {
                second.data_mut()[i] = best.data()[i];
                best.data_mut()[i] = d;
            } else if d < second.data()[i] {
                second.data_mut()[i] = d;
            }
        }
    }
    for v in best.data_mut() {
        *v = v.sqrt();
    }
    for v in second.data_mut() {
        *v = v.sqrt();
    }
    (best, second)
}

// ---------------------------------------------------------------------------
// separation border and class balancing
// ---------------------------------------------------------------------------

/// Background class label.
pub const CLASS_BACKGROUND: u32 = 1;
/// Foreground class label.
pub const CLASS_FOREGROUND: u32 = 2;

/// Marks every background pixel whose Chebyshev disk of the given radius
/// touches at least two distinct instances, and derives the binary class map
/// (border pixels stay background by construction).
pub fn separation_border(
    instances: &InstanceLabelMap,
    radius: usize,
) -> Result<(Raster<bool>, ClassLabelMap)> {
    if radius == 0 {
        return Err(Error::BadArgument("border radius must be >= 1".into()));
    }
    let (h, w) = (instances.height(), instances.width());
    let r = radius as isize;
    let mut border = Raster::new(h, w, false);
    for y in 0..h {
        for x in 0..w {
            if instances.raster().get(y, x) != 0 {
                continue;
            }
            let mut first_id = 0u32;
            let mut is_border = false;
            'scan: for dy in -r..=r {
                let yy = y as isize + dy;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for dx in -r..=r {
                    let xx = x as isize + dx;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    let id = instances.raster().get(yy as usize, xx as usize);
                    if id == 0 {
                        continue;
                    }
                    if first_id == 0 {
                        first_id = id;
                    } else if id != first_id {
                        is_border = true;
                        break 'scan;
                    }
                }
            }
            if is_border {
                border.set(y, x, true);
            }
        }
    }
    let classes = instances
        .raster()
        .map(|v| if v == 0 { CLASS_BACKGROUND } else { CLASS_FOREGROUND });
    let class_map = ClassLabelMap::new(classes, 2)?;
    Ok((border, class_map))
}

/// Inverse-frequency class weights, normalized so the average pixel weight
/// is 1: `w_c = total / (present_classes * class_pixels)`. Absent classes
/// get weight 0; a single-class image therefore gets weight 1 for it.
pub fn class_balance_weights(labels: &ClassLabelMap) -> Vec<f64> {
    let k = labels.num_classes();
    let mut counts = vec![0usize; k];
    for &v in labels.raster().data() {
        counts[(v - 1) as usize] += 1;
    }
    let present = counts.iter().filter(|&&c| c > 0).count();
    let total = labels.raster().len() as f64;
    counts
        .iter()
        .map(|&c| {
            if c == 0 {
                0.0
            } else {
                total / (present as f64 * c as f64)
            }
        })
        .collect()
}

/// The Gaussian gap emphasis of the weight map:
/// `w0 * exp(-(d1 + d2)^2 / (2 sigma^2))`. Exactly `w0` when both distances
/// are zero; exactly 0 when either is infinite.
pub fn gap_weight(d1: f64, d2: f64, params: &WeightMapParams) -> f64 {
    let s = d1 + d2;
    params.w0 * (-(s * s) / (2.0 * params.sigma * params.sigma)).exp()
}

/// Full weight-map composition: separation border, class balancing, and the
/// distance-based gap term.
pub fn weight_map(instances: &InstanceLabelMap, params: &WeightMapParams) -> Result<WeightMap> {
    params.validate()?;
    let (_border, classes) = separation_border(instances, params.border_radius)?;
    let class_weights = class_balance_weights(&classes);
    let (d1, d2) = distance_maps(instances);
    let (h, w) = (instances.height(), instances.width());
    let mut values = Raster::new(h, w, 0.0f64);
    for i in 0..h * w {
        let class = (classes.raster().data()[i] - 1) as usize;
        values.data_mut()[i] = class_weights[class] + gap_weight(d1.data()[i], d2.data()[i], params);
    }
    Ok(WeightMap { values })
}

// ---------------------------------------------------------------------------
// weighted cross entropy
// ---------------------------------------------------------------------------

/// Pixel-weighted cross entropy `-sum_x w(x) * ln(p_label(x))` over softmax
/// probabilities, with the probability at the true label clamped at
/// [`PROB_CLAMP`] before the log. Returns the loss and the count of clamped
/// pixels.
pub fn weighted_cross_entropy<T: Scalar>(
    probs: &Tensor4<T>,
    labels: &ClassLabelMap,
    weights: &WeightMap,
) -> Result<(T, u64)> {
    let s = probs.shape();
    if s.n != 1 {
        return Err(Error::ShapeMismatch {
            op: "weighted_cross_entropy",
            details: format!("expected a single-image batch, got {s}"),
        });
    }
    if s.c != labels.num_classes() {
        return Err(Error::ShapeMismatch {
            op: "weighted_cross_entropy",
            details: format!("{} probability channels vs {} classes", s.c, labels.num_classes()),
        });
    }
    if s.h != labels.height() || s.w != labels.width() || s.h != weights.values.height() || s.w != weights.values.width() {
        return Err(Error::ShapeMismatch {
            op: "weighted_cross_entropy",
            details: format!(
                "probabilities {s}, labels {}x{}, weights {}x{}",
                labels.height(),
                labels.width(),
                weights.values.height(),
                weights.values.width()
            ),
        });
    }
    let hw = s.h * s.w;
    let clamp = T::from_f64(PROB_CLAMP);
    let mut total = T::zero();
    let mut saturated = 0u64;
    for px in 0..hw {
        let c = (labels.raster().data()[px] - 1) as usize;
        let mut p = probs.data()[c * hw + px];
        if p < clamp {
            p = clamp;
            saturated += 1;
        }
        total = total - T::from_f64(weights.values.data()[px]) * p.ln();
    }
    Ok((total, saturated))
}
