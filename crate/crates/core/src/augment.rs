//! Training-time augmentation: elastic deformation from a coarse Gaussian
//! displacement grid, rotation, shift and gray-value jitter.
//!
//! Geometric stages are composed analytically into a single per-pixel
//! displacement field, so the image is resampled exactly once. Images are
//! interpolated bicubically (Catmull-Rom); label maps use nearest-neighbor
//! so ids never blend. Source coordinates outside the image are
//! mirror-reflected about the boundary without duplicating the edge pixel.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::loss::InstanceLabelMap;
use crate::raster::{GrayImage, Raster};

/// Reflects an index about the raster boundary, excluding the edge pixel
/// from duplication: `[a, b, c]` extends to `... c b | a b c | b a ...`.
/// Arbitrarily far indices reflect repeatedly.
pub fn reflect_index(i: isize, len: usize) -> usize {
    debug_assert!(len >= 1);
    if len == 1 {
        return 0;
    }
    let period = (2 * len - 2) as isize;
    let mut m = i.rem_euclid(period);
    if m >= len as isize {
        m = period - m;
    }
    m as usize
}

/// Dense per-pixel displacement vectors `(dy, dx)`: the warp reads its
/// source at `(y + dy, x + dx)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    dy: Raster<f64>,
    dx: Raster<f64>,
}

impl DisplacementField {
    pub fn zero(height: usize, width: usize) -> Self {
        Self {
            dy: Raster::new(height, width, 0.0),
            dx: Raster::new(height, width, 0.0),
        }
    }

    pub fn from_parts(dy: Raster<f64>, dx: Raster<f64>) -> Result<Self> {
        if dy.height() != dx.height() || dy.width() != dx.width() {
            return Err(Error::ShapeMismatch {
                op: "DisplacementField",
                details: "dy and dx sizes differ".into(),
            });
        }
        if !dy.data().iter().chain(dx.data()).all(|v| v.is_finite()) {
            return Err(Error::BadArgument("displacement field must be finite".into()));
        }
        Ok(Self { dy, dx })
    }

    pub fn height(&self) -> usize {
        self.dy.height()
    }

    pub fn width(&self) -> usize {
        self.dy.width()
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> (f64, f64) {
        (self.dy.get(y, x), self.dx.get(y, x))
    }

    /// Pointwise negation, handy for round-trip checks.
    pub fn negated(&self) -> Self {
        Self {
            dy: self.dy.map(|v| -v),
            dx: self.dx.map(|v| -v),
        }
    }
}

/// Augmentation parameters. Ranges of zero width make the corresponding
/// stage the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    /// Control points per axis of the elastic displacement grid.
    pub grid_size: usize,
    /// Standard deviation of the control displacements, in pixels.
    pub displacement_sigma: f64,
    /// Rotation angle drawn uniformly from `[-range, range]` degrees.
    pub rotation_range: f64,
    /// Shift per axis drawn uniformly from `[-range, range]` pixels.
    pub shift_range: f64,
    /// Multiplicative gray jitter drawn uniformly from this interval.
    pub gray_scale_range: (f64, f64),
    /// Additive gray jitter drawn uniformly from this interval.
    pub gray_shift_range: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            grid_size: 3,
            displacement_sigma: 10.0,
            rotation_range: 15.0,
            shift_range: 5.0,
            gray_scale_range: (0.9, 1.1),
            gray_shift_range: (-0.05, 0.05),
        }
    }
}

impl AugmentConfig {
    /// Configuration under which `augment_sample` is a bit-exact identity.
    pub fn identity() -> Self {
        Self {
            grid_size: 3,
            displacement_sigma: 0.0,
            rotation_range: 0.0,
            shift_range: 0.0,
            gray_scale_range: (1.0, 1.0),
            gray_shift_range: (0.0, 0.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_size < 2 {
            return Err(Error::Config("augment grid_size must be >= 2".into()));
        }
        if self.displacement_sigma < 0.0 || self.rotation_range < 0.0 || self.shift_range < 0.0 {
            return Err(Error::Config("augment ranges must be >= 0".into()));
        }
        if self.gray_scale_range.0 > self.gray_scale_range.1 || self.gray_shift_range.0 > self.gray_shift_range.1 {
            return Err(Error::Config("augment intervals must satisfy lo <= hi".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Catmull-Rom interpolation
// ---------------------------------------------------------------------------

/// Catmull-Rom weights for the four taps at offsets -1, 0, 1, 2 around the
/// sample, with fraction `t` in `[0, 1)`. The weights sum to 1, so constants
/// reproduce exactly and linear ramps stay linear.
#[inline]
fn catmull_rom_weights(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    [
        -0.5 * t3 + t2 - 0.5 * t,
        1.5 * t3 - 2.5 * t2 + 1.0,
        -1.5 * t3 + 2.0 * t2 + 0.5 * t,
        0.5 * t3 - 0.5 * t2,
    ]
}

/// Bicubic sample of `values` at fractional coordinates, indices reflected
/// at the boundary. Grid coordinates are `(row, column)`.
fn sample_bicubic(values: &Raster<f64>, y: f64, x: f64) -> f64 {
    let y0 = y.floor();
    let x0 = x.floor();
    let ty = y - y0;
    let tx = x - x0;
    let (yi, xi) = (y0 as isize, x0 as isize);
    if ty == 0.0 && tx == 0.0 {
        return values.get(reflect_index(yi, values.height()), reflect_index(xi, values.width()));
    }
    let wy = catmull_rom_weights(ty);
    let wx = catmull_rom_weights(tx);
    let mut acc = 0.0;
    for (j, wyj) in wy.iter().enumerate() {
        let row = reflect_index(yi - 1 + j as isize, values.height());
        let mut row_acc = 0.0;
        for (i, wxi) in wx.iter().enumerate() {
            let col = reflect_index(xi - 1 + i as isize, values.width());
            row_acc += wxi * values.get(row, col);
        }
        acc += wyj * row_acc;
    }
    acc
}

// ---------------------------------------------------------------------------
// elastic field
// ---------------------------------------------------------------------------

/// Draws the coarse grid of i.i.d. Gaussian control vectors, row-major,
/// `dy` before `dx` at each point.
pub fn sample_control_grid<R: Rng>(grid_size: usize, sigma: f64, rng: &mut R) -> Vec<(f64, f64)> {
    (0..grid_size * grid_size)
        .map(|_| {
            let gy: f64 = rng.sample(StandardNormal);
            let gx: f64 = rng.sample(StandardNormal);
            (gy * sigma, gx * sigma)
        })
        .collect()
}

/// Densifies explicit control vectors (anchored at evenly spaced positions
/// spanning the image) into a per-pixel field via bicubic interpolation.
pub fn densify_control_grid(
    height: usize,
    width: usize,
    grid_size: usize,
    control: &[(f64, f64)],
) -> Result<DisplacementField> {
    if control.len() != grid_size * grid_size {
        return Err(Error::ShapeMismatch {
            op: "densify_control_grid",
            details: format!("{} control vectors for a {grid_size}x{grid_size} grid", control.len()),
        });
    }
    if height < grid_size || width < grid_size {
        return Err(Error::BadArgument(format!(
            "image {height}x{width} smaller than the {grid_size}x{grid_size} control grid"
        )));
    }
    let grid_dy = Raster::from_vec(grid_size, grid_size, control.iter().map(|c| c.0).collect())?;
    let grid_dx = Raster::from_vec(grid_size, grid_size, control.iter().map(|c| c.1).collect())?;
    let mut dy = Raster::new(height, width, 0.0);
    let mut dx = Raster::new(height, width, 0.0);
    let sy = (grid_size - 1) as f64 / (height - 1).max(1) as f64;
    let sx = (grid_size - 1) as f64 / (width - 1).max(1) as f64;
    for y in 0..height {
        for x in 0..width {
            let u = y as f64 * sy;
            let v = x as f64 * sx;
            dy.set(y, x, sample_bicubic(&grid_dy, u, v));
            dx.set(y, x, sample_bicubic(&grid_dx, u, v));
        }
    }
    DisplacementField::from_parts(dy, dx)
}

/// Random smooth deformation: Gaussian control vectors on a coarse grid,
/// bicubically interpolated to every pixel.
pub fn elastic_field<R: Rng>(
    height: usize,
    width: usize,
    config: &AugmentConfig,
    rng: &mut R,
) -> Result<DisplacementField> {
    config.validate()?;
    let control = sample_control_grid(config.grid_size, config.displacement_sigma, rng);
    densify_control_grid(height, width, config.grid_size, &control)
}

// ---------------------------------------------------------------------------
// warping
// ---------------------------------------------------------------------------

/// Interpolation used when reading warped source samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WarpMode {
    /// Bicubic interpolation; for intensity images.
    Smooth,
    /// Nearest-neighbor; keeps label values inside the input value set.
    Nearest,
}

/// Warps an image through a displacement field: `out(x) = in(x + field(x))`.
pub fn warp_image(image: &GrayImage, field: &DisplacementField, mode: WarpMode) -> GrayImage {
    assert_eq!(
        (image.height(), image.width()),
        (field.height(), field.width()),
        "warp_image: image and field sizes differ"
    );
    let (h, w) = (image.height(), image.width());
    let mut out = Raster::new(h, w, 0.0f32);
    let as_f64 = image.map(|v| v as f64);
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = field.get(y, x);
            let sy = y as f64 + dy;
            let sx = x as f64 + dx;
            let v = match mode {
                WarpMode::Smooth => sample_bicubic(&as_f64, sy, sx),
                WarpMode::Nearest => {
                    let iy = reflect_index(sy.round() as isize, h);
                    let ix = reflect_index(sx.round() as isize, w);
                    image.get(iy, ix) as f64
                }
            };
            out.set(y, x, v as f32);
        }
    }
    out
}

/// Warps an instance map with nearest-neighbor sampling.
pub fn warp_instances(instances: &InstanceLabelMap, field: &DisplacementField) -> InstanceLabelMap {
    let (h, w) = (instances.height(), instances.width());
    assert_eq!((h, w), (field.height(), field.width()), "warp_instances: sizes differ");
    let mut out = Raster::new(h, w, 0u32);
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = field.get(y, x);
            let iy = reflect_index((y as f64 + dy).round() as isize, h);
            let ix = reflect_index((x as f64 + dx).round() as isize, w);
            out.set(y, x, instances.raster().get(iy, ix));
        }
    }
    InstanceLabelMap::new(out)
}

// ---------------------------------------------------------------------------
// full augmentation of one training pair
// ---------------------------------------------------------------------------

fn uniform_in<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    let u: f64 = rng.gen();
    lo + u * (hi - lo)
}

/// Applies rotation, shift, elastic deformation and gray jitter to one
/// training pair. The three geometric stages are folded into a single
/// displacement field (rotation first, then shift, then elastic), so image
/// and labels are each resampled once; the weight map is recomputed from the
/// warped instances by the caller.
pub fn augment_sample<R: Rng>(
    image: &GrayImage,
    instances: &InstanceLabelMap,
    config: &AugmentConfig,
    rng: &mut R,
) -> Result<(GrayImage, InstanceLabelMap)> {
    config.validate()?;
    let (h, w) = (image.height(), image.width());
    if (instances.height(), instances.width()) != (h, w) {
        return Err(Error::ShapeMismatch {
            op: "augment_sample",
            details: format!(
                "image {h}x{w} vs instances {}x{}",
                instances.height(),
                instances.width()
            ),
        });
    }

    // fixed draw order: angle, shift, elastic grid, gray scale, gray offset
    let angle = uniform_in(rng, -config.rotation_range, config.rotation_range).to_radians();
    let shift_y = uniform_in(rng, -config.shift_range, config.shift_range);
    let shift_x = uniform_in(rng, -config.shift_range, config.shift_range);
    let elastic = elastic_field(h, w, config, rng)?;
    let scale = uniform_in(rng, config.gray_scale_range.0, config.gray_scale_range.1);
    let offset = uniform_in(rng, config.gray_shift_range.0, config.gray_shift_range.1);

    // composite source coordinates: elastic and shift displace, then the
    // source point is rotated about the image center
    let (cy, cx) = ((h - 1) as f64 / 2.0, (w - 1) as f64 / 2.0);
    let (sin, cos) = angle.sin_cos();
    let mut dy = Raster::new(h, w, 0.0f64);
    let mut dx = Raster::new(h, w, 0.0f64);
    for y in 0..h {
        for x in 0..w {
            let (ey, ex) = elastic.get(y, x);
            let py = y as f64 + ey + shift_y;
            let px = x as f64 + ex + shift_x;
            let (sy, sx) = if angle == 0.0 {
                (py, px)
            } else {
                let ry = cos * (py - cy) - sin * (px - cx) + cy;
                let rx = sin * (py - cy) + cos * (px - cx) + cx;
                (ry, rx)
            };
            dy.set(y, x, sy - y as f64);
            dx.set(y, x, sx - x as f64);
        }
    }
    let field = DisplacementField::from_parts(dy, dx)?;

    let mut warped_image = warp_image(image, &field, WarpMode::Smooth);
    let warped_instances = warp_instances(instances, &field);
    for v in warped_image.data_mut() {
        *v = (*v as f64 * scale + offset) as f32;
    }
    Ok((warped_image, warped_instances))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp_image(h: usize, w: usize) -> GrayImage {
        let data = (0..h * w).map(|i| (i % w) as f32).collect();
        Raster::from_vec(h, w, data).unwrap()
    }

    fn blob_image(h: usize, w: usize) -> GrayImage {
        let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
        let data = (0..h * w)
            .map(|i| {
                let y = (i / w) as f64;
                let x = (i % w) as f64;
                let r2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
                (-r2 / 40.0).exp() as f32
            })
            .collect();
        Raster::from_vec(h, w, data).unwrap()
    }

    #[test]
    fn reflect_index_implements_edge_free_mirroring() {
        // [1,2,3] padded left by two reads 3,2
        assert_eq!(reflect_index(-1, 3), 1);
        assert_eq!(reflect_index(-2, 3), 2);
        assert_eq!(reflect_index(0, 3), 0);
        assert_eq!(reflect_index(3, 3), 1);
        assert_eq!(reflect_index(4, 3), 0);
        // repeated reflection far past the boundary
        assert_eq!(reflect_index(-4, 3), 0);
        assert_eq!(reflect_index(7, 3), 1);
        assert_eq!(reflect_index(5, 1), 0);
    }

    #[test]
    fn sigma_zero_gives_zero_field() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let config = AugmentConfig {
            displacement_sigma: 0.0,
            ..AugmentConfig::default()
        };
        let field = elastic_field(20, 30, &config, &mut rng).unwrap();
        for y in 0..20 {
            for x in 0..30 {
                assert_eq!(field.get(y, x), (0.0, 0.0));
            }
        }
    }

    #[test]
    fn constant_control_vectors_densify_to_a_constant_field() {
        let control = vec![(1.0, 0.0); 9];
        let field = densify_control_grid(16, 12, 3, &control).unwrap();
        for y in 0..16 {
            for x in 0..12 {
                let (dy, dx) = field.get(y, x);
                assert!((dy - 1.0).abs() < 1e-9, "dy {dy} at ({y},{x})");
                assert!(dx.abs() < 1e-9);
            }
        }
    }

    #[test]
    fn control_vector_sample_std_tracks_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let control = sample_control_grid(100, 10.0, &mut rng); // 2 * 10^4 draws
        let values: Vec<f64> = control.iter().flat_map(|&(a, b)| [a, b]).collect();
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        assert!((std - 10.0).abs() / 10.0 < 0.03, "std {std}");
    }

    #[test]
    fn zero_field_warp_is_bit_exact_identity() {
        let image = blob_image(15, 17);
        let field = DisplacementField::zero(15, 17);
        let warped = warp_image(&image, &field, WarpMode::Smooth);
        assert_eq!(warped, image);
        let nearest = warp_image(&image, &field, WarpMode::Nearest);
        assert_eq!(nearest, image);
    }

    #[test]
    fn constant_unit_field_shifts_a_ramp() {
        // f(x) = x warped by a constant (0, 1) field: interior pixels read
        // the linear ramp one step to the right
        let image = ramp_image(8, 12);
        let field = DisplacementField::from_parts(Raster::new(8, 12, 0.0), Raster::new(8, 12, 1.0)).unwrap();
        let warped = warp_image(&image, &field, WarpMode::Smooth);
        for y in 0..8 {
            for x in 2..9 {
                // interior: away from the mirrored columns
                let got = warped.get(y, x) as f64;
                assert!((got - (x as f64 + 1.0)).abs() < 1e-5, "{got} at ({y},{x})");
            }
        }
    }

    #[test]
    fn nearest_warp_only_emits_input_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data: Vec<u32> = (0..12 * 12).map(|_| rng.gen_range(0..4) * 7).collect();
        let inst = InstanceLabelMap::new(Raster::from_vec(12, 12, data.clone()).unwrap());
        let config = AugmentConfig::default();
        let field = elastic_field(12, 12, &config, &mut rng).unwrap();
        let warped = warp_instances(&inst, &field);
        let input_values: std::collections::HashSet<u32> = data.into_iter().collect();
        assert!(warped.raster().data().iter().all(|v| input_values.contains(v)));
    }

    #[test]
    fn identity_config_is_bit_exact() {
        let image = blob_image(20, 20);
        let inst = InstanceLabelMap::new(Raster::from_vec(20, 20, vec![1; 400]).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (img, labels) = augment_sample(&image, &inst, &AugmentConfig::identity(), &mut rng).unwrap();
        assert_eq!(img, image);
        assert_eq!(labels, inst);
    }

    #[test]
    fn gray_jitter_alone_leaves_instances_unchanged() {
        let image = blob_image(16, 16);
        let inst = InstanceLabelMap::new(
            Raster::from_vec(16, 16, (0..256).map(|i| u32::from(i % 16 < 4)).collect()).unwrap(),
        );
        let config = AugmentConfig {
            gray_scale_range: (0.5, 1.5),
            gray_shift_range: (-0.2, 0.2),
            ..AugmentConfig::identity()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (img, labels) = augment_sample(&image, &inst, &config, &mut rng).unwrap();
        assert_eq!(labels, inst);
        assert_ne!(img, image);
    }

    #[test]
    fn fixed_seed_reproduces_the_augmented_pair() {
        let image = blob_image(24, 24);
        let inst = InstanceLabelMap::new(
            Raster::from_vec(24, 24, (0..576).map(|i| u32::from(i % 24 > 18)).collect()).unwrap(),
        );
        let config = AugmentConfig::default();
        let run = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            augment_sample(&image, &inst, &config, &mut rng).unwrap()
        };
        let (img_a, lab_a) = run(7);
        let (img_b, lab_b) = run(7);
        assert_eq!(img_a, img_b);
        assert_eq!(lab_a, lab_b);
        let (img_c, _) = run(8);
        assert_ne!(img_a, img_c);
    }

    #[test]
    fn warp_round_trip_stays_close_on_smooth_images() {
        let image = blob_image(32, 32);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let config = AugmentConfig {
            displacement_sigma: 2.0,
            ..AugmentConfig::default()
        };
        let field = elastic_field(32, 32, &config, &mut rng).unwrap();
        let there = warp_image(&image, &field, WarpMode::Smooth);
        let back = warp_image(&there, &field.negated(), WarpMode::Smooth);
        let mae: f64 = image
            .data()
            .iter()
            .zip(back.data())
            .map(|(&a, &b)| (a as f64 - b as f64).abs())
            .sum::<f64>()
            / image.len() as f64;
        assert!(mae < 0.02, "mean absolute error {mae}");
    }

    #[test]
    fn augmented_labels_stay_in_the_input_id_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let image = blob_image(20, 20);
        let data: Vec<u32> = (0..400).map(|i| [0, 0, 3, 8][i % 4]).collect();
        let inst = InstanceLabelMap::new(Raster::from_vec(20, 20, data.clone()).unwrap());
        let allowed: std::collections::HashSet<u32> = data.into_iter().collect();
        let config = AugmentConfig::default();
        for _ in 0..100 {
            let (_, labels) = augment_sample(&image, &inst, &config, &mut rng).unwrap();
            assert!(labels.raster().data().iter().all(|v| allowed.contains(v)));
        }
    }
}
