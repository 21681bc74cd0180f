//! Single-channel 2-D rasters and the dihedral transforms used for
//! test-time ensembling.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor4};

/// Dense 2-D grid of values in row-major order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

/// Gray image with real-valued samples (file loaders normalize to `[0, 1]`).
pub type GrayImage = Raster<f32>;

impl<T: Copy> Raster<T> {
    pub fn new(height: usize, width: usize, fill: T) -> Self {
        assert!(height >= 1 && width >= 1, "raster dimensions must be >= 1");
        Self {
            height,
            width,
            data: vec![fill; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width || height == 0 || width == 0 {
            return Err(Error::ShapeMismatch {
                op: "Raster::from_vec",
                details: format!("{height}x{width} raster needs {} values, got {}", height * width, data.len()),
            });
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> T {
        debug_assert!(y < self.height && x < self.width);
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: T) {
        debug_assert!(y < self.height && x < self.width);
        self.data[y * self.width + x] = v;
    }

    pub fn row(&self, y: usize) -> &[T] {
        &self.data[y * self.width..(y + 1) * self.width]
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Raster<U> {
        Raster {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Copies out the rectangle at `(y0, x0)` of size `h x w`.
    pub fn window(&self, y0: usize, x0: usize, h: usize, w: usize) -> Raster<T> {
        assert!(y0 + h <= self.height && x0 + w <= self.width, "window out of bounds");
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            data.extend_from_slice(&self.data[(y0 + y) * self.width + x0..(y0 + y) * self.width + x0 + w]);
        }
        Raster {
            height: h,
            width: w,
            data,
        }
    }
}

impl<T: Scalar> Raster<T> {
    /// Wraps the raster as a `1 x 1 x h x w` tensor.
    pub fn to_tensor(&self) -> Tensor4<T> {
        Tensor4::from_vec(1, 1, self.height, self.width, self.data.clone()).expect("sizes agree")
    }

    /// Extracts one `(n, c)` plane of a tensor as a raster.
    pub fn from_tensor_plane(t: &Tensor4<T>, n: usize, c: usize) -> Self {
        let s = t.shape();
        Self {
            height: s.h,
            width: s.w,
            data: t.plane(n, c).to_vec(),
        }
    }
}

/// The eight symmetries of the square: a quarter-turn count with an optional
/// horizontal flip applied after the rotation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Dihedral {
    Identity,
    Rot90,
    Rot180,
    Rot270,
    Flip,
    FlipRot90,
    FlipRot180,
    FlipRot270,
}

impl Dihedral {
    pub const ALL: [Dihedral; 8] = [
        Dihedral::Identity,
        Dihedral::Rot90,
        Dihedral::Rot180,
        Dihedral::Rot270,
        Dihedral::Flip,
        Dihedral::FlipRot90,
        Dihedral::FlipRot180,
        Dihedral::FlipRot270,
    ];

    /// Quarter turns (counterclockwise) before the optional flip.
    fn rotations(self) -> usize {
        match self {
            Dihedral::Identity | Dihedral::Flip => 0,
            Dihedral::Rot90 | Dihedral::FlipRot90 => 1,
            Dihedral::Rot180 | Dihedral::FlipRot180 => 2,
            Dihedral::Rot270 | Dihedral::FlipRot270 => 3,
        }
    }

    fn flipped(self) -> bool {
        matches!(
            self,
            Dihedral::Flip | Dihedral::FlipRot90 | Dihedral::FlipRot180 | Dihedral::FlipRot270
        )
    }

    pub fn apply<T: Copy>(self, r: &Raster<T>) -> Raster<T> {
        let mut out = r.clone();
        for _ in 0..self.rotations() {
            out = rot90_ccw(&out);
        }
        if self.flipped() {
            out = flip_horizontal(&out);
        }
        out
    }

    /// The transform undoing `apply`. Reflections are involutions; pure
    /// rotations invert by completing the full turn.
    pub fn inverse(self) -> Dihedral {
        match self {
            Dihedral::Rot90 => Dihedral::Rot270,
            Dihedral::Rot270 => Dihedral::Rot90,
            other => other,
        }
    }

    /// Applies the transform to every `(n, c)` plane of a tensor.
    pub fn apply_tensor<T: Scalar>(self, t: &Tensor4<T>) -> Tensor4<T> {
        let s = t.shape();
        let first = self.apply(&Raster::from_tensor_plane(t, 0, 0));
        let (oh, ow) = (first.height(), first.width());
        let mut out = Tensor4::zeros(s.n, s.c, oh, ow);
        for n in 0..s.n {
            for c in 0..s.c {
                let plane = self.apply(&Raster::from_tensor_plane(t, n, c));
                out.plane_mut(n, c).copy_from_slice(plane.data());
            }
        }
        out
    }

    pub fn parse(name: &str) -> Result<Dihedral> {
        match name {
            "id" | "identity" => Ok(Dihedral::Identity),
            "rot90" => Ok(Dihedral::Rot90),
            "rot180" => Ok(Dihedral::Rot180),
            "rot270" => Ok(Dihedral::Rot270),
            "flip" => Ok(Dihedral::Flip),
            "flip-rot90" => Ok(Dihedral::FlipRot90),
            "flip-rot180" => Ok(Dihedral::FlipRot180),
            "flip-rot270" => Ok(Dihedral::FlipRot270),
            other => Err(Error::BadArgument(format!("unknown transform '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dihedral::Identity => "id",
            Dihedral::Rot90 => "rot90",
            Dihedral::Rot180 => "rot180",
            Dihedral::Rot270 => "rot270",
            Dihedral::Flip => "flip",
            Dihedral::FlipRot90 => "flip-rot90",
            Dihedral::FlipRot180 => "flip-rot180",
            Dihedral::FlipRot270 => "flip-rot270",
        }
    }
}

/// Quarter turn counterclockwise: the rightmost column becomes the top row.
fn rot90_ccw<T: Copy>(r: &Raster<T>) -> Raster<T> {
    let (h, w) = (r.height(), r.width());
    let mut out = Raster::new(w, h, r.get(0, 0));
    for y in 0..w {
        for x in 0..h {
            out.set(y, x, r.get(x, w - 1 - y));
        }
    }
    out
}

fn flip_horizontal<T: Copy>(r: &Raster<T>) -> Raster<T> {
    let (h, w) = (r.height(), r.width());
    let mut out = Raster::new(h, w, r.get(0, 0));
    for y in 0..h {
        for x in 0..w {
            out.set(y, x, r.get(y, w - 1 - x));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Raster<i32> {
        Raster::from_vec(2, 3, vec![1, 2, 3, 4, 5, 6]).unwrap()
    }

    #[test]
    fn rot90_moves_right_column_to_top_row() {
        let r = Dihedral::Rot90.apply(&sample());
        assert_eq!(r.height(), 3);
        assert_eq!(r.width(), 2);
        assert_eq!(r.data(), &[3, 6, 2, 5, 1, 4]);
    }

    #[test]
    fn flip_mirrors_rows() {
        let r = Dihedral::Flip.apply(&sample());
        assert_eq!(r.data(), &[3, 2, 1, 6, 5, 4]);
    }

    #[test]
    fn every_transform_inverts_on_a_non_square_raster() {
        let r = Raster::from_vec(3, 5, (0..15).collect()).unwrap();
        for t in Dihedral::ALL {
            let round = t.inverse().apply(&t.apply(&r));
            assert_eq!(round, r, "{t:?}");
        }
    }

    #[test]
    fn window_copies_a_sub_rectangle() {
        let r = Raster::from_vec(3, 4, (0..12).collect::<Vec<i32>>()).unwrap();
        let w = r.window(1, 1, 2, 2);
        assert_eq!(w.data(), &[5, 6, 9, 10]);
    }

    #[test]
    fn tensor_round_trip_preserves_planes() {
        let r = Raster::from_vec(2, 2, vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let t = r.to_tensor();
        assert_eq!(Raster::from_tensor_plane(&t, 0, 0), r);
    }

    #[test]
    fn apply_tensor_transforms_each_plane() {
        let t = Tensor4::from_vec(1, 2, 2, 2, vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let r = Dihedral::Rot180.apply_tensor(&t);
        assert_eq!(r.plane(0, 0), &[4.0, 3.0, 2.0, 1.0]);
        assert_eq!(r.plane(0, 1), &[8.0, 7.0, 6.0, 5.0]);
    }
}
