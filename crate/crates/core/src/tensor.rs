//! Dense 4-D tensors in `(batch, channel, height, width)` layout.
//!
//! All network values flow through [`Tensor4`]. The element type is generic:
//! `f32` is the training/inference dtype, `f64` is used by the
//! finite-difference gradient checks where single precision would drown the
//! comparison in rounding noise.

use crate::error::{Error, Result};

/// Scalar element type of a tensor.
///
/// Implemented for `f32` and `f64`. The `from_f64`/`to_f64` hops keep RNG
/// streams identical across dtypes: all random sampling happens in `f64` and
/// is converted once.
pub trait Scalar:
    num_traits::Float + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

/// Shape of a [`Tensor4`]: `(n, c, h, w)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for Shape4 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Dense 4-D array of scalars in row-major `(n, c, h, w)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T: Scalar> {
    shape: Shape4,
    data: Vec<T>,
}

impl<T: Scalar> Tensor4<T> {
    /// Zero-filled tensor. All dimensions must be at least 1.
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        let shape = Shape4::new(n, c, h, w);
        assert!(
            n >= 1 && c >= 1 && h >= 1 && w >= 1,
            "tensor dimensions must be >= 1, got {shape}"
        );
        Self {
            shape,
            data: vec![T::zero(); shape.len()],
        }
    }

    pub fn filled(n: usize, c: usize, h: usize, w: usize, value: T) -> Self {
        let mut t = Self::zeros(n, c, h, w);
        t.data.fill(value);
        t
    }

    /// Builds a tensor from existing data; the length must match the shape.
    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        let shape = Shape4::new(n, c, h, w);
        if data.len() != shape.len() {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                details: format!("shape {shape} needs {} values, got {}", shape.len(), data.len()),
            });
        }
        if shape.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                details: format!("all dimensions must be >= 1, got {shape}"),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
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
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        debug_assert!(n < self.shape.n && c < self.shape.c && y < self.shape.h && x < self.shape.w);
        ((n * self.shape.c + c) * self.shape.h + y) * self.shape.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let i = self.index(n, c, y, x);
        self.data[i] = v;
    }

    /// One `(n, c)` plane as a slice of `h * w` scalars.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let hw = self.shape.h * self.shape.w;
        let start = (n * self.shape.c + c) * hw;
        &self.data[start..start + hw]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let hw = self.shape.h * self.shape.w;
        let start = (n * self.shape.c + c) * hw;
        &mut self.data[start..start + hw]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Sum of all elements.
    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.data.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Converts element type, going through `f64`.
    pub fn cast<U: Scalar>(&self) -> Tensor4<U> {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|&v| U::from_f64(Scalar::to_f64(v))).collect(),
        }
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape, other.shape, "max_abs_diff: shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), |m, d| if d > m { d } else { m })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_row_major_nchw() {
        let t = Tensor4::<f32>::from_vec(1, 2, 2, 3, (0..12).map(|i| i as f32).collect()).unwrap();
        assert_eq!(t.at(0, 0, 0, 0), 0.0);
        assert_eq!(t.at(0, 0, 1, 2), 5.0);
        assert_eq!(t.at(0, 1, 0, 0), 6.0);
        assert_eq!(t.at(0, 1, 1, 1), 10.0);
    }

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Tensor4::<f32>::from_vec(1, 1, 2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn plane_slices_one_channel() {
        let t = Tensor4::<f64>::from_vec(2, 2, 1, 2, (0..8).map(|i| i as f64).collect()).unwrap();
        assert_eq!(t.plane(0, 1), &[2.0, 3.0]);
        assert_eq!(t.plane(1, 0), &[4.0, 5.0]);
    }

    #[test]
    fn cast_round_trips_f32_values() {
        let t = Tensor4::<f32>::from_vec(1, 1, 1, 3, vec![1.5, -2.25, 0.0]).unwrap();
        let d = t.cast::<f64>();
        let back = d.cast::<f32>();
        assert_eq!(t.data(), back.data());
    }
}
