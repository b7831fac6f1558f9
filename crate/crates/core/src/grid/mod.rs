//! Discrete state space: multi-channel pixel fields, the boundary
//! decomposition used by the stencils, and binary image/tensor I/O.
//!
//! A [`Field`] stores `channels × height × width` values in channel-major,
//! row-major order. The first spatial index `i1` runs over rows
//! (`0..height`), the second `i2` over columns (`0..width`). Grid spacing is 1.

mod domain;
mod image;
mod snapshot;

pub use domain::{decompose_domain, DomainDecomposition, PixelClass};
pub use image::{read_image, write_image, decode_pnm, encode_pnm};
pub use snapshot::{load_snapshot, save_snapshot, save_snapshot_as, SnapshotDtype, SNAPSHOT_MAGIC};

use crate::error::{Error, Result};
use std::fmt;

/// Dimensions of a [`Field`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Shape {
            channels,
            height,
            width,
        }
    }

    /// Total number of scalar entries.
    pub const fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Pixels per channel.
    pub const fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Fails unless the spatial grid is large enough for the ±2 stencils.
    pub fn require_stencil_grid(&self) -> Result<()> {
        if self.height < 3 || self.width < 3 {
            return Err(Error::DimensionTooSmall {
                height: self.height,
                width: self.width,
            });
        }
        Ok(())
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// A real-valued multi-channel grid.
///
/// All values are finite. Positive dimensions are required; the 3×3 minimum
/// needed by the drift and diffusion stencils is checked where those stencils
/// are applied, so that scalar (1×1×1) states remain representable.
#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    shape: Shape,
    values: Vec<f64>,
}

impl Field {
    pub fn zeros(shape: Shape) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        assert!(
            shape.channels > 0 && shape.height > 0 && shape.width > 0,
            "field dimensions must be positive"
        );
        Field {
            shape,
            values: vec![value; shape.len()],
        }
    }

    /// Wraps `values` (channel-major, row-major), rejecting wrong lengths and
    /// non-finite entries.
    pub fn from_vec(shape: Shape, values: Vec<f64>) -> Result<Self> {
        if shape.channels == 0 || shape.height == 0 || shape.width == 0 {
            return Err(Error::InvalidArgument(format!(
                "field dimensions must be positive, got {shape}"
            )));
        }
        if values.len() != shape.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} values for shape {shape}, got {}",
                shape.len(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Field { shape, values })
    }

    /// Builds a field by evaluating `f(channel, i1, i2)` at every entry.
    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(shape.len());
        for c in 0..shape.channels {
            for i1 in 0..shape.height {
                for i2 in 0..shape.width {
                    values.push(f(c, i1, i2));
                }
            }
        }
        Field { shape, values }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape.channels
    }

    pub fn height(&self) -> usize {
        self.shape.height
    }

    pub fn width(&self) -> usize {
        self.shape.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mutable access to the raw buffer. Callers are responsible for keeping
    /// the values finite; step functions re-check after every update.
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn index(&self, c: usize, i1: usize, i2: usize) -> usize {
        (c * self.shape.height + i1) * self.shape.width + i2
    }

    #[inline]
    pub fn get(&self, c: usize, i1: usize, i2: usize) -> f64 {
        self.values[self.index(c, i1, i2)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, i1: usize, i2: usize, value: f64) {
        let idx = self.index(c, i1, i2);
        self.values[idx] = value;
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.shape.pixels();
        &self.values[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.shape.pixels();
        &mut self.values[c * n..(c + 1) * n]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn ensure_same_shape(&self, other: &Field) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                expected: self.shape,
                actual: other.shape,
            });
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field {
        Field {
            shape: self.shape,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination; panics on shape mismatch.
    pub fn zip_map(&self, other: &Field, f: impl Fn(f64, f64) -> f64) -> Field {
        assert_eq!(self.shape, other.shape, "zip_map on mismatched shapes");
        Field {
            shape: self.shape,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, alpha: f64, other: &Field) {
        assert_eq!(self.shape, other.shape, "add_scaled on mismatched shapes");
        for (a, &b) in self.values.iter_mut().zip(&other.values) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for v in &mut self.values {
            *v *= alpha;
        }
    }

    pub fn scaled(&self, alpha: f64) -> Field {
        self.map(|v| alpha * v)
    }

    pub fn dot(&self, other: &Field) -> f64 {
        assert_eq!(self.shape, other.shape, "dot on mismatched shapes");
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn channel_norm(&self, c: usize) -> f64 {
        self.channel(c).iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Field) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on mismatched shapes");
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// Central-difference gradient at pixel `(i1, i2)` of one channel with the
/// Neumann convention: the component normal to an edge is zero and both
/// components vanish at the four corners.
#[inline]
pub(crate) fn central_gradient(chan: &[f64], n1: usize, n2: usize, i1: usize, i2: usize) -> (f64, f64) {
    let at = |a: usize, b: usize| chan[a * n2 + b];
    let g1 = if i1 > 0 && i1 + 1 < n1 {
        at(i1 + 1, i2) - at(i1 - 1, i2)
    } else {
        0.0
    };
    let g2 = if i2 > 0 && i2 + 1 < n2 {
        at(i1, i2 + 1) - at(i1, i2 - 1)
    } else {
        0.0
    };
    (g1, g2)
}
