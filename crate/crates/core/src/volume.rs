//! Dense rank-4 voxel grids, the carrier type for images, latents, masks and
//! feature maps.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::shape_err;

/// Logical shape of a [`Volume`]: channels, depth, height, width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape4 {
    pub c: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub const fn new(c: usize, d: usize, h: usize, w: usize) -> Self {
        Shape4 { c, d, h, w }
    }

    pub const fn len(&self) -> usize {
        self.c * self.d * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn spatial(&self) -> usize {
        self.d * self.h * self.w
    }

    /// Flat index of `(c, z, y, x)` in row-major order.
    #[inline(always)]
    pub const fn idx(&self, c: usize, z: usize, y: usize, x: usize) -> usize {
        ((c * self.d + z) * self.h + y) * self.w + x
    }
}

impl core::fmt::Display for Shape4 {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.c, self.d, self.h, self.w)
    }
}

/// Dense volume of finite `f64` values, flat in row-major `(c, z, y, x)`
/// order. Once constructed a volume is an immutable value as far as the
/// public ops are concerned; mutation happens through owned handles only.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    shape: Shape4,
    data: Vec<f64>,
}

impl Volume {
    /// Builds a volume, validating length and finiteness.
    pub fn new(shape: Shape4, data: Vec<f64>) -> Result<Self> {
        if shape.len() == 0 {
            return Err(shape_err!("volume dims must be positive, got {shape}"));
        }
        if data.len() != shape.len() {
            return Err(shape_err!(
                "data length {} does not match shape {shape} ({} elements)",
                data.len(),
                shape.len()
            ));
        }
        if !math::all_finite(&data) {
            return Err(Error::NonFinite("volume data contains NaN/Inf".into()));
        }
        Ok(Volume { shape, data })
    }

    pub fn zeros(shape: Shape4) -> Self {
        Volume {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn filled(shape: Shape4, value: f64) -> Self {
        Volume {
            shape,
            data: vec![value; shape.len()],
        }
    }

    #[inline]
    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn at(&self, c: usize, z: usize, y: usize, x: usize) -> f64 {
        self.data[self.shape.idx(c, z, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, z: usize, y: usize, x: usize, v: f64) {
        let i = self.shape.idx(c, z, y, x);
        self.data[i] = v;
    }

    /// Read-only view of one channel.
    pub fn channel(&self, c: usize) -> &[f64] {
        let s = self.shape.spatial();
        &self.data[c * s..(c + 1) * s]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let s = self.shape.spatial();
        &mut self.data[c * s..(c + 1) * s]
    }

    pub fn is_finite(&self) -> bool {
        math::all_finite(&self.data)
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(alloc::format!("{what} contains NaN/Inf")))
        }
    }

    pub fn ensure_same_shape(&self, other: &Volume, what: &str) -> Result<()> {
        if self.shape == other.shape() {
            Ok(())
        } else {
            Err(shape_err!(
                "{what}: shapes differ ({} vs {})",
                self.shape,
                other.shape()
            ))
        }
    }

    /// Element-wise map into a new volume.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Volume {
        Volume {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `self + scale * other`, shapes must match.
    pub fn add_scaled(&self, other: &Volume, scale: f64) -> Result<Volume> {
        self.ensure_same_shape(other, "add_scaled")?;
        let mut out = self.clone();
        math::axpy(&mut out.data, scale, &other.data);
        Ok(out)
    }

    pub fn scale(&self, s: f64) -> Volume {
        self.map(|v| v * s)
    }

    pub fn mean(&self) -> f64 {
        let mut acc = 0.0;
        for &v in &self.data {
            acc += v;
        }
        acc / self.data.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        let mut m = 0.0f64;
        for &v in &self.data {
            let a = math::abs(v);
            if a > m {
                m = a;
            }
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_is_row_major() {
        let s = Shape4::new(2, 3, 4, 5);
        assert_eq!(s.idx(0, 0, 0, 0), 0);
        assert_eq!(s.idx(0, 0, 0, 1), 1);
        assert_eq!(s.idx(0, 0, 1, 0), 5);
        assert_eq!(s.idx(0, 1, 0, 0), 20);
        assert_eq!(s.idx(1, 0, 0, 0), 60);
        assert_eq!(s.idx(1, 2, 3, 4), 119);
    }

    #[test]
    fn new_rejects_length_mismatch() {
        let err = Volume::new(Shape4::new(1, 2, 2, 2), vec![0.0; 7]).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn new_rejects_non_finite() {
        let err = Volume::new(Shape4::new(1, 1, 1, 2), vec![0.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn channel_views_partition_data() {
        let s = Shape4::new(2, 1, 2, 2);
        let v = Volume::new(s, (0..8).map(|i| i as f64).collect()).unwrap();
        assert_eq!(v.channel(0), &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(v.channel(1), &[4.0, 5.0, 6.0, 7.0]);
    }
}
