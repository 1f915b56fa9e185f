//! Dense row-major tensors of up to four axes.
//!
//! Values are held as `f64` regardless of [`Dtype`]; the dtype records the
//! storage precision. A `Dtype::F32` tensor only ever holds values that are
//! exactly representable in binary32, so converting to and from disk is
//! lossless.

use crate::error::{Error, Result};

pub const MAX_RANK: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn size_of(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn descr(self) -> &'static str {
        match self {
            Dtype::F32 => "<f4",
            Dtype::F64 => "<f8",
        }
    }

    /// Rounds `x` to this dtype's precision.
    #[inline]
    pub fn round(self, x: f64) -> f64 {
        match self {
            Dtype::F32 => x as f32 as f64,
            Dtype::F64 => x,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    dtype: Dtype,
}

impl Tensor {
    /// Builds a tensor, rounding `data` to `dtype` precision.
    ///
    /// Fails if the rank exceeds four, the element count does not match the
    /// shape, or any value is NaN/Inf.
    pub fn new(shape: Vec<usize>, mut data: Vec<f64>, dtype: Dtype) -> Result<Self> {
        if shape.len() > MAX_RANK {
            return Err(Error::InvalidParameter(format!(
                "rank {} exceeds the maximum of {MAX_RANK}",
                shape.len()
            )));
        }
        let expected = numel(&shape);
        if expected != data.len() {
            return Err(Error::LengthMismatch {
                shape,
                expected,
                found: data.len(),
            });
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite { index, value });
        }
        if dtype == Dtype::F32 {
            for x in &mut data {
                *x = *x as f32 as f64;
            }
        }
        Ok(Tensor { shape, data, dtype })
    }

    pub fn from_f64(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Self::new(shape, data, Dtype::F64)
    }

    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::new(shape, data.into_iter().map(f64::from).collect(), Dtype::F32)
    }

    pub fn zeros(shape: Vec<usize>, dtype: Dtype) -> Self {
        let n = numel(&shape);
        Tensor {
            shape,
            data: vec![0.0; n],
            dtype,
        }
    }

    /// Kernel output constructor: values are already finite by construction.
    pub(crate) fn from_parts(shape: Vec<usize>, mut data: Vec<f64>, dtype: Dtype) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        if dtype == Dtype::F32 {
            for x in &mut data {
                *x = *x as f32 as f64;
            }
        }
        Tensor { shape, data, dtype }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dtype(&self) -> Dtype {
        self.dtype
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Same values at a different precision.
    pub fn cast(&self, dtype: Dtype) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.clone(), dtype)
    }

    /// Reinterprets the same row-major buffer under a new shape.
    pub fn reshape(self, shape: Vec<usize>) -> Result<Tensor> {
        if numel(&shape) != self.data.len() || shape.len() > MAX_RANK {
            return Err(Error::LengthMismatch {
                expected: numel(&shape),
                found: self.data.len(),
                shape,
            });
        }
        Ok(Tensor { shape, ..self })
    }

    /// Row-major strides in elements.
    pub fn strides(&self) -> Vec<usize> {
        strides(&self.shape)
    }

    /// Flat offset of a multi-index, or `None` when out of bounds.
    pub fn offset(&self, index: &[usize]) -> Option<usize> {
        if index.len() != self.shape.len() {
            return None;
        }
        let mut off = 0;
        for (&i, &n) in index.iter().zip(&self.shape) {
            if i >= n {
                return None;
            }
            off = off * n + i;
        }
        Some(off)
    }

    pub fn get(&self, index: &[usize]) -> Option<f64> {
        self.offset(index).map(|o| self.data[o])
    }

    /// Bitwise equality of shape, dtype and every value.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self.dtype == other.dtype
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub(crate) fn expect_rank(&self, what: &'static str, rank: usize) -> Result<()> {
        if self.rank() != rank {
            return Err(Error::Rank {
                what,
                expected: rank,
                shape: self.shape.clone(),
            });
        }
        Ok(())
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut out = vec![1; shape.len()];
    for axis in (0..shape.len().saturating_sub(1)).rev() {
        out[axis] = out[axis + 1] * shape[axis + 1];
    }
    out
}

/// Frame/grid extents `(t, w, h)` of a video token grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape3 {
    pub t: usize,
    pub w: usize,
    pub h: usize,
}

impl Shape3 {
    pub fn new(t: usize, w: usize, h: usize) -> Result<Self> {
        if t == 0 || w == 0 || h == 0 {
            return Err(Error::InvalidParameter(format!(
                "grid extents must be >= 1, got ({t}, {w}, {h})"
            )));
        }
        Ok(Shape3 { t, w, h })
    }

    pub fn tokens(&self) -> usize {
        self.t * self.w * self.h
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.t, self.w, self.h]
    }

    /// Leading three extents of a 3-D or 4-D tensor.
    pub fn of(tensor: &Tensor) -> Result<Self> {
        let s = tensor.shape();
        if s.len() < 3 {
            return Err(Error::Rank {
                what: "token grid",
                expected: 3,
                shape: s.to_vec(),
            });
        }
        Shape3::new(s[0], s[1], s[2])
    }
}

impl std::fmt::Display for Shape3 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {})", self.t, self.w, self.h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_index_matches_nested_enumeration() {
        for a in 1..=4 {
            for b in 1..=4 {
                for c in 1..=4 {
                    for d in 1..=4 {
                        let shape = vec![a, b, c, d];
                        let t = Tensor::zeros(shape, Dtype::F64);
                        let mut counter = 0;
                        for i in 0..a {
                            for j in 0..b {
                                for k in 0..c {
                                    for l in 0..d {
                                        assert_eq!(t.offset(&[i, j, k, l]), Some(counter));
                                        assert_eq!(((i * b + j) * c + k) * d + l, counter);
                                        counter += 1;
                                    }
                                }
                            }
                        }
                        assert_eq!(counter, t.len());
                    }
                }
            }
        }
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(matches!(
            Tensor::from_f64(vec![2, 3], vec![0.0; 5]),
            Err(Error::LengthMismatch { .. })
        ));
        assert!(matches!(
            Tensor::from_f64(vec![2], vec![0.0, f64::NAN]),
            Err(Error::NonFinite { index: 1, .. })
        ));
        assert!(Tensor::from_f64(vec![1; 5], vec![0.0]).is_err());
    }

    #[test]
    fn f32_rounding_on_construction() {
        let t = Tensor::new(vec![1], vec![0.1], Dtype::F32).unwrap();
        assert_eq!(t.data()[0], 0.1f32 as f64);
    }

    #[test]
    fn zero_extent_and_scalar() {
        let t = Tensor::from_f64(vec![0, 5], vec![]).unwrap();
        assert!(t.is_empty());
        let s = Tensor::from_f64(vec![], vec![3.0]).unwrap();
        assert_eq!(s.get(&[]), Some(3.0));
    }

    #[test]
    fn strides_row_major() {
        assert_eq!(strides(&[2, 3, 4, 5]), vec![60, 20, 5, 1]);
        assert_eq!(strides(&[7]), vec![1]);
    }
}
