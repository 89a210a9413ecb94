//! Dense 4-D tensors and the differentiable operator set built on them.

pub mod fft;
pub mod gradcheck;
mod kernels;
mod scalar;
pub mod tape;

pub use fft::{irfft2, rfft2, ComplexSpectrum};
pub use gradcheck::{finite_diff_check, finite_diff_check_params, CheckEntry, CheckReport};
pub use scalar::{ElemWidth, Scalar};
pub use tape::{Gradients, NodeId, Tape};

use crate::{Error, Result};

/// Dense tensor with fixed (n, c, h, w) layout, row-major with w fastest.
///
/// Biases and per-channel affine parameters use the degenerate shape
/// (1, c, 1, 1) so that every parameter lives in the same container.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<S> {
    shape: [usize; 4],
    data: Vec<S>,
}

impl<S: Scalar> Tensor4<S> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor4 {
            shape,
            data: vec![S::zero(); shape.iter().product()],
        }
    }

    pub fn full(shape: [usize; 4], v: S) -> Self {
        Tensor4 {
            shape,
            data: vec![v; shape.iter().product()],
        }
    }

    /// Builds a tensor from a flat row-major vector. The length must match
    /// the shape product and every element must be finite.
    pub fn from_vec(shape: [usize; 4], data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::shape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite element in tensor of shape {shape:?}"
            )));
        }
        Ok(Tensor4 { shape, data })
    }

    /// Like [`Tensor4::from_vec`] but skips the finiteness scan; used by
    /// internal kernels whose inputs are already validated.
    pub(crate) fn from_vec_unchecked(shape: [usize; 4], data: Vec<S>) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        Tensor4 { shape, data }
    }

    #[inline(always)]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }
    #[inline(always)]
    pub fn n(&self) -> usize {
        self.shape[0]
    }
    #[inline(always)]
    pub fn c(&self) -> usize {
        self.shape[1]
    }
    #[inline(always)]
    pub fn h(&self) -> usize {
        self.shape[2]
    }
    #[inline(always)]
    pub fn w(&self) -> usize {
        self.shape[3]
    }
    #[inline(always)]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline(always)]
    pub fn data(&self) -> &[S] {
        &self.data
    }
    #[inline(always)]
    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }
    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    #[inline(always)]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> S {
        self.data[((n * self.shape[1] + c) * self.shape[2] + y) * self.shape[3] + x]
    }

    #[inline(always)]
    pub fn at_mut(&mut self, n: usize, c: usize, y: usize, x: usize) -> &mut S {
        &mut self.data[((n * self.shape[1] + c) * self.shape[2] + y) * self.shape[3] + x]
    }

    /// Flat slice of one (n, c) plane, h*w elements.
    #[inline(always)]
    pub fn plane(&self, n: usize, c: usize) -> &[S] {
        let hw = self.shape[2] * self.shape[3];
        let base = (n * self.shape[1] + c) * hw;
        &self.data[base..base + hw]
    }

    #[inline(always)]
    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [S] {
        let hw = self.shape[2] * self.shape[3];
        let base = (n * self.shape[1] + c) * hw;
        &mut self.data[base..base + hw]
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, a: S) -> Self {
        self.map(|v| v * a)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn iter(&self) -> std::slice::Iter<'_, S> {
        self.data.iter()
    }

    pub fn to_f64(&self) -> Tensor4<f64> {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|v| v.as_f64()).collect(),
        }
    }

    pub fn cast<T: Scalar>(&self) -> Tensor4<T> {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|v| T::of_f64(v.as_f64())).collect(),
        }
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}
