//! Dense tensors and the reverse-mode differentiation engine.
//!
//! [`Tensor`] is a plain row-major array. Differentiable computation is
//! recorded on a [`Graph`] whose nodes own their forward values; calling
//! [`Graph::backward`] replays the tape in reverse and never mutates it, so
//! the same graph can be differentiated any number of times.

mod gemm;
mod graph;
mod gradcheck;
mod ops;
mod params;

pub use graph::{BnUpdate, Gradients, Graph, Var};
pub use gradcheck::{finite_diff_at, finite_diff_at_4th, finite_diff_grad, max_rel_err, rel_err};
pub use ops::{conv_out_len, l2_normalize, squash, BatchNormArgs, Padding, L2_EPS, SQUASH_EPS};
pub use params::{ParamId, ParamStore};

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Scalar element type. Implemented for `f32` (training) and `f64`
/// (gradient checks).
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    const NAME: &'static str;

    fn of(x: f64) -> Self;

    /// c = a·b (+ c when `accumulate`), strides in elements.
    #[allow(clippy::too_many_arguments)]
    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (usize, usize),
        b: &[Self],
        b_strides: (usize, usize),
        c: &mut [Self],
        c_strides: (usize, usize),
        accumulate: bool,
    );
}

impl Real for f32 {
    const NAME: &'static str = "f32";

    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }

    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        a_strides: (usize, usize),
        b: &[f32],
        b_strides: (usize, usize),
        c: &mut [f32],
        c_strides: (usize, usize),
        accumulate: bool,
    ) {
        gemm::sgemm(m, k, n, a, a_strides, b, b_strides, c, c_strides, accumulate)
    }
}

impl Real for f64 {
    const NAME: &'static str = "f64";

    #[inline]
    fn of(x: f64) -> Self {
        x
    }

    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        a_strides: (usize, usize),
        b: &[f64],
        b_strides: (usize, usize),
        c: &mut [f64],
        c_strides: (usize, usize),
        accumulate: bool,
    ) {
        gemm::dgemm(m, k, n, a, a_strides, b, b_strides, c, c_strides, accumulate)
    }
}

/// Row-major dense array. A scalar has an empty shape and one element.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::dim(format!("zero-sized dimension in shape {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| T::of(v)).collect())
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&x| U::of(x.to_f64().unwrap_or(f64::NAN)))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Slice along the leading axis: rows `start..start + count`.
    pub fn rows(&self, start: usize, count: usize) -> Result<Self> {
        let lead = *self
            .shape
            .first()
            .ok_or_else(|| Error::dim("rows() on a scalar"))?;
        if start + count > lead || count == 0 {
            return Err(Error::dim(format!(
                "rows {start}..{} out of range for leading size {lead}",
                start + count
            )));
        }
        let row: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = count;
        Ok(Tensor {
            shape,
            data: self.data[start * row..(start + count) * row].to_vec(),
        })
    }

    /// Stack equally-shaped tensors along a new leading axis.
    pub fn stack(items: &[&Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::dim("stack of zero tensors"))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::dim(format!(
                    "stack shape mismatch: {:?} vs {:?}",
                    first.shape, t.shape
                )));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data })
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_length_must_agree() {
        assert!(Tensor::<f64>::new(&[2, 3], vec![0.0; 6]).is_ok());
        let err = Tensor::<f64>::new(&[2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
        assert!(Tensor::<f64>::new(&[0, 3], vec![]).is_err());
    }

    #[test]
    fn scalar_has_one_element() {
        let s = Tensor::scalar(2.5f32);
        assert_eq!(s.rank(), 0);
        assert_eq!(s.item().unwrap(), 2.5);
    }

    #[test]
    fn stack_and_rows_are_inverse() {
        let a = Tensor::<f32>::from_f64(&[2], &[1.0, 2.0]).unwrap();
        let b = Tensor::<f32>::from_f64(&[2], &[3.0, 4.0]).unwrap();
        let s = Tensor::stack(&[&a, &b]).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.rows(1, 1).unwrap().data(), b.data());
    }
}
