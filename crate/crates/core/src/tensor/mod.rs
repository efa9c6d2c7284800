//! Dense row-major tensors and the numeric kernels the rest of the crate
//! builds on.
//!
//! [`Tensor`] is generic over its scalar type. The default `f32` is the
//! storage and interchange type (scene bundles, VLT files, score maps);
//! the aligner and trainer run their forward/backward passes on
//! `Tensor<f64>` so finite-difference gradient checks are meaningful.
//! Reductions always accumulate in `f64` in a fixed left-to-right order.

mod attention;
pub mod grad;
mod ops;

use std::fmt;

use num_traits::Float;

use crate::error::{Error, Result};

pub use attention::{
    mh_attention, mh_attention_backward, mh_attention_cached, AttentionCache, AttentionGrads,
    MhaWeights,
};
pub use ops::{
    add_row_bias, cosine_sim, l2_normalize_rows, layer_norm, layer_norm_cached, matmul, matmul_nt,
    matmul_tn, relu, sigmoid, sigmoid_scalar, softmax, softmax_rows, transpose, LayerNormCache,
    LAYER_NORM_EPS,
};

/// Scalar types a [`Tensor`] can hold.
pub trait Real: Float + Default + Send + Sync + fmt::Debug + fmt::Display + 'static {
    fn of(x: f64) -> Self;
    fn f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn f64(self) -> f64 {
        self
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<F = f32> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<F>) -> Result<Self> {
        let shape = shape.into();
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidTensor(format!(
                "dimensions must be positive, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidTensor(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        assert!(
            !shape.is_empty() && n > 0,
            "dimensions must be positive, got {shape:?}"
        );
        Self {
            shape,
            data: vec![F::zero(); n],
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: F) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> F) -> Self {
        let mut t = Self::zeros(shape);
        for (i, x) in t.data.iter_mut().enumerate() {
            *x = f(i);
        }
        t
    }

    /// Builds a matrix from row slices. Panics on ragged input.
    pub fn from_rows(rows: &[&[F]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(vec![rows.len(), cols], data).expect("valid matrix")
    }

    pub fn vector(data: Vec<F>) -> Self {
        let n = data.len();
        Self::new(vec![n], data).expect("nonempty vector")
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(vec![n, n], |i| if i / n == i % n { F::one() } else { F::zero() })
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

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// Size of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
    }

    /// Number of rows when viewed as `[prod(leading) x last]`.
    pub fn outer(&self) -> usize {
        self.data.len() / self.last_dim()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    /// Row `i` of the `[outer x last]` view.
    pub fn row(&self, i: usize) -> &[F] {
        let c = self.last_dim();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [F] {
        let c = self.last_dim();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() || shape.contains(&0) {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    /// `[outer x last]` view as an owned matrix.
    pub fn as_matrix(&self) -> Self {
        Self {
            shape: vec![self.outer(), self.last_dim()],
            data: self.data.clone(),
        }
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| G::of(x.f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        let c = self.last_dim();
        let mut shape = vec![end - start];
        shape.extend_from_slice(&self.shape[1..]);
        Self {
            shape,
            data: self.data[start * c..end * c].to_vec(),
        }
    }

    /// Stacks two matrices with equal column count.
    pub fn concat_rows(&self, other: &Self) -> Result<Self> {
        if self.rank() != 2 || other.rank() != 2 || self.cols() != other.cols() {
            return Err(Error::shape("concat_rows", &self.shape, &other.shape));
        }
        let mut data = Vec::with_capacity(self.len() + other.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(Self {
            shape: vec![self.rows() + other.rows(), self.cols()],
            data,
        })
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.add_assign(other);
        out
    }

    pub fn scale(&self, s: F) -> Self {
        self.map(|x| x * s)
    }

    /// Largest absolute value, 0 for an all-zero tensor.
    pub fn max_abs(&self) -> F {
        self.data
            .iter()
            .fold(F::zero(), |m, &x| if x.abs() > m { x.abs() } else { m })
    }

    /// Column sums of a matrix.
    pub fn sum_rows(&self) -> Self {
        let c = self.last_dim();
        let mut acc = vec![0.0f64; c];
        for r in 0..self.outer() {
            for (a, x) in acc.iter_mut().zip(self.row(r)) {
                *a += x.f64();
            }
        }
        Self::vector(acc.into_iter().map(F::of).collect())
    }
}

impl<F: Real> fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?}[", self.shape)?;
        for (i, x) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{x}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}

/// Dot product accumulated in `f64`.
#[inline]
pub fn dot<F: Real>(a: &[F], b: &[F]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.f64() * y.f64()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::<f32>::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f32>::new(vec![0, 2], vec![]).is_err());
        assert!(Tensor::<f32>::new(Vec::<usize>::new(), vec![1.0]).is_err());
    }

    #[test]
    fn rows_and_concat() {
        let a = Tensor::from_rows(&[&[1.0f32, 2.0], &[3.0, 4.0]]);
        let b = Tensor::from_rows(&[&[5.0f32, 6.0]]);
        let c = a.concat_rows(&b).unwrap();
        assert_eq!(c.shape(), &[3, 2]);
        assert_eq!(c.row(2), &[5.0, 6.0]);
        assert_eq!(c.slice_rows(1, 3).data(), &[3.0, 4.0, 5.0, 6.0]);
        assert_eq!(c.sum_rows().data(), &[9.0, 12.0]);
    }

    #[test]
    fn cast_round_trip_is_exact_for_f32_values() {
        let a = Tensor::from_fn(vec![3, 4], |i| (i as f32) * 0.1 - 0.37);
        assert_eq!(a.cast::<f64>().cast::<f32>(), a);
    }
}
