//! Dense row-major `f64` arrays and the explicit forward/backward kernels
//! the layers are built from. There is no autograd: every composite layer
//! owns its backward pass.

mod gradcheck;
mod ops;

pub use gradcheck::{finite_diff_grad, GradComparison};
pub use ops::*;

use std::fmt;

use crate::error::{Error, Result};

/// Dimension list with no zero-sized axes.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::InvalidShape(dims.to_vec(), "rank must be at least 1"));
        }
        if dims.contains(&0) {
            return Err(Error::InvalidShape(dims.to_vec(), "zero-sized dimension"));
        }
        Ok(Shape(dims.to_vec()))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != data.len() {
            return Err(Error::shape("Tensor::new", dims, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    /// Panics on an invalid shape; use [`Tensor::new`] for untrusted dims.
    pub fn zeros(dims: &[usize]) -> Self {
        let shape = Shape::new(dims).expect("valid tensor shape");
        let n = shape.numel();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(dims: &[usize], value: f64) -> Self {
        let mut t = Tensor::zeros(dims);
        t.data.fill(value);
        t
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Data("ragged rows".into()));
        }
        Tensor::new(&[rows.len(), cols], rows.concat())
    }

    pub fn vector(values: &[f64]) -> Result<Self> {
        Tensor::new(&[values.len()], values.to_vec())
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Leading dimension, treating the tensor as `[rows, last]`.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    /// Trailing dimension.
    pub fn cols(&self) -> usize {
        *self.dims().last().expect("rank >= 1")
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != self.data.len() {
            return Err(Error::shape("reshape", self.dims(), dims));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn zeros_like(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: vec![0.0; self.data.len()],
        }
    }

    pub fn fill(&mut self, value: f64) {
        self.data.fill(value);
    }

    /// Explicit NaN/Inf detection; `what` names the tensor in the error.
    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::shape("add_assign", self.dims(), other.dims()));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.dims(), other.dims(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Copies the listed rows (of a `[rows, cols]` view) into a new tensor.
    pub fn gather_rows(&self, index: &[usize]) -> Tensor {
        let c = self.cols();
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index {
            data.extend_from_slice(self.row(i));
        }
        Tensor::new(&[index.len(), c], data).expect("non-empty gather")
    }

    /// `self[index[r]] += src[r]` for every row `r` of `src`.
    pub fn scatter_add_rows(&mut self, index: &[usize], src: &Tensor) {
        debug_assert_eq!(index.len(), src.rows());
        for (r, &i) in index.iter().enumerate() {
            for (a, b) in self.row_mut(i).iter_mut().zip(src.row(r)) {
                *a += b;
            }
        }
    }

    /// Storage form used by checkpoints.
    pub fn to_f32_vec(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }

    pub fn from_f32(dims: &[usize], values: &[f32]) -> Result<Self> {
        Tensor::new(dims, values.iter().map(|&v| f64::from(v)).collect())
    }

    /// Rounds every entry through 32-bit storage precision in place.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.data {
            *v = f64::from(*v as f32);
        }
    }
}
