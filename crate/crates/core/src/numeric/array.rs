use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

/// Row-major dense array of `f64`.
///
/// Almost everything in this crate is a matrix (`rows × cols`); one-dimensional
/// arrays are treated as a single row. A zero-width matrix is allowed so that
/// unconditional generation can carry an empty state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseArray {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl DenseArray {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::Shape("empty shape".into()));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} entries, got {}",
                data.len()
            )));
        }
        ensure_finite(&data, "array")?;
        Ok(Self { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            shape: vec![rows, cols],
            data: vec![0.0; rows * cols],
        }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![1, n], data)
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::matrix(rows.len(), cols, data)
    }

    /// Internal constructor for kernel outputs whose finiteness is checked by the caller.
    pub(crate) fn from_parts(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(rows * cols, data.len());
        Self {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rows(&self) -> usize {
        if self.shape.len() == 1 {
            1
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn vstack(parts: &[&DenseArray]) -> Result<Self> {
        let cols = parts.first().map_or(0, |p| p.cols());
        if parts.iter().any(|p| p.cols() != cols) {
            return Err(Error::Shape("vstack: column counts differ".into()));
        }
        let rows = parts.iter().map(|p| p.rows()).sum();
        let data = parts.iter().flat_map(|p| p.data.iter().copied()).collect();
        Ok(Self::from_parts(rows, cols, data))
    }

    /// Contiguous row range `[start, end)`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        let c = self.cols();
        Self::from_parts(end - start, c, self.data[start * c..end * c].to_vec())
    }

    /// Elementwise `a * self + b * other`.
    pub fn axpby(&self, a: f64, other: &DenseArray, b: f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "{:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data: Vec<f64> = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(x, y)| a * x + b * y)
            .collect();
        ensure_finite(&data, "axpby")?;
        Ok(Self {
            shape: self.shape.clone(),
            data,
        })
    }
}
