//! Dense row-major tensors (rank 0, 1 or 2) and flat parameter vectors.
//!
//! Tensors are immutable values once constructed; every constructor checks
//! that the element count matches the shape and that all values are finite.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor, validating shape/length agreement and finiteness.
    pub fn from_shape(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        if shape.len() > 2 {
            return Err(Error::Shape(format!(
                "rank {} unsupported (max 2)",
                shape.len()
            )));
        }
        let t = Tensor { shape, data };
        t.check_finite("tensor construction")?;
        Ok(t)
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::from_shape(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Scalar value of a rank-0 tensor.
    pub fn item(&self) -> Result<f64> {
        if self.rank() != 0 {
            return Err(Error::Shape(format!(
                "item() needs a scalar, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Rows of a matrix; a vector counts as a single row.
    pub fn rows(&self) -> usize {
        match self.rank() {
            2 => self.shape[0],
            1 => 1,
            _ => 1,
        }
    }

    /// Columns of a matrix, or the length of a vector.
    pub fn cols(&self) -> usize {
        match self.rank() {
            2 => self.shape[1],
            1 => self.shape[0],
            _ => 1,
        }
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[row * self.shape[1] + col]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }
}

/// Flattened model weights: the unit of dispatch, encryption and aggregation.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector(Vec<f64>);

impl ParameterVector {
    pub fn new(values: Vec<f64>) -> Self {
        ParameterVector(values)
    }

    pub fn zeros(n: usize) -> Self {
        ParameterVector(vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Squared Euclidean distance to another vector of the same length.
    pub fn squared_distance(&self, other: &ParameterVector) -> Result<f64> {
        if self.len() != other.len() {
            return Err(Error::Shape(format!(
                "parameter vectors of length {} and {}",
                self.len(),
                other.len()
            )));
        }
        Ok(self
            .0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum())
    }

    /// Largest absolute coordinate difference to another vector.
    pub fn max_abs_diff(&self, other: &ParameterVector) -> Result<f64> {
        if self.len() != other.len() {
            return Err(Error::Shape(format!(
                "parameter vectors of length {} and {}",
                self.len(),
                other.len()
            )));
        }
        Ok(self
            .0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

impl From<Vec<f64>> for ParameterVector {
    fn from(v: Vec<f64>) -> Self {
        ParameterVector(v)
    }
}

/// One plain SGD update: `p' = p - lr * g`, elementwise.
///
/// `lr = 0` is allowed and returns the parameters unchanged.
pub fn sgd_step(
    params: &ParameterVector,
    grads: &ParameterVector,
    lr: f64,
) -> Result<ParameterVector> {
    if params.len() != grads.len() {
        return Err(Error::Shape(format!(
            "sgd_step: params len {} vs grads len {}",
            params.len(),
            grads.len()
        )));
    }
    if !(lr >= 0.0) {
        return Err(Error::Contract(format!("sgd_step: lr {lr} must be >= 0")));
    }
    Ok(ParameterVector(
        params
            .as_slice()
            .iter()
            .zip(grads.as_slice())
            .map(|(p, g)| p - lr * g)
            .collect(),
    ))
}
