//! Dense f64 tensors with reverse-mode differentiation.
//!
//! The kernel is deliberately small: row-major [`Tensor`] values, a [`Tape`]
//! that records the forward pass and replays it backwards, plain SGD with
//! momentum, and a finite-difference [`grad_check`] harness. Every loss in
//! the adaptation pipelines is built from the primitive set in
//! [`tape::Tape`]; nothing here knows about domains or prototypes.

mod gradcheck;
mod sgd;
mod tape;

pub use gradcheck::{grad_check, DEFAULT_GRAD_EPS};
pub use sgd::{Sgd, SgdConfig};
pub use tape::{Tape, Var};

use crate::error::{Error, Result};

/// Dense row-major tensor of 64-bit floats.
///
/// Shape `[n]` is a vector, `[r, c]` a matrix, `[1]` a scalar. Data length
/// always equals the product of the shape entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::invalid_argument(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Row count of a matrix (or length of a vector).
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Column count of a matrix; 1 for a vector.
    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1]
        } else {
            1
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn assert_finite(&self, what: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Numeric(format!("{what} contains a non-finite value")))
        }
    }
}

/// Row-wise temperature softmax with max-subtraction.
///
/// Each output row is nonnegative and sums to 1 (within 1e-12 even for
/// logits of magnitude ±50). `temperature` must be strictly positive.
pub fn softmax_rows(logits: &Tensor, temperature: f64) -> Result<Tensor> {
    if !(temperature > 0.0) {
        return Err(Error::invalid_argument(format!(
            "softmax temperature must be > 0, got {temperature}"
        )));
    }
    logits.assert_finite("softmax input")?;
    let (r, c) = (logits.rows(), logits.cols());
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        softmax_slice(logits.row(i), temperature, &mut out[i * c..(i + 1) * c]);
    }
    Tensor::from_vec(logits.shape(), out)
}

pub(crate) fn softmax_slice(row: &[f64], temperature: f64, out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = ((v - max) / temperature).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Cosine similarity of two equal-length vectors, clamped to [-1, 1].
///
/// Zero-norm inputs are rejected: the angle is undefined there.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    assert_eq!(a.len(), b.len(), "cosine_similarity length mismatch");
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateInput(
            "cosine similarity of a zero-norm vector".to_string(),
        ));
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}
