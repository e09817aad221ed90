//! The attention adapter that sits on top of the frozen image features.
//!
//! For each sample `x` (a row of length `d`) the adapter computes
//!
//! ```text
//! attention = softmax(W2 · tanh(W1 · x + b1) + b2)
//! adapted   = attention ⊙ x
//! ```
//!
//! The hidden width equals `d`, so the adapter has `2d² + 2d` parameters.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{matmul_transposed, softmax_in_place, Matrix};

/// Number of trainable values in an adapter over `d`-dimensional features.
pub fn parameter_count(d: usize) -> usize {
    2 * d * d + 2 * d
}

/// Adapter weights: two `d×d` linear maps with biases.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    dim: usize,
    pub(crate) w1: Matrix,
    pub(crate) b1: Vec<f64>,
    pub(crate) w2: Matrix,
    pub(crate) b2: Vec<f64>,
}

/// Output of [`AdapterParams::forward`], with the intermediates the backward
/// pass needs.
#[derive(Debug, Clone)]
pub struct AdapterForward {
    /// `tanh(W1 · x + b1)` per sample.
    pub hidden: Matrix,
    /// Per-sample attention over feature coordinates; rows sum to one.
    pub attention: Matrix,
    /// `attention ⊙ features`.
    pub adapted: Matrix,
}

impl AdapterParams {
    pub fn new(w1: Matrix, b1: Vec<f64>, w2: Matrix, b2: Vec<f64>) -> Result<Self> {
        let d = w1.rows();
        if d == 0 {
            return Err(Error::param("adapter dimension must be at least 1"));
        }
        if w1.shape() != (d, d) || w2.shape() != (d, d) || b1.len() != d || b2.len() != d {
            return Err(Error::shape(format!(
                "inconsistent adapter shapes: w1 {:?}, b1 {}, w2 {:?}, b2 {}",
                w1.shape(),
                b1.len(),
                w2.shape(),
                b2.len()
            )));
        }
        if !b1.iter().chain(&b2).all(|v| v.is_finite()) {
            return Err(Error::Numeric("adapter bias is not finite".into()));
        }
        Ok(AdapterParams {
            dim: d,
            w1,
            b1,
            w2,
            b2,
        })
    }

    /// Fresh adapter: `W1 ~ U(-1/√d, 1/√d)`, everything else zero.
    ///
    /// With the final layer at zero the attention is exactly uniform, so the
    /// untrained adapter classifies identically to the raw features.
    pub fn init<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Result<Self> {
        if d == 0 {
            return Err(Error::param("adapter dimension must be at least 1"));
        }
        let bound = 1.0 / (d as f64).sqrt();
        let w1: Vec<f64> = (0..d * d).map(|_| rng.random_range(-bound..bound)).collect();
        Ok(AdapterParams {
            dim: d,
            w1: Matrix::from_raw(d, d, w1),
            b1: vec![0.0; d],
            w2: Matrix::zeros(d, d),
            b2: vec![0.0; d],
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn parameter_count(&self) -> usize {
        parameter_count(self.dim)
    }

    pub fn w1(&self) -> &Matrix {
        &self.w1
    }

    pub fn b1(&self) -> &[f64] {
        &self.b1
    }

    pub fn w2(&self) -> &Matrix {
        &self.w2
    }

    pub fn b2(&self) -> &[f64] {
        &self.b2
    }

    pub fn forward(&self, features: &Matrix) -> Result<AdapterForward> {
        if features.cols() != self.dim {
            return Err(Error::shape(format!(
                "features have {} columns, adapter expects {}",
                features.cols(),
                self.dim
            )));
        }
        let mut hidden = matmul_transposed(features, &self.w1)?;
        for r in 0..hidden.rows() {
            for (h, b) in hidden.row_mut(r).iter_mut().zip(&self.b1) {
                *h = (*h + b).tanh();
            }
        }
        let mut attention = matmul_transposed(&hidden, &self.w2)?;
        for r in 0..attention.rows() {
            let row = attention.row_mut(r);
            for (z, b) in row.iter_mut().zip(&self.b2) {
                *z += b;
            }
            softmax_in_place(row);
        }
        let adapted: Vec<f64> = attention
            .data()
            .iter()
            .zip(features.data())
            .map(|(a, x)| a * x)
            .collect();
        Ok(AdapterForward {
            hidden,
            adapted: Matrix::from_raw(features.rows(), self.dim, adapted),
            attention,
        })
    }

    /// Canonical flat layout: `w1` row-major, `b1`, `w2` row-major, `b2`.
    ///
    /// Aggregation, checkpoints and the communication ledger all rely on
    /// this order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        out.extend_from_slice(self.w1.data());
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(self.w2.data());
        out.extend_from_slice(&self.b2);
        out
    }

    pub fn unflatten(flat: &[f64], d: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::param("adapter dimension must be at least 1"));
        }
        let expected = parameter_count(d);
        if flat.len() != expected {
            return Err(Error::shape(format!(
                "flat adapter for d={d} needs {expected} values, got {}",
                flat.len()
            )));
        }
        let dd = d * d;
        let (w1, rest) = flat.split_at(dd);
        let (b1, rest) = rest.split_at(d);
        let (w2, b2) = rest.split_at(dd);
        AdapterParams::new(
            Matrix::new(d, d, w1.to_vec())?,
            b1.to_vec(),
            Matrix::new(d, d, w2.to_vec())?,
            b2.to_vec(),
        )
    }
}
