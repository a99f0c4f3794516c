//! Metric-learning losses with analytic gradients.
//!
//! Matrices are row-major `f64` slices. Both losses L2-normalize their
//! inputs internally and back-propagate through that normalization, so the
//! returned gradients are with respect to the raw rows.

mod arcface;
mod triplet;

pub use arcface::{arcface_loss, ArcFaceConfig};
pub use triplet::{select_triplets, triplet_loss, Mining, TripletConfig};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("row {row} of the {what} matrix has zero norm")]
    Degenerate { what: &'static str, row: usize },
    #[error("label {label} of sample {sample} is outside 0..{n_classes}")]
    LabelOutOfRange { sample: usize, label: usize, n_classes: usize },
    #[error("batch shape: {0}")]
    Shape(String),
    #[error("invalid loss configuration: {0}")]
    Config(String),
}

/// `B x D` embeddings with one class index per row.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub embeddings: &'a [f64],
    pub dim: usize,
    pub labels: &'a [usize],
}

impl<'a> Batch<'a> {
    pub fn new(embeddings: &'a [f64], dim: usize, labels: &'a [usize]) -> Result<Self, LossError> {
        if dim == 0 || labels.is_empty() || embeddings.len() != dim * labels.len() {
            return Err(LossError::Shape(format!(
                "{} values for {} labels of width {dim}",
                embeddings.len(),
                labels.len()
            )));
        }
        Ok(Self { embeddings, dim, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &'a [f64] {
        &self.embeddings[i * self.dim..(i + 1) * self.dim]
    }
}

/// Loss value, gradients and the number of contributing terms.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    /// Same shape as the batch embeddings.
    pub grad_embeddings: Vec<f64>,
    /// Same shape as the class weights; empty for losses without them.
    pub grad_weights: Vec<f64>,
    /// ArcFace: batch size. Triplet: triplets with a positive hinge.
    pub n_active: usize,
    /// Triplet: triplets chosen by the mining rule. ArcFace: batch size.
    pub n_selected: usize,
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Unit rows and their original norms.
pub(crate) fn normalize_rows(data: &[f64], dim: usize, what: &'static str) -> Result<(Vec<f64>, Vec<f64>), LossError> {
    let mut unit = data.to_vec();
    let mut norms = Vec::with_capacity(data.len() / dim);
    for (row, chunk) in unit.chunks_exact_mut(dim).enumerate() {
        let n = dot(chunk, chunk).sqrt();
        if n == 0.0 || !n.is_finite() {
            return Err(LossError::Degenerate { what, row });
        }
        chunk.iter_mut().for_each(|x| *x /= n);
        norms.push(n);
    }
    Ok((unit, norms))
}

/// Pulls a gradient w.r.t. a unit vector `u = x / |x|` back to `x`.
pub(crate) fn backprop_normalize(grad_unit: &[f64], unit: &[f64], norm: f64, out: &mut [f64]) {
    let along = dot(grad_unit, unit);
    for ((o, g), u) in out.iter_mut().zip(grad_unit).zip(unit) {
        *o = (g - along * u) / norm;
    }
}
