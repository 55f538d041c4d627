//! Cosine similarity and segmentation losses.
//!
//! The functions here validate their inputs and evaluate through the same
//! graph kernels the model uses, so they double as checked entry points for
//! those kernels.

use std::sync::Arc;

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Stabiliser in cosine denominators.
pub const COSINE_EPS: f64 = 1e-8;
/// Additive smoothing in the dice ratio.
pub const DICE_SMOOTH: f64 = 1.0;

/// `a.b / (|a||b| + 1e-8)`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("cosine of lengths {} and {}", a.len(), b.len())));
    }
    let mut g = Graph::new();
    let x = g.constant(Tensor::row(a.to_vec()));
    let y = g.constant(Tensor::row(b.to_vec()));
    let c = g.cosine(x, y, COSINE_EPS);
    Ok(g.value(c).item())
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::Shape(format!("{} labels for {rows} rows", labels.len())));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange {
            label: l,
            max: classes.saturating_sub(1),
        });
    }
    Ok(())
}

/// Mean over rows of `-log softmax(logits)[label]`.
pub fn cross_entropy_loss(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    check_labels(labels, logits.rows(), logits.cols())?;
    let mut g = Graph::new();
    let x = g.constant(logits.clone());
    let l = g.cross_entropy(x, Arc::new(labels.to_vec()));
    g.check_finite()?;
    Ok(g.value(l).item())
}

/// Row-wise softmax.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let x = g.constant(logits.clone());
    let p = g.softmax_rows(x);
    g.value(p).clone()
}

/// Soft dice loss averaged over classes present in `labels`.
pub fn dice_loss(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    check_labels(labels, probs.rows(), probs.cols())?;
    for r in 0..probs.rows() {
        let row = probs.row_slice(r);
        let s: f64 = row.iter().sum();
        if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (s - 1.0).abs() > 1e-6 {
            return Err(Error::Shape(format!("row {r} is not a probability vector")));
        }
    }
    let mut g = Graph::new();
    let x = g.constant(probs.clone());
    let l = g.dice(x, Arc::new(labels.to_vec()), DICE_SMOOTH);
    Ok(g.value(l).item())
}
