//! Softmax and cross-entropy against soft targets.

use crate::error::{Result, SelcError};
use crate::tensor::Matrix2D;

/// Lower clamp applied to probabilities before taking logs.
pub const LOG_EPS: f64 = 1e-12;

/// Per-sample losses plus their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub per_sample: Vec<f64>,
    pub mean: f64,
}

impl LossOutput {
    pub fn from_per_sample(per_sample: Vec<f64>) -> Self {
        let mean = if per_sample.is_empty() {
            0.0
        } else {
            per_sample.iter().sum::<f64>() / per_sample.len() as f64
        };
        Self { per_sample, mean }
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax(logits: &Matrix2D) -> Matrix2D {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `−tᵀ log p` for one sample, with `p` clamped at [`LOG_EPS`].
#[inline]
pub fn soft_ce(target: &[f64], probs: &[f64]) -> f64 {
    -target
        .iter()
        .zip(probs)
        .map(|(&t, &p)| if t == 0.0 { 0.0 } else { t * p.max(LOG_EPS).ln() })
        .sum::<f64>()
}

pub fn soft_ce_loss(targets: &Matrix2D, probs: &Matrix2D) -> Result<LossOutput> {
    if targets.shape() != probs.shape() {
        return Err(SelcError::dim(format!(
            "targets {:?} vs probabilities {:?}",
            targets.shape(),
            probs.shape()
        )));
    }
    let per_sample = targets
        .row_iter()
        .zip(probs.row_iter())
        .map(|(t, p)| soft_ce(t, p))
        .collect();
    Ok(LossOutput::from_per_sample(per_sample))
}

/// Hard-label cross entropy, `−log p[label]`.
pub fn hard_ce_losses(labels: &[usize], probs: &Matrix2D) -> Result<Vec<f64>> {
    if labels.len() != probs.rows() {
        return Err(SelcError::dim(format!(
            "{} labels for {} prediction rows",
            labels.len(),
            probs.rows()
        )));
    }
    labels
        .iter()
        .zip(probs.row_iter())
        .map(|(&y, p)| {
            p.get(y)
                .map(|&py| -py.max(LOG_EPS).ln())
                .ok_or_else(|| SelcError::dim(format!("label {y} outside {} classes", p.len())))
        })
        .collect()
}

pub fn one_hot(labels: &[usize], num_classes: usize) -> Matrix2D {
    let mut m = Matrix2D::zeros(labels.len(), num_classes);
    for (i, &y) in labels.iter().enumerate() {
        m[(i, y)] = 1.0;
    }
    m
}
