//! Evaluation against the hidden true labels: correction accuracy,
//! memorization fractions and confusion matrices of corrected labels.
//!
//! This is the only module that reads [`TrueLabels`].

use serde::Serialize;

use crate::dataset::TrueLabels;
use crate::error::{Result, SelcError};
use crate::tensor::{argmax, Matrix2D};

fn check_aligned(what: &str, rows: usize, true_labels: &TrueLabels) -> Result<()> {
    if rows != true_labels.len() {
        return Err(SelcError::dim(format!(
            "{what} has {rows} rows but there are {} true labels",
            true_labels.len()
        )));
    }
    Ok(())
}

/// Fraction of samples whose target argmax is the true class.
pub fn correction_accuracy(targets: &Matrix2D, true_labels: &TrueLabels) -> Result<f64> {
    check_aligned("targets", targets.rows(), true_labels)?;
    if targets.rows() == 0 {
        return Err(SelcError::param("no samples to evaluate"));
    }
    let hits = targets
        .row_iter()
        .zip(true_labels.as_slice())
        .filter(|(t, &y)| argmax(t) == y)
        .count();
    Ok(hits as f64 / targets.rows() as f64)
}

/// Accuracy of predicted probabilities against labels.
pub fn accuracy(probs: &Matrix2D, labels: &[usize]) -> Result<f64> {
    if probs.rows() != labels.len() {
        return Err(SelcError::dim(format!(
            "{} predictions vs {} labels",
            probs.rows(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(SelcError::param("no samples to evaluate"));
    }
    let hits = probs
        .row_iter()
        .zip(labels)
        .filter(|(p, &y)| argmax(p) == y)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemorizationStats {
    pub epoch: usize,
    pub clean_correct_frac: f64,
    pub clean_incorrect_frac: f64,
    pub mislabeled_correct_frac: f64,
    pub mislabeled_memorized_frac: f64,
    pub mislabeled_other_frac: f64,
    pub num_clean: usize,
    pub num_mislabeled: usize,
    /// Set when there are no clean samples; the clean fractions are then 0.
    pub clean_empty: bool,
    /// Set when there are no mislabeled samples; their fractions are then 0.
    pub mislabeled_empty: bool,
}

/// Partition samples by whether their given label is correct, and by what
/// the model predicts for them.
pub fn memorization_stats(
    predictions: &Matrix2D,
    noisy_labels: &[usize],
    true_labels: &TrueLabels,
    epoch: usize,
) -> Result<MemorizationStats> {
    check_aligned("predictions", predictions.rows(), true_labels)?;
    if noisy_labels.len() != true_labels.len() {
        return Err(SelcError::dim(format!(
            "{} noisy labels vs {} true labels",
            noisy_labels.len(),
            true_labels.len()
        )));
    }
    let mut clean = [0usize; 2];
    let mut mislabeled = [0usize; 3];
    for ((p, &given), &y) in predictions
        .row_iter()
        .zip(noisy_labels)
        .zip(true_labels.as_slice())
    {
        let pred = argmax(p);
        if given == y {
            clean[usize::from(pred != y)] += 1;
        } else if pred == y {
            mislabeled[0] += 1;
        } else if pred == given {
            mislabeled[1] += 1;
        } else {
            mislabeled[2] += 1;
        }
    }
    let num_clean = clean[0] + clean[1];
    let num_mislabeled = mislabeled.iter().sum::<usize>();
    let frac = |k: usize, n: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
    Ok(MemorizationStats {
        epoch,
        clean_correct_frac: frac(clean[0], num_clean),
        clean_incorrect_frac: frac(clean[1], num_clean),
        mislabeled_correct_frac: frac(mislabeled[0], num_mislabeled),
        mislabeled_memorized_frac: frac(mislabeled[1], num_mislabeled),
        mislabeled_other_frac: frac(mislabeled[2], num_mislabeled),
        num_clean,
        num_mislabeled,
        clean_empty: num_clean == 0,
        mislabeled_empty: num_mislabeled == 0,
    })
}

/// Rows are true classes, columns are corrected classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// CSV grid: a header row `true\pred,0,1,...` then one row per true class.
    pub fn to_csv(&self) -> String {
        let c = self.num_classes();
        let mut out = String::from("true\\pred");
        for j in 0..c {
            out.push_str(&format!(",{j}"));
        }
        out.push('\n');
        for (i, row) in self.counts.iter().enumerate() {
            out.push_str(&i.to_string());
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

pub fn confusion_of_corrections(targets: &Matrix2D, true_labels: &TrueLabels) -> Result<ConfusionMatrix> {
    check_aligned("targets", targets.rows(), true_labels)?;
    let c = targets.cols();
    let mut counts = vec![vec![0u64; c]; c];
    for (t, &y) in targets.row_iter().zip(true_labels.as_slice()) {
        if y >= c {
            return Err(SelcError::param(format!("true label {y} out of range for {c} classes")));
        }
        counts[y][argmax(t)] += 1;
    }
    Ok(ConfusionMatrix { counts })
}
