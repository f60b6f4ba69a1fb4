//! Self-ensemble label correction: per-sample soft targets maintained as an
//! exponential moving average of the model's per-epoch predictions.
//!
//! With `ŷ` the one-hot noisy label and `p[j]` the prediction gathered at
//! update `j`, the target after `k` updates is
//!
//! ```text
//! t[k] = α^k·ŷ + Σ_{j=1..k} (1−α)·α^{k−j}·p[j]
//! ```
//!
//! The second term alone is the ensemble prediction; training against it
//! directly (with the zero initial value) is the ensemble-only ablation.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SelcError};
use crate::loss::{one_hot, soft_ce_loss, LossOutput};
use crate::tensor::Matrix2D;

pub const SIMPLEX_TOL: f64 = 1e-9;

/// A length-`C` probability vector.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetDistribution(Vec<f64>);

impl TargetDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if !on_simplex(&probs) {
            return Err(SelcError::param(format!("{probs:?} is not a distribution")));
        }
        Ok(Self(probs))
    }

    pub fn one_hot(label: usize, num_classes: usize) -> Self {
        let mut v = vec![0.0; num_classes];
        v[label] = 1.0;
        Self(v)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

pub fn on_simplex(v: &[f64]) -> bool {
    v.iter().all(|&x| (-SIMPLEX_TOL..=1.0 + SIMPLEX_TOL).contains(&x))
        && (v.iter().sum::<f64>() - 1.0).abs() <= SIMPLEX_TOL
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    /// Option I: the ensemble prediction alone, starting from zero.
    EnsembleOnly,
    /// Option II: noisy label blended with the ensemble prediction.
    Selc,
}

impl TargetMode {
    fn as_str(self) -> &'static str {
        match self {
            TargetMode::EnsembleOnly => "ensemble_only",
            TargetMode::Selc => "selc",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "ensemble_only" => Some(TargetMode::EnsembleOnly),
            "selc" => Some(TargetMode::Selc),
            _ => None,
        }
    }
}

/// Predicted class probabilities for every training sample, row = sample id.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSnapshot {
    probs: Matrix2D,
}

impl PredictionSnapshot {
    pub fn new(probs: Matrix2D) -> Result<Self> {
        if let Some(r) = probs.row_iter().position(|row| !on_simplex(row)) {
            return Err(SelcError::param(format!(
                "prediction row {r} is not a distribution"
            )));
        }
        Ok(Self { probs })
    }

    /// Assemble from `(sample ids, probability rows)` shards. Every id in
    /// `0..num_samples` must appear exactly once.
    pub fn from_shards(
        num_samples: usize,
        num_classes: usize,
        shards: &[(Vec<usize>, Matrix2D)],
    ) -> Result<Self> {
        let mut probs = Matrix2D::zeros(num_samples, num_classes);
        let mut seen = vec![false; num_samples];
        for (ids, rows) in shards {
            if ids.len() != rows.rows() || rows.cols() != num_classes {
                return Err(SelcError::dim(format!(
                    "shard with {} ids has shape {:?}",
                    ids.len(),
                    rows.shape()
                )));
            }
            for (r, &id) in ids.iter().enumerate() {
                if id >= num_samples || std::mem::replace(&mut seen[id], true) {
                    return Err(SelcError::param(format!(
                        "sample id {id} out of range or repeated"
                    )));
                }
                probs.row_mut(id).copy_from_slice(rows.row(r));
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(SelcError::MissingPrediction(missing));
        }
        Self::new(probs)
    }

    pub fn probs(&self) -> &Matrix2D {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.rows() == 0
    }
}

/// Per-sample soft targets keyed by sample id.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleState {
    targets: Matrix2D,
    alpha: f64,
    epoch_k: usize,
    mode: TargetMode,
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(SelcError::param(format!("alpha must be in [0, 1), got {alpha}")));
    }
    Ok(())
}

impl EnsembleState {
    /// Option II: targets start at the one-hot noisy labels.
    pub fn selc(noisy_labels: &[usize], num_classes: usize, alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        if let Some(&bad) = noisy_labels.iter().find(|&&y| y >= num_classes) {
            return Err(SelcError::param(format!(
                "label {bad} outside {num_classes} classes"
            )));
        }
        Ok(Self {
            targets: one_hot(noisy_labels, num_classes),
            alpha,
            epoch_k: 0,
            mode: TargetMode::Selc,
        })
    }

    /// Option I: targets start at zero.
    pub fn ensemble_only(num_samples: usize, num_classes: usize, alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        Ok(Self {
            targets: Matrix2D::zeros(num_samples, num_classes),
            alpha,
            epoch_k: 0,
            mode: TargetMode::EnsembleOnly,
        })
    }

    pub fn targets(&self) -> &Matrix2D {
        &self.targets
    }

    pub fn target(&self, id: usize) -> &[f64] {
        self.targets.row(id)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn epoch_k(&self) -> usize {
        self.epoch_k
    }

    pub fn mode(&self) -> TargetMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.targets.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.rows() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.targets.cols()
    }

    /// `t ← α·t + (1−α)·p` for every sample, then `k ← k + 1`.
    pub fn update(&mut self, snapshot: &PredictionSnapshot) -> Result<()> {
        let probs = snapshot.probs();
        if probs.cols() != self.targets.cols() {
            return Err(SelcError::dim(format!(
                "snapshot has {} classes, targets {}",
                probs.cols(),
                self.targets.cols()
            )));
        }
        if probs.rows() < self.targets.rows() {
            return Err(SelcError::MissingPrediction(probs.rows()));
        }
        if probs.rows() > self.targets.rows() {
            return Err(SelcError::dim(format!(
                "snapshot covers {} samples, state has {}",
                probs.rows(),
                self.targets.rows()
            )));
        }
        let a = self.alpha;
        for (t, &p) in self.targets.data_mut().iter_mut().zip(probs.data()) {
            *t = a * *t + (1.0 - a) * p;
        }
        self.epoch_k += 1;
        Ok(())
    }

    /// Targets of the given sample ids, in order.
    pub fn select(&self, ids: &[usize]) -> Matrix2D {
        self.targets.select_rows(ids)
    }

    /// Textual checkpoint: one header line, then `id v0 … v(C−1)` per sample.
    /// Floats are written in shortest round-trip form, so reading back is
    /// bit-exact.
    pub fn to_checkpoint(&self) -> String {
        let mut s = format!(
            "# alpha={} epoch_k={} mode={} classes={} samples={}\n",
            self.alpha,
            self.epoch_k,
            self.mode.as_str(),
            self.targets.cols(),
            self.targets.rows()
        );
        for (id, row) in self.targets.row_iter().enumerate() {
            let _ = write!(s, "{id}");
            for v in row {
                let _ = write!(s, " {v}");
            }
            s.push('\n');
        }
        s
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let bad = |m: String| SelcError::Config(format!("checkpoint: {m}"));
        let mut lines = text.lines();
        let header = lines
            .next()
            .and_then(|h| h.strip_prefix("# "))
            .ok_or_else(|| bad("missing header".into()))?;
        let mut alpha = None;
        let mut epoch_k = None;
        let mut mode = None;
        let mut classes = None;
        let mut samples = None;
        for kv in header.split_whitespace() {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| bad(format!("header field '{kv}'")))?;
            match k {
                "alpha" => alpha = v.parse::<f64>().ok(),
                "epoch_k" => epoch_k = v.parse::<usize>().ok(),
                "mode" => mode = TargetMode::parse(v),
                "classes" => classes = v.parse::<usize>().ok(),
                "samples" => samples = v.parse::<usize>().ok(),
                _ => return Err(bad(format!("unknown header field '{k}'"))),
            }
        }
        let (Some(alpha), Some(epoch_k), Some(mode), Some(c), Some(n)) =
            (alpha, epoch_k, mode, classes, samples)
        else {
            return Err(bad("incomplete header".into()));
        };
        check_alpha(alpha)?;
        let mut targets = Matrix2D::zeros(n, c);
        let mut seen = vec![false; n];
        for (ln, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut toks = line.split_whitespace();
            let id: usize = toks
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| bad(format!("line {}: bad sample id", ln + 2)))?;
            if id >= n || std::mem::replace(&mut seen[id], true) {
                return Err(bad(format!("line {}: id {id} out of range or repeated", ln + 2)));
            }
            let vals: Vec<f64> = toks
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| bad(format!("line {}: {e}", ln + 2)))?;
            if vals.len() != c {
                return Err(bad(format!("line {}: {} values, expected {c}", ln + 2, vals.len())));
            }
            targets.row_mut(id).copy_from_slice(&vals);
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(SelcError::MissingPrediction(missing));
        }
        Ok(Self {
            targets,
            alpha,
            epoch_k,
            mode,
        })
    }

    pub fn write_checkpoint(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint()).map_err(|e| SelcError::io(path, e))
    }

    pub fn read_checkpoint(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SelcError::io(path, e))?;
        Self::from_checkpoint(&text)
    }
}

/// Functional form of [`EnsembleState::update`].
pub fn update_targets(state: &EnsembleState, snapshot: &PredictionSnapshot) -> Result<EnsembleState> {
    let mut next = state.clone();
    next.update(snapshot)?;
    Ok(next)
}

/// Unrolled target after `history.len()` updates, evaluated term by term.
pub fn closed_form_target(noisy_onehot: &[f64], history: &[Vec<f64>], alpha: f64) -> Vec<f64> {
    let k = history.len() as i32;
    let mut out: Vec<f64> = noisy_onehot.iter().map(|&y| alpha.powi(k) * y).collect();
    for (o, e) in out.iter_mut().zip(ensemble_prediction(history, alpha)) {
        *o += e;
    }
    out
}

/// `Σ_{j=1..k} (1−α)·α^{k−j}·p[j]`; its mass is `1 − α^k` for stochastic
/// histories.
pub fn ensemble_prediction(history: &[Vec<f64>], alpha: f64) -> Vec<f64> {
    let k = history.len();
    let c = history.first().map_or(0, Vec::len);
    let mut out = vec![0.0; c];
    for (j, p) in history.iter().enumerate() {
        let w = (1.0 - alpha) * alpha.powi((k - 1 - j) as i32);
        for (o, &pv) in out.iter_mut().zip(p) {
            *o += w * pv;
        }
    }
    out
}

/// Soft cross entropy of the current targets against the snapshot predictions.
pub fn selc_loss(state: &EnsembleState, snapshot: &PredictionSnapshot) -> Result<LossOutput> {
    if snapshot.len() < state.len() {
        return Err(SelcError::MissingPrediction(snapshot.len()));
    }
    soft_ce_loss(state.targets(), snapshot.probs())
}

/// `β·ŷ + (1−β)·p`.
pub fn bootstrap_target(noisy_onehot: &[f64], probs: &[f64], beta: f64) -> Result<TargetDistribution> {
    check_beta(beta)?;
    if noisy_onehot.len() != probs.len() {
        return Err(SelcError::dim(format!(
            "label of length {} vs prediction of length {}",
            noisy_onehot.len(),
            probs.len()
        )));
    }
    Ok(TargetDistribution(
        noisy_onehot
            .iter()
            .zip(probs)
            .map(|(&y, &p)| beta * y + (1.0 - beta) * p)
            .collect(),
    ))
}

/// Row-wise [`bootstrap_target`] for a batch of hard labels.
pub fn bootstrap_targets(labels: &[usize], probs: &Matrix2D, beta: f64) -> Result<Matrix2D> {
    check_beta(beta)?;
    if labels.len() != probs.rows() {
        return Err(SelcError::dim(format!(
            "{} labels for {} rows",
            labels.len(),
            probs.rows()
        )));
    }
    let mut out = probs.clone();
    for (r, &y) in labels.iter().enumerate() {
        let row = out.row_mut(r);
        for v in row.iter_mut() {
            *v *= 1.0 - beta;
        }
        row[y] += beta;
    }
    Ok(out)
}

pub(crate) fn check_beta(beta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(SelcError::param(format!("beta must be in [0, 1], got {beta}")));
    }
    Ok(())
}
