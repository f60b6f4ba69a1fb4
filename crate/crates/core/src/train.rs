//! Epoch loop for CE, Bootstrap, SELC and the ensemble-only ablation, and the
//! mixup retraining stage on corrected targets.
//!
//! For target-correcting methods, epochs before `activation_epoch` train with
//! plain cross entropy on the noisy labels. From `activation_epoch` on, each
//! epoch first folds a full-dataset prediction snapshot (taken with the
//! parameters at the end of the previous epoch) into the targets, then trains
//! every batch against the updated targets.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::Beta;
use serde::{Deserialize, Serialize};

use crate::dataset::TrainingView;
use crate::error::{Result, SelcError};
use crate::loss::{hard_ce_losses, one_hot, soft_ce, soft_ce_loss};
use crate::mlp::MlpModel;
use crate::optim::{OptimizerState, SgdConfig};
use crate::rng::{sub_stream_rng, Stream};
use crate::selc::{bootstrap_targets, check_beta, EnsembleState, PredictionSnapshot};
use crate::tensor::{argmax, Matrix2D};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ce,
    Bootstrap,
    Selc,
    /// Targets are the ensemble prediction alone (no noisy-label term).
    EnsembleOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelcRunConfig {
    pub alpha: f64,
    /// Estimated turning point, when known.
    pub turning_point: Option<usize>,
    /// First epoch that trains against corrected targets.
    pub activation_epoch: usize,
    pub total_epochs: usize,
    pub bootstrap_beta: f64,
    /// Symmetric Beta parameter for mixup's λ.
    pub mixup_beta_param: f64,
    /// Retrain on argmax one-hots instead of soft targets.
    pub harden_targets: bool,
}

/// Activation epoch used when only the turning point is known.
pub fn default_activation_epoch(turning_point: usize) -> usize {
    turning_point.saturating_sub(10).max(1)
}

impl SelcRunConfig {
    pub fn new(alpha: f64, turning_point: usize, total_epochs: usize) -> Self {
        Self {
            alpha,
            turning_point: Some(turning_point),
            activation_epoch: default_activation_epoch(turning_point),
            total_epochs,
            bootstrap_beta: 0.8,
            mixup_beta_param: 1.0,
            harden_targets: false,
        }
    }

    /// A schedule without a turning point: corrections start at `activation_epoch`.
    pub fn with_activation(alpha: f64, activation_epoch: usize, total_epochs: usize) -> Self {
        Self {
            turning_point: None,
            activation_epoch,
            ..Self::new(alpha, total_epochs, total_epochs)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(SelcError::param(format!(
                "alpha must be in [0, 1), got {}",
                self.alpha
            )));
        }
        if let Some(t) = self.turning_point {
            if t > self.total_epochs {
                return Err(SelcError::param(format!(
                    "turning point {t} beyond total epochs {}",
                    self.total_epochs
                )));
            }
            // with T <= 1 there is no earlier epoch to activate at
            if t >= 2 && self.activation_epoch >= t {
                return Err(SelcError::param(format!(
                    "activation epoch {} must precede turning point {t}",
                    self.activation_epoch
                )));
            }
        }
        check_beta(self.bootstrap_beta)?;
        if !(self.mixup_beta_param > 0.0 && self.mixup_beta_param.is_finite()) {
            return Err(SelcError::param(format!(
                "mixup Beta parameter must be positive, got {}",
                self.mixup_beta_param
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub sgd: SgdConfig,
    pub batch_size: usize,
    pub seed: u64,
}

/// State handed to hooks after every epoch.
pub struct EpochContext<'a> {
    pub epoch: usize,
    pub lr: f64,
    /// Mean training loss over the epoch's batches.
    pub train_loss: f64,
    /// Accuracy of `train_probs` against the labels this loop trains on.
    pub train_acc: f64,
    pub selc_active: bool,
    pub model: &'a MlpModel,
    /// Predictions over the whole training set with end-of-epoch parameters.
    pub train_probs: &'a Matrix2D,
    /// Per-sample cross entropy of `train_probs` against the training labels
    /// (noisy labels, or the corrected targets during retraining).
    pub sample_losses: &'a [f64],
    pub targets: Option<&'a EnsembleState>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

pub trait EpochHook {
    fn on_epoch(&mut self, ctx: &EpochContext<'_>) -> Result<Control>;
}

impl<F> EpochHook for F
where
    F: FnMut(&EpochContext<'_>) -> Result<Control>,
{
    fn on_epoch(&mut self, ctx: &EpochContext<'_>) -> Result<Control> {
        self(ctx)
    }
}

/// Hook that does nothing.
pub fn no_hook(_: &EpochContext<'_>) -> Result<Control> {
    Ok(Control::Continue)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub selc_active: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MlpModel,
    pub state: Option<EnsembleState>,
    pub records: Vec<EpochRecord>,
    pub stopped_early: bool,
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut sub_stream_rng(seed, Stream::Shuffle, epoch as u32));
    order
}

fn check_setup(model: &MlpModel, dim: usize, classes: usize, train: &TrainConfig) -> Result<()> {
    if model.input_dim() != dim || model.num_classes() != classes {
        return Err(SelcError::dim(format!(
            "model {:?} vs data with {dim} features and {classes} classes",
            model.layer_dims()
        )));
    }
    if train.batch_size == 0 {
        return Err(SelcError::param("batch_size must be positive"));
    }
    Ok(())
}

fn accuracy(probs: &Matrix2D, labels: impl Iterator<Item = usize>) -> f64 {
    let n = probs.rows();
    if n == 0 {
        return 0.0;
    }
    let hits = probs
        .row_iter()
        .zip(labels)
        .filter(|(p, y)| argmax(p) == *y)
        .count();
    hits as f64 / n as f64
}

/// Train `model` on the noisy training view with the given method.
pub fn run_training(
    data: TrainingView<'_>,
    mut model: MlpModel,
    train: &TrainConfig,
    cfg: &SelcRunConfig,
    method: Method,
    hook: &mut dyn EpochHook,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_setup(&model, data.features.cols(), data.num_classes, train)?;
    let n = data.len();
    let labels = data.noisy_labels;
    let noisy_onehot = one_hot(labels, data.num_classes);
    let mut opt = OptimizerState::new(train.sgd.clone(), &model)?;
    let mut state = match method {
        Method::Selc => Some(EnsembleState::selc(labels, data.num_classes, cfg.alpha)?),
        Method::EnsembleOnly => Some(EnsembleState::ensemble_only(
            n,
            data.num_classes,
            cfg.alpha,
        )?),
        Method::Ce | Method::Bootstrap => None,
    };

    let mut train_probs = model.predict_proba(data.features)?;
    let mut records = Vec::with_capacity(cfg.total_epochs);
    let mut stopped_early = false;

    for epoch in 0..cfg.total_epochs {
        let active = state.is_some() && epoch >= cfg.activation_epoch;
        if active {
            let snapshot = PredictionSnapshot::new(train_probs)?;
            state.as_mut().unwrap().update(&snapshot)?;
        }

        let lr = opt.lr_at(epoch);
        let mut loss_sum = 0.0;
        for ids in epoch_order(n, train.seed, epoch).chunks(train.batch_size) {
            let x = data.features.select_rows(ids);
            let cache = model.forward_cached(&x)?;
            let targets = match (&state, method) {
                (Some(s), _) if active => s.select(ids),
                (_, Method::Bootstrap) => {
                    let y: Vec<usize> = ids.iter().map(|&i| labels[i]).collect();
                    bootstrap_targets(&y, &cache.probs, cfg.bootstrap_beta)?
                }
                _ => noisy_onehot.select_rows(ids),
            };
            let batch_loss = soft_ce_loss(&targets, &cache.probs)?.mean;
            if !batch_loss.is_finite() {
                return Err(SelcError::Divergence {
                    epoch,
                    detail: format!("nonfinite batch loss {batch_loss}"),
                });
            }
            loss_sum += batch_loss * ids.len() as f64;
            let grads = model.backward_from(&cache, &targets)?;
            opt.step(&mut model, &grads, epoch)?;
        }
        if !model.is_finite() {
            return Err(SelcError::Divergence {
                epoch,
                detail: "nonfinite parameters".into(),
            });
        }

        train_probs = model.predict_proba(data.features)?;
        let sample_losses = hard_ce_losses(labels, &train_probs)?;
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / n.max(1) as f64,
            train_acc: accuracy(&train_probs, labels.iter().copied()),
            selc_active: active,
        };
        let ctx = EpochContext {
            epoch,
            lr,
            train_loss: record.train_loss,
            train_acc: record.train_acc,
            selc_active: active,
            model: &model,
            train_probs: &train_probs,
            sample_losses: &sample_losses,
            targets: state.as_ref(),
        };
        let control = hook.on_epoch(&ctx)?;
        records.push(record);
        if control == Control::Stop {
            stopped_early = true;
            break;
        }
    }

    Ok(TrainOutcome {
        model,
        state,
        records,
        stopped_early,
    })
}

/// Convex combination `(λ·x1 + (1−λ)·x2, λ·t1 + (1−λ)·t2)`.
pub fn mixup_batch(
    x1: &Matrix2D,
    t1: &Matrix2D,
    x2: &Matrix2D,
    t2: &Matrix2D,
    lambda: f64,
) -> Result<(Matrix2D, Matrix2D)> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(SelcError::param(format!("lambda must be in [0, 1], got {lambda}")));
    }
    if x1.shape() != x2.shape() || t1.shape() != t2.shape() || x1.rows() != t1.rows() {
        return Err(SelcError::dim(format!(
            "mixup of x {:?}/{:?} with t {:?}/{:?}",
            x1.shape(),
            x2.shape(),
            t1.shape(),
            t2.shape()
        )));
    }
    let mix = |a: &Matrix2D, b: &Matrix2D| {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&u, &v)| lambda * u + (1.0 - lambda) * v)
            .collect();
        Matrix2D::from_vec(a.rows(), a.cols(), data).expect("same shape")
    };
    Ok((mix(x1, x2), mix(t1, t2)))
}

/// Train a fresh model with mixup on fixed corrected targets. Only features
/// and targets are taken, so the noisy labels cannot influence this stage.
pub fn run_selc_plus(
    features: &Matrix2D,
    corrected_targets: &Matrix2D,
    mut model: MlpModel,
    train: &TrainConfig,
    cfg: &SelcRunConfig,
    hook: &mut dyn EpochHook,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if features.rows() != corrected_targets.rows() {
        return Err(SelcError::dim(format!(
            "{} feature rows vs {} targets",
            features.rows(),
            corrected_targets.rows()
        )));
    }
    check_setup(&model, features.cols(), corrected_targets.cols(), train)?;
    let targets = if cfg.harden_targets {
        let labels: Vec<usize> = corrected_targets.row_iter().map(argmax).collect();
        one_hot(&labels, corrected_targets.cols())
    } else {
        corrected_targets.clone()
    };
    let target_labels: Vec<usize> = targets.row_iter().map(argmax).collect();
    let lambda_dist = Beta::new(cfg.mixup_beta_param, cfg.mixup_beta_param)
        .map_err(|e| SelcError::param(format!("mixup Beta: {e}")))?;
    let n = features.rows();
    let mut opt = OptimizerState::new(train.sgd.clone(), &model)?;
    let mut records = Vec::with_capacity(cfg.total_epochs);
    let mut stopped_early = false;

    for epoch in 0..cfg.total_epochs {
        let lr = opt.lr_at(epoch);
        let mut mix_rng = sub_stream_rng(train.seed, Stream::Mixup, epoch as u32);
        let mut loss_sum = 0.0;
        for ids in epoch_order(n, train.seed, epoch).chunks(train.batch_size) {
            let lambda: f64 = mix_rng.sample(lambda_dist);
            let mut partner: Vec<usize> = ids.to_vec();
            partner.shuffle(&mut mix_rng);
            let (x, t) = mixup_batch(
                &features.select_rows(ids),
                &targets.select_rows(ids),
                &features.select_rows(&partner),
                &targets.select_rows(&partner),
                lambda,
            )?;
            let cache = model.forward_cached(&x)?;
            let batch_loss = soft_ce_loss(&t, &cache.probs)?.mean;
            if !batch_loss.is_finite() {
                return Err(SelcError::Divergence {
                    epoch,
                    detail: format!("nonfinite mixup loss {batch_loss}"),
                });
            }
            loss_sum += batch_loss * ids.len() as f64;
            let grads = model.backward_from(&cache, &t)?;
            opt.step(&mut model, &grads, epoch)?;
        }
        if !model.is_finite() {
            return Err(SelcError::Divergence {
                epoch,
                detail: "nonfinite parameters".into(),
            });
        }

        let train_probs = model.predict_proba(features)?;
        let sample_losses: Vec<f64> = targets
            .row_iter()
            .zip(train_probs.row_iter())
            .map(|(t, p)| soft_ce(t, p))
            .collect();
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / n.max(1) as f64,
            train_acc: accuracy(&train_probs, target_labels.iter().copied()),
            selc_active: false,
        };
        let ctx = EpochContext {
            epoch,
            lr,
            train_loss: record.train_loss,
            train_acc: record.train_acc,
            selc_active: false,
            model: &model,
            train_probs: &train_probs,
            sample_losses: &sample_losses,
            targets: None,
        };
        let control = hook.on_epoch(&ctx)?;
        records.push(record);
        if control == Control::Stop {
            stopped_early = true;
            break;
        }
    }

    Ok(TrainOutcome {
        model,
        state: None,
        records,
        stopped_early,
    })
}
