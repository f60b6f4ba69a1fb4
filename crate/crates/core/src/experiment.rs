//! Run orchestration: one trial per (method, seed), per-epoch records, and
//! the CSV/JSON artifacts written from them.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{DatasetSpec, ExperimentConfig, MethodKind, MethodSpec, StartEpoch};
use crate::dataset::{generate_blobs, load_csv, load_idx, LabeledData, NoisyDataset, TrainTest};
use crate::error::{Result, SelcError};
use crate::format::fmt_sig;
use crate::metrics::{
    accuracy, confusion_of_corrections, correction_accuracy, memorization_stats, ConfusionMatrix,
    MemorizationStats,
};
use crate::mlp::MlpModel;
use crate::noise::{empirical_noise_rate, TransitionMatrix};
use crate::train::{
    default_activation_epoch, run_selc_plus, run_training, Control, EpochContext, Method,
    SelcRunConfig, TrainConfig,
};
use crate::turning_point::{
    epoch_metrics, estimate_turning_point, write_loss_rows, EpochMetrics, LossSnapshot,
    MetricSeries, OnlineDetector,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Training on the noisy labels (with or without corrections).
    Main,
    /// Mixup retraining on corrected targets.
    Retrain,
}

impl Stage {
    fn as_str(self) -> &'static str {
        match self {
            Stage::Main => "main",
            Stage::Retrain => "retrain",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub stage: Stage,
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub selc_active: bool,
    pub metrics: EpochMetrics,
    /// Present only for methods that maintain corrected targets.
    pub correction_acc: Option<f64>,
    pub memorization: MemorizationStats,
}

pub const EPOCH_COLUMNS: [&str; 16] = [
    "stage",
    "epoch",
    "lr",
    "train_loss",
    "train_acc",
    "test_acc",
    "selc_active",
    "m1",
    "m2",
    "m3",
    "correction_acc",
    "clean_correct",
    "clean_incorrect",
    "mislabeled_correct",
    "mislabeled_memorized",
    "mislabeled_other",
];

impl EpochRow {
    /// `(name, value)` pairs in column order, stage excluded.
    fn values(&self) -> Vec<(&'static str, Option<f64>)> {
        let m = &self.memorization;
        vec![
            ("lr", Some(self.lr)),
            ("train_loss", Some(self.train_loss)),
            ("train_acc", Some(self.train_acc)),
            ("test_acc", Some(self.test_acc)),
            ("selc_active", Some(f64::from(u8::from(self.selc_active)))),
            ("m1", Some(self.metrics.m1)),
            ("m2", Some(self.metrics.m2)),
            ("m3", Some(self.metrics.m3)),
            ("correction_acc", self.correction_acc),
            ("clean_correct", Some(m.clean_correct_frac)),
            ("clean_incorrect", Some(m.clean_incorrect_frac)),
            ("mislabeled_correct", Some(m.mislabeled_correct_frac)),
            ("mislabeled_memorized", Some(m.mislabeled_memorized_frac)),
            ("mislabeled_other", Some(m.mislabeled_other_frac)),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TurningPointReport {
    /// Epoch where the chosen metric peaked during the cross-entropy warm phase.
    pub detected: usize,
    pub activation_epoch: usize,
    pub warm_epochs: usize,
    pub series: MetricSeries,
}

#[derive(Debug, Clone)]
pub struct TrialRecord {
    pub seed: u64,
    pub rows: Vec<EpochRow>,
    pub confusions: Vec<(usize, ConfusionMatrix)>,
    pub turning_point: Option<TurningPointReport>,
    /// First epoch trained against corrected targets, for correcting methods.
    pub activation_epoch: Option<usize>,
    /// Fraction of training labels actually flipped by the noise.
    pub noise_rate: f64,
    pub loss_snapshots: Vec<LossSnapshot>,
}

impl TrialRecord {
    pub fn final_row(&self) -> Option<&EpochRow> {
        self.rows.last()
    }

    /// Last main-stage row; for SELC+ this is the end of the correcting run.
    pub fn final_main_row(&self) -> Option<&EpochRow> {
        self.rows.iter().rev().find(|r| r.stage == Stage::Main)
    }

    pub fn final_test_acc(&self) -> f64 {
        self.final_row().map_or(f64::NAN, |r| r.test_acc)
    }

    pub fn final_correction_acc(&self) -> Option<f64> {
        self.final_main_row().and_then(|r| r.correction_acc)
    }

    pub fn final_memorized_frac(&self) -> f64 {
        self.final_row()
            .map_or(f64::NAN, |r| r.memorization.mislabeled_memorized_frac)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrialError {
    pub seed: u64,
    pub kind: &'static str,
    pub message: String,
}

impl TrialError {
    fn new(seed: u64, err: &SelcError) -> Self {
        let kind = match err {
            SelcError::Dimension(_) => "dimension",
            SelcError::Parameter(_) => "parameter",
            SelcError::Divergence { .. } => "divergence",
            SelcError::MissingPrediction(_) => "missing_prediction",
            SelcError::Format { .. } => "format",
            SelcError::Config(_) => "config",
            SelcError::Io { .. } => "io",
        };
        Self {
            seed,
            kind,
            message: err.to_string(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MethodRecords {
    pub label: String,
    pub spec: MethodSpec,
    /// One entry per trial seed, in config order.
    pub trials: Vec<std::result::Result<TrialRecord, TrialError>>,
}

impl MethodRecords {
    pub fn completed(&self) -> impl Iterator<Item = &TrialRecord> {
        self.trials.iter().filter_map(|t| t.as_ref().ok())
    }
}

#[derive(Debug, Clone)]
pub struct RunRecords {
    pub seeds: Vec<u64>,
    pub methods: Vec<MethodRecords>,
}

impl RunRecords {
    pub fn method(&self, label: &str) -> Option<&MethodRecords> {
        self.methods.iter().find(|m| m.label == label)
    }
}

/// Load or generate the clean train/test split.
pub fn load_dataset(spec: &DatasetSpec) -> Result<TrainTest> {
    let (train, test, classes) = match spec {
        DatasetSpec::Blobs(b) => return generate_blobs(b),
        DatasetSpec::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            num_classes,
        } => (
            load_idx(train_images, train_labels)?,
            load_idx(test_images, test_labels)?,
            Some(*num_classes),
        ),
        DatasetSpec::Csv { train, test } => (load_csv(train)?, load_csv(test)?, None),
    };
    if train.dim() != test.dim() {
        return Err(SelcError::dim(format!(
            "train has {} features, test has {}",
            train.dim(),
            test.dim()
        )));
    }
    let c = classes.unwrap_or(train.num_classes.max(test.num_classes));
    Ok(TrainTest {
        train: LabeledData::new(train.features, train.labels, c)?,
        test: LabeledData::new(test.features, test.labels, c)?,
    })
}

/// Everything a single trial needs, shared across trials.
pub struct TrialInputs<'a> {
    pub config: &'a ExperimentConfig,
    pub data: &'a TrainTest,
    pub noise: &'a TransitionMatrix,
}

impl TrialInputs<'_> {
    fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.data.train.dim()];
        dims.extend(&self.config.model.hidden);
        dims.push(self.data.train.num_classes);
        dims
    }

    fn model(&self, seed: u64) -> Result<MlpModel> {
        MlpModel::new(&self.layer_dims(), self.config.model.activation, seed)
    }

    fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            sgd: self.config.optimizer.sgd(),
            batch_size: self.config.optimizer.batch_size,
            seed,
        }
    }
}

/// Cross-entropy warm phase with the live turning-point detector. Corrections
/// then start `10` epochs before the detected peak (but not before epoch 1).
pub fn detect_turning_point_live(
    inputs: &TrialInputs<'_>,
    noisy: &NoisyDataset,
    seed: u64,
) -> Result<TurningPointReport> {
    let tp = &inputs.config.turning_point;
    let epochs = inputs.config.optimizer.epochs;
    let mut detector = OnlineDetector::new(tp.patience);
    let mut series = MetricSeries::default();
    let mut hook = |ctx: &EpochContext<'_>| -> Result<Control> {
        let m = epoch_metrics(ctx.sample_losses)?;
        series.push(ctx.epoch, m);
        Ok(if detector.observe(ctx.epoch, m.get(tp.metric)) {
            Control::Stop
        } else {
            Control::Continue
        })
    };
    let run_cfg = SelcRunConfig::with_activation(0.0, epochs, epochs);
    let outcome = run_training(
        noisy.training_view(),
        inputs.model(seed)?,
        &inputs.train_config(seed),
        &run_cfg,
        Method::Ce,
        &mut hook,
    )?;
    let detected = estimate_turning_point(&series, tp.metric, tp.smooth)?;
    Ok(TurningPointReport {
        detected,
        activation_epoch: default_activation_epoch(detected),
        warm_epochs: outcome.records.len(),
        series,
    })
}

struct Recorder<'a> {
    stage: Stage,
    test: &'a LabeledData,
    noisy: &'a NoisyDataset,
    /// Correction accuracy of the fixed targets used while retraining.
    fixed_correction_acc: Option<f64>,
    confusion_every: Option<usize>,
    total_epochs: usize,
    keep_losses: bool,
    rows: Vec<EpochRow>,
    confusions: Vec<(usize, ConfusionMatrix)>,
    losses: Vec<LossSnapshot>,
}

impl Recorder<'_> {
    fn on_epoch(&mut self, ctx: &EpochContext<'_>) -> Result<Control> {
        let test_probs = ctx.model.predict_proba(&self.test.features)?;
        let truth = self.noisy.true_labels();
        let correction_acc = match (ctx.targets, self.fixed_correction_acc) {
            (Some(state), _) => Some(correction_accuracy(state.targets(), truth)?),
            (None, fixed) => fixed,
        };
        if self.stage == Stage::Main {
            if let Some(state) = ctx.targets {
                let last = ctx.epoch + 1 == self.total_epochs;
                let periodic = self.confusion_every.is_some_and(|k| (ctx.epoch + 1).is_multiple_of(k));
                if last || periodic {
                    self.confusions
                        .push((ctx.epoch, confusion_of_corrections(state.targets(), truth)?));
                }
            }
            if self.keep_losses {
                self.losses
                    .push(LossSnapshot::new(ctx.epoch, ctx.sample_losses.to_vec())?);
            }
        }
        self.rows.push(EpochRow {
            stage: self.stage,
            epoch: ctx.epoch,
            lr: ctx.lr,
            train_loss: ctx.train_loss,
            train_acc: ctx.train_acc,
            test_acc: accuracy(&test_probs, &self.test.labels)?,
            selc_active: ctx.selc_active,
            metrics: epoch_metrics(ctx.sample_losses)?,
            correction_acc,
            memorization: memorization_stats(
                ctx.train_probs,
                self.noisy.noisy_labels(),
                truth,
                ctx.epoch,
            )?,
        });
        Ok(Control::Continue)
    }
}

/// Run one method on one trial seed.
pub fn run_trial(inputs: &TrialInputs<'_>, method: &MethodSpec, seed: u64) -> Result<TrialRecord> {
    let cfg = inputs.config;
    let epochs = cfg.optimizer.epochs;
    let noisy = NoisyDataset::corrupt(inputs.data.train.clone(), inputs.noise, seed)?;
    let noise_rate = empirical_noise_rate(noisy.noisy_labels(), noisy.true_labels().as_slice())?;
    let train_cfg = inputs.train_config(seed);

    let mut turning_point = None;
    let (train_method, run_cfg) = match &method.kind {
        MethodKind::Ce => (Method::Ce, SelcRunConfig::with_activation(0.0, epochs, epochs)),
        MethodKind::Bootstrap { beta } => {
            let mut c = SelcRunConfig::with_activation(0.0, epochs, epochs);
            c.bootstrap_beta = *beta;
            (Method::Bootstrap, c)
        }
        kind => {
            let alpha = kind.alpha().expect("correcting method");
            let m = match kind {
                MethodKind::EnsembleOnly { .. } => Method::EnsembleOnly,
                _ => Method::Selc,
            };
            let c = match kind.start_epoch().expect("correcting method") {
                StartEpoch::Epoch(te) => SelcRunConfig::with_activation(alpha, te, epochs),
                StartEpoch::Auto(_) => {
                    let report = detect_turning_point_live(inputs, &noisy, seed)?;
                    log::info!(
                        "{} seed {seed}: turning point {}, corrections from epoch {}",
                        method.label(),
                        report.detected,
                        report.activation_epoch
                    );
                    let c = SelcRunConfig {
                        activation_epoch: report.activation_epoch,
                        ..SelcRunConfig::new(alpha, report.detected, epochs)
                    };
                    turning_point = Some(report);
                    c
                }
            };
            (m, c)
        }
    };

    let mut rec = Recorder {
        stage: Stage::Main,
        test: &inputs.data.test,
        noisy: &noisy,
        fixed_correction_acc: None,
        confusion_every: cfg.output.confusion_every,
        total_epochs: epochs,
        keep_losses: cfg.output.loss_snapshots,
        rows: Vec::new(),
        confusions: Vec::new(),
        losses: Vec::new(),
    };
    let outcome = run_training(
        noisy.training_view(),
        inputs.model(seed)?,
        &train_cfg,
        &run_cfg,
        train_method,
        &mut |ctx: &EpochContext<'_>| rec.on_epoch(ctx),
    )?;
    let activation_epoch = outcome.state.as_ref().map(|_| run_cfg.activation_epoch);

    if let MethodKind::SelcPlus {
        mixup_alpha,
        retrain_epochs,
        harden,
        ..
    } = &method.kind
    {
        let state = outcome.state.as_ref().expect("selc keeps targets");
        let corrected = state.targets();
        let retrain_epochs = retrain_epochs.unwrap_or(epochs);
        let mut plus_cfg =
            SelcRunConfig::with_activation(run_cfg.alpha, retrain_epochs, retrain_epochs);
        plus_cfg.mixup_beta_param = *mixup_alpha;
        plus_cfg.harden_targets = *harden;
        rec.stage = Stage::Retrain;
        rec.fixed_correction_acc = Some(correction_accuracy(corrected, noisy.true_labels())?);
        run_selc_plus(
            noisy.features(),
            corrected,
            inputs.model(seed)?,
            &train_cfg,
            &plus_cfg,
            &mut |ctx: &EpochContext<'_>| rec.on_epoch(ctx),
        )?;
    }

    if let Some(last) = rec.rows.last() {
        log::info!(
            "{} seed {seed}: final test accuracy {:.4}",
            method.label(),
            last.test_acc
        );
    }
    Ok(TrialRecord {
        seed,
        rows: rec.rows,
        confusions: rec.confusions,
        turning_point,
        activation_epoch,
        noise_rate,
        loss_snapshots: rec.losses,
    })
}

/// Run every configured method on every trial seed. Configuration and data
/// errors abort the run; errors inside a trial are recorded and the other
/// trials continue.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunRecords> {
    config.validate()?;
    let data = load_dataset(&config.dataset)?;
    let noise = config
        .noise
        .transition_matrix(data.train.num_classes)
        .map_err(|e| match e {
            SelcError::Parameter(m) => SelcError::Config(m),
            other => other,
        })?;
    let inputs = TrialInputs {
        config,
        data: &data,
        noise: &noise,
    };
    let jobs: Vec<(usize, u64)> = (0..config.methods.len())
        .flat_map(|m| config.trials.iter().map(move |&s| (m, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads)
        .build()
        .map_err(|e| SelcError::Config(format!("thread pool: {e}")))?;
    let mut results: Vec<_> = pool.install(|| {
        jobs.par_iter()
            .map(|&(m, seed)| {
                run_trial(&inputs, &config.methods[m], seed).map_err(|e| TrialError::new(seed, &e))
            })
            .collect()
    });
    results.reverse();
    let methods = config
        .methods
        .iter()
        .map(|spec| MethodRecords {
            label: spec.label(),
            spec: spec.clone(),
            trials: config.trials.iter().map(|_| results.pop().unwrap()).collect(),
        })
        .collect();
    Ok(RunRecords {
        seeds: config.trials.clone(),
        methods,
    })
}

/// Mean and sample standard deviation (n − 1). The deviation is undefined
/// for fewer than two values.
pub fn mean_std(values: &[f64]) -> (Option<f64>, Option<f64>) {
    let n = values.len();
    if n == 0 {
        return (None, None);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (Some(mean), None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (Some(mean), Some(var.sqrt()))
}

/// Round to 6 significant digits so JSON numbers match the CSV text.
fn sig(x: f64) -> Value {
    if x.is_finite() {
        json!(fmt_sig(x).parse::<f64>().expect("formatted float"))
    } else {
        Value::Null
    }
}

fn stat(values: &[f64]) -> Value {
    let (mean, std) = mean_std(values);
    json!({
        "mean": mean.map_or(Value::Null, sig),
        "stddev": std.map_or(Value::Null, sig),
        "values": values.iter().map(|&v| sig(v)).collect::<Vec<_>>(),
    })
}

pub fn summary_json(records: &RunRecords) -> Value {
    let methods: Vec<Value> = records
        .methods
        .iter()
        .map(|m| {
            let done: Vec<&TrialRecord> = m.completed().collect();
            let test: Vec<f64> = done.iter().map(|t| t.final_test_acc()).collect();
            let corr: Vec<f64> = done.iter().filter_map(|t| t.final_correction_acc()).collect();
            let mem: Vec<f64> = done.iter().map(|t| t.final_memorized_frac()).collect();
            let errors: Vec<&TrialError> = m.trials.iter().filter_map(|t| t.as_ref().err()).collect();
            json!({
                "label": m.label,
                "kind": m.spec.kind.name(),
                "completed_trials": done.len(),
                "seeds": done.iter().map(|t| t.seed).collect::<Vec<_>>(),
                "test_acc": stat(&test),
                "correction_acc": if corr.is_empty() { Value::Null } else { stat(&corr) },
                "memorized_frac": stat(&mem),
                "turning_points": done.iter()
                    .map(|t| t.turning_point.as_ref().map(|r| r.detected))
                    .collect::<Vec<_>>(),
                "activation_epochs": done.iter().map(|t| t.activation_epoch).collect::<Vec<_>>(),
                "errors": errors,
            })
        })
        .collect();
    json!({
        "num_trials": records.seeds.len(),
        "empty": records.seeds.is_empty(),
        "trials": records.seeds,
        "methods": methods,
    })
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| SelcError::io(path, e))
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, fmt_sig)
}

pub fn epochs_csv(rows: &[EpochRow]) -> String {
    let mut out = EPOCH_COLUMNS.join(",");
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{},{}", r.stage.as_str(), r.epoch);
        for (_, v) in r.values() {
            out.push(',');
            out.push_str(&cell(v));
        }
        out.push('\n');
    }
    out
}

/// Long format: `epoch,metric_name,value`. Retraining rows are prefixed `retrain/`.
pub fn metrics_csv(rows: &[EpochRow]) -> String {
    let mut out = String::from("epoch,metric_name,value\n");
    for r in rows {
        let prefix = match r.stage {
            Stage::Main => "",
            Stage::Retrain => "retrain/",
        };
        for (name, v) in r.values() {
            if let Some(v) = v {
                let _ = writeln!(out, "{},{prefix}{name},{}", r.epoch, fmt_sig(v));
            }
        }
    }
    out
}

pub fn trial_dir(out_dir: &Path, label: &str, seed: u64) -> PathBuf {
    out_dir.join(label).join(format!("trial_{seed}"))
}

/// Write `summary.json` plus, per method and trial, `epochs.csv`,
/// `metrics.csv`, `confusion_epoch_<k>.csv`, `turning_point.csv` (automatic
/// start only), `losses.csv` (when enabled) or `error.json`.
pub fn emit_results(records: &RunRecords, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| SelcError::io(out_dir, e))?;
    for m in &records.methods {
        for (seed, trial) in records.seeds.iter().zip(&m.trials) {
            let dir = trial_dir(out_dir, &m.label, *seed);
            fs::create_dir_all(&dir).map_err(|e| SelcError::io(&dir, e))?;
            let t = match trial {
                Ok(t) => t,
                Err(err) => {
                    let text = serde_json::to_string_pretty(err).expect("serializable") + "\n";
                    write(&dir.join("error.json"), text)?;
                    continue;
                }
            };
            write(&dir.join("epochs.csv"), epochs_csv(&t.rows))?;
            write(&dir.join("metrics.csv"), metrics_csv(&t.rows))?;
            for (k, cm) in &t.confusions {
                write(&dir.join(format!("confusion_epoch_{k}.csv")), cm.to_csv())?;
            }
            if let Some(tp) = &t.turning_point {
                tp.series.write_csv(&dir.join("turning_point.csv"))?;
            }
            if !t.loss_snapshots.is_empty() {
                let mut buf = Vec::new();
                for (i, s) in t.loss_snapshots.iter().enumerate() {
                    write_loss_rows(&mut buf, s, i == 0).expect("writing to memory");
                }
                write(&dir.join("losses.csv"), buf)?;
            }
        }
    }
    let text = serde_json::to_string_pretty(&summary_json(records)).expect("serializable") + "\n";
    write(&out_dir.join("summary.json"), text)
}

/// Load a config file, run it, and write the results plus the effective
/// config to its output directory.
pub fn run_config_file(path: &Path) -> Result<(ExperimentConfig, RunRecords)> {
    let cfg = ExperimentConfig::load(path)?;
    let records = run_experiment(&cfg)?;
    emit_results(&records, &cfg.output_dir)?;
    write(&cfg.output_dir.join("config.toml"), cfg.to_toml()?)?;
    Ok((cfg, records))
}
