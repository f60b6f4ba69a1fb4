//! Experiment configuration, read from a single TOML file.
//!
//! Relative paths inside the file resolve against the file's directory. The
//! only environment overrides are `SELC_OUT_DIR` (output directory) and
//! `SELC_THREADS` (number of trials run in parallel).

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::BlobSpec;
use crate::error::{Result, SelcError};
use crate::mlp::Activation;
use crate::noise::{
    build_asymmetric_q, build_symmetric_q, parse_mapping, SymmetricConvention, TransitionMatrix,
    CIFAR10_ASYMMETRIC,
};
use crate::optim::SgdConfig;
use crate::turning_point::{Metric, OnlineDetector};

pub const ENV_OUT_DIR: &str = "SELC_OUT_DIR";
pub const ENV_THREADS: &str = "SELC_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    /// One trial per seed. The seed drives noise injection, weight init,
    /// shuffling and mixup; the dataset has its own seed.
    pub trials: Vec<u64>,
    #[serde(default = "default_threads")]
    pub threads: usize,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub noise: NoiseSpec,
    pub model: ModelSpec,
    #[serde(default)]
    pub optimizer: OptimizerSpec,
    #[serde(default)]
    pub turning_point: TurningPointSpec,
    #[serde(default)]
    pub output: OutputSpec,
    pub methods: Vec<MethodSpec>,
}

fn default_threads() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Blobs(BlobSpec),
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        num_classes: usize,
    },
    Csv {
        train: PathBuf,
        test: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseSpec {
    #[default]
    None,
    Symmetric {
        eta: f64,
        #[serde(default)]
        convention: SymmetricConvention,
    },
    /// Class-pair flips. Without a mapping file the CIFAR-10 pairs are used.
    Asymmetric {
        eta: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        mapping: Option<PathBuf>,
    },
    /// Explicit transition matrix in the text format of [`TransitionMatrix`].
    Matrix { path: PathBuf },
}

impl NoiseSpec {
    pub fn transition_matrix(&self, num_classes: usize) -> Result<TransitionMatrix> {
        match self {
            NoiseSpec::None => build_symmetric_q(num_classes, 0.0, SymmetricConvention::default()),
            NoiseSpec::Symmetric { eta, convention } => {
                build_symmetric_q(num_classes, *eta, *convention)
            }
            NoiseSpec::Asymmetric { eta, mapping } => {
                let pairs = match mapping {
                    Some(path) => {
                        let text = std::fs::read_to_string(path)
                            .map_err(|e| SelcError::io(path, e))?;
                        parse_mapping(&text)?
                    }
                    None if num_classes == 10 => CIFAR10_ASYMMETRIC.to_vec(),
                    None => {
                        return Err(SelcError::Config(format!(
                            "asymmetric noise over {num_classes} classes needs a mapping file"
                        )))
                    }
                };
                build_asymmetric_q(num_classes, *eta, &pairs)
            }
            NoiseSpec::Matrix { path } => {
                let q = TransitionMatrix::read_file(path)?;
                if q.num_classes() != num_classes {
                    return Err(SelcError::Config(format!(
                        "noise matrix has {} classes, dataset has {num_classes}",
                        q.num_classes()
                    )));
                }
                Ok(q)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSpec {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub milestones: Vec<usize>,
    pub decay_factor: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        let sgd = SgdConfig::default();
        Self {
            lr: sgd.lr,
            momentum: sgd.momentum,
            weight_decay: sgd.weight_decay,
            milestones: sgd.milestones,
            decay_factor: sgd.decay_factor,
            batch_size: 128,
            epochs: 200,
        }
    }
}

impl OptimizerSpec {
    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            milestones: self.milestones.clone(),
            decay_factor: self.decay_factor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TurningPointSpec {
    pub metric: Metric,
    /// 3-epoch median smoothing of the metric before taking the peak.
    pub smooth: bool,
    /// Epochs without a new peak before the live detector stops the warm phase.
    pub patience: usize,
}

impl Default for TurningPointSpec {
    fn default() -> Self {
        Self {
            metric: Metric::M1,
            smooth: false,
            patience: OnlineDetector::DEFAULT_PATIENCE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSpec {
    /// Also write a confusion matrix every this many epochs (the final epoch
    /// is always written for methods with corrected targets).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub confusion_every: Option<usize>,
    /// Write per-sample training losses of every epoch to `losses.csv`.
    pub loss_snapshots: bool,
}

/// When corrections start: `"auto"` or an explicit epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StartEpoch {
    Epoch(usize),
    Auto(AutoKeyword),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AutoKeyword {
    #[serde(rename = "auto")]
    Auto,
}

impl StartEpoch {
    pub const AUTO: StartEpoch = StartEpoch::Auto(AutoKeyword::Auto);
}

impl Default for StartEpoch {
    fn default() -> Self {
        Self::AUTO
    }
}

fn default_alpha() -> f64 {
    0.9
}

fn default_beta() -> f64 {
    0.8
}

fn default_mixup() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MethodKind {
    Ce,
    Bootstrap {
        #[serde(default = "default_beta")]
        beta: f64,
    },
    Selc {
        #[serde(default = "default_alpha")]
        alpha: f64,
        #[serde(default)]
        te: StartEpoch,
    },
    /// Targets from the ensemble prediction alone, starting from zero.
    EnsembleOnly {
        #[serde(default = "default_alpha")]
        alpha: f64,
        #[serde(default)]
        te: StartEpoch,
    },
    /// SELC, then a fresh model trained with mixup on the corrected targets.
    SelcPlus {
        #[serde(default = "default_alpha")]
        alpha: f64,
        #[serde(default)]
        te: StartEpoch,
        #[serde(default = "default_mixup")]
        mixup_alpha: f64,
        /// Retraining epochs; defaults to the optimizer's epoch count.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        retrain_epochs: Option<usize>,
        #[serde(default)]
        harden: bool,
    },
}

impl MethodKind {
    pub fn name(&self) -> &'static str {
        match self {
            MethodKind::Ce => "ce",
            MethodKind::Bootstrap { .. } => "bootstrap",
            MethodKind::Selc { .. } => "selc",
            MethodKind::EnsembleOnly { .. } => "ensemble_only",
            MethodKind::SelcPlus { .. } => "selc_plus",
        }
    }

    pub fn alpha(&self) -> Option<f64> {
        match self {
            MethodKind::Selc { alpha, .. }
            | MethodKind::EnsembleOnly { alpha, .. }
            | MethodKind::SelcPlus { alpha, .. } => Some(*alpha),
            _ => None,
        }
    }

    pub fn start_epoch(&self) -> Option<StartEpoch> {
        match self {
            MethodKind::Selc { te, .. }
            | MethodKind::EnsembleOnly { te, .. }
            | MethodKind::SelcPlus { te, .. } => Some(*te),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    /// Output subdirectory and summary key; defaults to a name derived from
    /// the method and its parameters.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(flatten)]
    pub kind: MethodKind,
}

impl MethodSpec {
    pub fn new(kind: MethodKind) -> Self {
        Self { label: None, kind }
    }

    pub fn labeled(label: &str, kind: MethodKind) -> Self {
        Self {
            label: Some(label.to_string()),
            kind,
        }
    }

    pub fn label(&self) -> String {
        if let Some(l) = &self.label {
            return l.clone();
        }
        match &self.kind {
            MethodKind::Ce => "ce".into(),
            MethodKind::Bootstrap { beta } => format!("bootstrap_b{beta}"),
            k => format!("{}_a{}", k.name(), k.alpha().unwrap_or_default()),
        }
    }
}

/// Resolve `p` against `base` unless it is absolute.
pub fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| SelcError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| SelcError::Config(e.to_string()))
    }

    /// Parse, resolve relative paths against the file's directory, apply
    /// environment overrides and validate.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SelcError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)
            .map_err(|e| SelcError::Config(format!("{}: {e}", path.display())))?;
        cfg.resolve_paths(&base_dir(path));
        cfg.apply_env(|k| std::env::var(k).ok())?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Make every relative path in the config relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| *p = resolve(base, p);
        fix(&mut self.output_dir);
        match &mut self.dataset {
            DatasetSpec::Blobs(_) => {}
            DatasetSpec::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                ..
            } => {
                for p in [train_images, train_labels, test_images, test_labels] {
                    fix(p);
                }
            }
            DatasetSpec::Csv { train, test } => {
                fix(train);
                fix(test);
            }
        }
        match &mut self.noise {
            NoiseSpec::Asymmetric {
                mapping: Some(p), ..
            }
            | NoiseSpec::Matrix { path: p } => fix(p),
            _ => {}
        }
    }

    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) -> Result<()> {
        if let Some(dir) = get(ENV_OUT_DIR).filter(|s| !s.is_empty()) {
            self.output_dir = PathBuf::from(dir);
        }
        if let Some(t) = get(ENV_THREADS).filter(|s| !s.is_empty()) {
            self.threads = t
                .trim()
                .parse()
                .map_err(|_| SelcError::Config(format!("{ENV_THREADS}={t} is not a count")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SelcError::Config(m));
        if self.threads == 0 {
            return bad("threads must be at least 1".into());
        }
        if self.methods.is_empty() {
            return bad("no methods configured".into());
        }
        let mut labels = BTreeSet::new();
        for m in &self.methods {
            let label = m.label();
            if label.is_empty() || label.contains(['/', '\\']) || label.starts_with('.') {
                return bad(format!("method label {label:?} is not a valid directory name"));
            }
            if !labels.insert(label.clone()) {
                return bad(format!("duplicate method label {label:?}"));
            }
            if let Some(a) = m.kind.alpha() {
                if !(0.0..1.0).contains(&a) {
                    return bad(format!("{label}: alpha must be in [0, 1), got {a}"));
                }
            }
            match &m.kind {
                MethodKind::Bootstrap { beta } if !(0.0..=1.0).contains(beta) => {
                    return bad(format!("{label}: beta must be in [0, 1], got {beta}"));
                }
                MethodKind::SelcPlus { mixup_alpha, .. } if !(*mixup_alpha > 0.0) => {
                    return bad(format!("{label}: mixup_alpha must be positive"));
                }
                _ => {}
            }
        }
        let mut seeds = BTreeSet::new();
        if let Some(s) = self.trials.iter().find(|s| !seeds.insert(**s)) {
            return bad(format!("trial seed {s} listed twice"));
        }
        let opt = &self.optimizer;
        if opt.epochs == 0 || opt.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        opt.sgd().validate()?;
        if self.model.hidden.contains(&0) {
            return bad("hidden layer widths must be positive".into());
        }
        if self.turning_point.patience == 0 {
            return bad("turning_point.patience must be positive".into());
        }
        if self.output.confusion_every == Some(0) {
            return bad("output.confusion_every must be positive".into());
        }

        let mut files: Vec<&PathBuf> = Vec::new();
        match &self.dataset {
            DatasetSpec::Blobs(_) => {}
            DatasetSpec::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                num_classes,
            } => {
                if *num_classes < 2 {
                    return bad("idx dataset needs num_classes >= 2".into());
                }
                files.extend([train_images, train_labels, test_images, test_labels]);
            }
            DatasetSpec::Csv { train, test } => files.extend([train, test]),
        }
        match &self.noise {
            NoiseSpec::Asymmetric {
                mapping: Some(p), ..
            } => files.push(p),
            NoiseSpec::Matrix { path } => files.push(path),
            NoiseSpec::Symmetric { eta, .. } | NoiseSpec::Asymmetric { eta, .. }
                if !(0.0..1.0).contains(eta) =>
            {
                return bad(format!("noise eta must be in [0, 1), got {eta}"));
            }
            _ => {}
        }
        if let Some(f) = files.into_iter().find(|f| !f.is_file()) {
            return bad(format!("referenced file {} does not exist", f.display()));
        }
        Ok(())
    }
}

/// Directory that relative paths in the config at `path` resolve against.
pub fn base_dir(path: &Path) -> PathBuf {
    path.parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    const DESK: &str = r#"
output_dir = "runs/desk"
trials = [1, 2, 3]

[dataset]
kind = "blobs"
n = 4000
d = 16
classes = 4
cluster_std = 1.0
seed = 7

[noise]
kind = "symmetric"
eta = 0.4

[model]
hidden = [64, 64]

[optimizer]
epochs = 60
milestones = [24, 48]

[[methods]]
kind = "ce"

[[methods]]
kind = "selc"
alpha = 0.9
te = "auto"

[[methods]]
label = "selc_fixed"
kind = "selc"
te = 20
"#;

    #[test]
    fn parses_and_fills_defaults() {
        let cfg = ExperimentConfig::from_toml(DESK).unwrap();
        assert_eq!(cfg.threads, 1);
        assert_eq!(cfg.optimizer.batch_size, 128);
        assert_eq!(cfg.optimizer.lr, 0.02);
        assert_eq!(cfg.methods[1].kind.start_epoch(), Some(StartEpoch::AUTO));
        assert_eq!(cfg.methods[2].kind.start_epoch(), Some(StartEpoch::Epoch(20)));
        assert_eq!(cfg.methods[1].label(), "selc_a0.9");
        assert_eq!(cfg.methods[2].label(), "selc_fixed");
        cfg.validate().unwrap();
    }

    #[test]
    fn round_trip_is_fixed_point() {
        let cfg = ExperimentConfig::from_toml(DESK).unwrap();
        let text = cfg.to_toml().unwrap();
        let again = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(again.to_toml().unwrap(), text);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let typo = DESK.replace("cluster_std", "cluster_sd");
        assert!(ExperimentConfig::from_toml(&typo).is_err());

        let dup = format!("{DESK}\n[[methods]]\nkind = \"ce\"\n");
        let cfg = ExperimentConfig::from_toml(&dup).unwrap();
        assert!(cfg.validate().is_err());

        let alpha = DESK.replace("alpha = 0.9", "alpha = 1.0");
        let cfg = ExperimentConfig::from_toml(&alpha).unwrap();
        assert!(cfg.validate().is_err());

        let method_typo = DESK.replace("alpha = 0.9", "alpah = 0.9");
        assert!(ExperimentConfig::from_toml(&method_typo).is_err());

        let te = DESK.replace("te = \"auto\"", "te = \"soon\"");
        assert!(ExperimentConfig::from_toml(&te).is_err());
    }

    #[test]
    fn missing_files_fail_validation() {
        let text = DESK.replace(
            "kind = \"symmetric\"\neta = 0.4",
            "kind = \"matrix\"\npath = \"nope.txt\"",
        );
        let mut cfg = ExperimentConfig::from_toml(&text).unwrap();
        cfg.resolve_paths(Path::new("/nonexistent"));
        assert_eq!(
            cfg.noise,
            NoiseSpec::Matrix {
                path: PathBuf::from("/nonexistent/nope.txt")
            }
        );
        let err = cfg.validate().unwrap_err();
        assert!(err.is_config_error());
    }

    #[test]
    fn env_overrides() {
        let mut cfg = ExperimentConfig::from_toml(DESK).unwrap();
        cfg.apply_env(|k| match k {
            ENV_OUT_DIR => Some("/tmp/elsewhere".into()),
            ENV_THREADS => Some("4".into()),
            _ => None,
        })
        .unwrap();
        assert_eq!(cfg.output_dir, PathBuf::from("/tmp/elsewhere"));
        assert_eq!(cfg.threads, 4);
        assert!(cfg.apply_env(|k| (k == ENV_THREADS).then(|| "many".into())).is_err());
    }

    #[test]
    fn default_asymmetric_pairs_need_ten_classes() {
        let spec = NoiseSpec::Asymmetric { eta: 0.4, mapping: None };
        let q = spec.transition_matrix(10).unwrap();
        assert_eq!(q.row(9)[1], 0.4);
        assert!(matches!(spec.transition_matrix(4), Err(SelcError::Config(_))));
    }
}
