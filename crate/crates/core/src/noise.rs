//! Class-conditional label noise: transition matrices and label corruption.
//!
//! `Q[i][j] = Pr[noisy = j | true = i]`. Symmetric noise with the default
//! convention replaces a fraction `eta` of labels with a class drawn uniformly
//! from *all* classes, so the true class can be redrawn and the effective
//! mislabel rate is `eta·(C−1)/C`. [`SymmetricConvention::ExcludeTrueClass`]
//! gives the other common variant with diagonal `1 − eta`.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SelcError};
use crate::rng::{CounterUniform, Stream};
use crate::tensor::Matrix2D;

const ROW_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SymmetricConvention {
    /// Uniform over all `C` classes, true class included.
    #[default]
    IncludeTrueClass,
    /// Uniform over the `C − 1` other classes.
    ExcludeTrueClass,
}

/// The standard CIFAR-10 confusable-pair flips:
/// truck→automobile, bird→airplane, deer→horse, cat↔dog.
pub const CIFAR10_ASYMMETRIC: [(usize, usize); 5] = [(9, 1), (2, 0), (4, 7), (3, 5), (5, 3)];

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    q: Matrix2D,
    nominal_eta: f64,
}

impl TransitionMatrix {
    /// Validate an arbitrary row-stochastic matrix.
    pub fn from_matrix(q: Matrix2D, nominal_eta: f64) -> Result<Self> {
        if q.rows() != q.cols() || q.rows() < 2 {
            return Err(SelcError::param(format!(
                "transition matrix must be square with C >= 2, got {:?}",
                q.shape()
            )));
        }
        for (i, row) in q.row_iter().enumerate() {
            if row.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(SelcError::param(format!("row {i} has entries outside [0, 1]")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(SelcError::param(format!("row {i} sums to {s}, not 1")));
            }
        }
        Ok(Self { q, nominal_eta })
    }

    pub fn num_classes(&self) -> usize {
        self.q.rows()
    }

    pub fn matrix(&self) -> &Matrix2D {
        &self.q
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.q.row(i)
    }

    pub fn nominal_eta(&self) -> f64 {
        self.nominal_eta
    }

    /// Mislabel probability when true classes are uniformly distributed.
    pub fn expected_flip_rate(&self) -> f64 {
        let c = self.num_classes();
        (0..c).map(|i| 1.0 - self.q[(i, i)]).sum::<f64>() / c as f64
    }

    /// One row per line, space-separated, shortest round-trip decimals.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for row in self.q.row_iter() {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(s, "{}", cells.join(" "));
        }
        s
    }

    /// Parse [`to_text`](Self::to_text) output. The nominal `eta` is not stored
    /// in the file and is recovered as the largest off-diagonal row mass.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let row = line
                .split_whitespace()
                .map(|tok| {
                    tok.parse::<f64>().map_err(|e| {
                        SelcError::Config(format!("matrix line {}: '{tok}': {e}", ln + 1))
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            rows.push(row);
        }
        let q = Matrix2D::from_rows(&rows).map_err(|e| SelcError::Config(e.to_string()))?;
        let eta = (0..q.rows().min(q.cols()))
            .map(|i| 1.0 - q[(i, i)])
            .fold(0.0, f64::max);
        Self::from_matrix(q, eta)
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SelcError::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| SelcError::io(path, e))
    }
}

fn check_eta(eta: f64) -> Result<()> {
    if !(0.0..1.0).contains(&eta) {
        return Err(SelcError::param(format!("eta must be in [0, 1), got {eta}")));
    }
    Ok(())
}

pub fn build_symmetric_q(
    num_classes: usize,
    eta: f64,
    convention: SymmetricConvention,
) -> Result<TransitionMatrix> {
    check_eta(eta)?;
    if num_classes < 2 {
        return Err(SelcError::param("symmetric noise needs at least 2 classes"));
    }
    let c = num_classes as f64;
    let (diag, off) = match convention {
        SymmetricConvention::IncludeTrueClass => (1.0 - eta + eta / c, eta / c),
        SymmetricConvention::ExcludeTrueClass => (1.0 - eta, eta / (c - 1.0)),
    };
    let mut q = Matrix2D::zeros(num_classes, num_classes);
    for i in 0..num_classes {
        for j in 0..num_classes {
            q[(i, j)] = if i == j { diag } else { off };
        }
    }
    TransitionMatrix::from_matrix(q, eta)
}

/// Each mapped source keeps `1 − eta` and sends `eta` to its target.
pub fn build_asymmetric_q(
    num_classes: usize,
    eta: f64,
    mapping: &[(usize, usize)],
) -> Result<TransitionMatrix> {
    check_eta(eta)?;
    if num_classes < 2 {
        return Err(SelcError::param("asymmetric noise needs at least 2 classes"));
    }
    let mut q = Matrix2D::identity(num_classes);
    let mut seen = vec![false; num_classes];
    for &(src, dst) in mapping {
        if src >= num_classes || dst >= num_classes {
            return Err(SelcError::param(format!(
                "mapping {src}->{dst} outside {num_classes} classes"
            )));
        }
        if src == dst {
            return Err(SelcError::param(format!("class {src} mapped onto itself")));
        }
        if std::mem::replace(&mut seen[src], true) {
            return Err(SelcError::param(format!("class {src} mapped twice")));
        }
        q[(src, src)] = 1.0 - eta;
        q[(src, dst)] = eta;
    }
    TransitionMatrix::from_matrix(q, eta)
}

/// Parse `src dst` or `src -> dst` pairs, one per line; `#` starts a comment.
pub fn parse_mapping(text: &str) -> Result<Vec<(usize, usize)>> {
    let mut out = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let toks: Vec<&str> = line
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|t| !t.is_empty() && *t != "->")
            .collect();
        let parse = |t: &str| {
            t.parse::<usize>()
                .map_err(|e| SelcError::Config(format!("mapping line {}: '{t}': {e}", ln + 1)))
        };
        match toks.as_slice() {
            [a, b] => out.push((parse(a)?, parse(b)?)),
            _ => {
                return Err(SelcError::Config(format!(
                    "mapping line {}: expected 'src dst', got '{raw}'",
                    ln + 1
                )))
            }
        }
    }
    Ok(out)
}

/// Resample every label from its row of `q`. Sample `i` uses the `i`-th
/// counter position of the noise stream, so results do not depend on order.
pub fn inject_noise(clean_labels: &[usize], q: &TransitionMatrix, seed: u64) -> Result<Vec<usize>> {
    let c = q.num_classes();
    if let Some(&bad) = clean_labels.iter().find(|&&y| y >= c) {
        return Err(SelcError::param(format!("label {bad} outside {c} classes")));
    }
    let mut uniform = CounterUniform::new(seed, Stream::Noise);
    Ok(clean_labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let u = uniform.at(i as u64);
            let row = q.row(y);
            let mut acc = 0.0;
            for (j, &p) in row.iter().enumerate() {
                acc += p;
                if u < acc {
                    return j;
                }
            }
            // rounding left u above the final partial sum
            row.iter().rposition(|&p| p > 0.0).unwrap_or(y)
        })
        .collect())
}

pub fn empirical_noise_rate(noisy_labels: &[usize], true_labels: &[usize]) -> Result<f64> {
    if noisy_labels.len() != true_labels.len() {
        return Err(SelcError::dim(format!(
            "{} noisy labels vs {} true labels",
            noisy_labels.len(),
            true_labels.len()
        )));
    }
    if noisy_labels.is_empty() {
        return Ok(0.0);
    }
    let flips = noisy_labels
        .iter()
        .zip(true_labels)
        .filter(|(a, b)| a != b)
        .count();
    Ok(flips as f64 / noisy_labels.len() as f64)
}
