//! Turning-point estimation from per-epoch training-loss distributions.
//!
//! Each epoch's per-sample losses are min-max normalized and split into a
//! low-loss and a high-loss mode, by a two-component Gaussian mixture (EM)
//! and by 1-D 2-means. The separation of the two modes is tracked per epoch:
//!
//! * M1 = |μ₁ − μ₂| of the mixture,
//! * M2 = KL(N₁ ‖ N₂) between the mixture components,
//! * M3 = |S₁ − S₂| of the 2-means centroids.
//!
//! The epoch where a metric peaks is the turning-point estimate.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SelcError};
use crate::format::fmt_sig;

pub const VARIANCE_FLOOR: f64 = 1e-6;
pub const EM_TOLERANCE: f64 = 1e-6;
pub const EM_MAX_ITER: usize = 200;
const LLOYD_MAX_ITER: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct LossSnapshot {
    pub epoch: usize,
    pub losses: Vec<f64>,
    pub normalized: Vec<f64>,
}

impl LossSnapshot {
    pub fn new(epoch: usize, losses: Vec<f64>) -> Result<Self> {
        let normalized = normalize_losses(&losses)?;
        Ok(Self {
            epoch,
            losses,
            normalized,
        })
    }
}

/// Min-max scale to `[0, 1]`; a constant input maps to all zeros.
pub fn normalize_losses(losses: &[f64]) -> Result<Vec<f64>> {
    if losses.is_empty() {
        return Err(SelcError::param("cannot normalize an empty loss vector"));
    }
    if losses.iter().any(|v| !v.is_finite()) {
        return Err(SelcError::param("losses must be finite"));
    }
    let min = losses.iter().copied().fold(f64::INFINITY, f64::min);
    let max = losses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    if range <= 0.0 {
        return Ok(vec![0.0; losses.len()]);
    }
    Ok(losses.iter().map(|&v| (v - min) / range).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    /// `centroids[0] <= centroids[1]`.
    pub centroids: [f64; 2],
    /// 0 for the lower cluster, 1 for the upper.
    pub assignments: Vec<u8>,
    pub inertia: f64,
    /// All values identical; the split is meaningless.
    pub degenerate: bool,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn cluster_stats(values: &[f64], assignments: &[u8]) -> ([f64; 2], [usize; 2]) {
    let mut sum = [0.0; 2];
    let mut count = [0usize; 2];
    for (&v, &a) in values.iter().zip(assignments) {
        sum[a as usize] += v;
        count[a as usize] += 1;
    }
    (sum, count)
}

fn inertia(values: &[f64], assignments: &[u8], centroids: [f64; 2]) -> f64 {
    values
        .iter()
        .zip(assignments)
        .map(|(&v, &a)| (v - centroids[a as usize]).powi(2))
        .sum()
}

/// Two-cluster 1-D k-means.
///
/// Lloyd iterations start from the 10th and 90th percentiles and run to an
/// assignment fixed point. In one dimension the optimal partition is a split
/// of the sorted values, so the result is then checked against the best split
/// found with prefix sums, and replaced by it when Lloyd stopped at a worse
/// local optimum. The returned fit is always a Lloyd fixed point.
pub fn fit_kmeans2(values: &[f64]) -> Result<KMeansFit> {
    if values.len() < 2 {
        return Err(SelcError::param("2-means needs at least 2 points"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(SelcError::param("2-means input must be finite"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (lo, hi) = (sorted[0], sorted[sorted.len() - 1]);
    if lo == hi {
        return Ok(KMeansFit {
            centroids: [lo, lo],
            assignments: vec![0; values.len()],
            inertia: 0.0,
            degenerate: true,
        });
    }

    let mut centroids = [percentile(&sorted, 0.1), percentile(&sorted, 0.9)];
    if centroids[0] == centroids[1] {
        centroids = [lo, hi];
    }
    let mut assignments = vec![0u8; values.len()];
    for iter in 0..LLOYD_MAX_ITER {
        let mid = 0.5 * (centroids[0] + centroids[1]);
        let mut changed = iter == 0;
        for (a, &v) in assignments.iter_mut().zip(values) {
            let new = u8::from(v > mid);
            if *a != new {
                *a = new;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let (sum, count) = cluster_stats(values, &assignments);
        for k in 0..2 {
            if count[k] > 0 {
                centroids[k] = sum[k] / count[k] as f64;
            }
        }
    }
    let lloyd_inertia = inertia(values, &assignments, centroids);

    // best contiguous split of the sorted values
    let n = sorted.len();
    let mut prefix = Vec::with_capacity(n + 1);
    let mut prefix_sq = Vec::with_capacity(n + 1);
    prefix.push(0.0);
    prefix_sq.push(0.0);
    for &v in &sorted {
        prefix.push(prefix.last().unwrap() + v);
        prefix_sq.push(prefix_sq.last().unwrap() + v * v);
    }
    let sse = |a: usize, b: usize| {
        let m = (b - a) as f64;
        let s = prefix[b] - prefix[a];
        (prefix_sq[b] - prefix_sq[a] - s * s / m).max(0.0)
    };
    let mut best: Option<(usize, f64)> = None;
    for k in 1..n {
        if sorted[k - 1] == sorted[k] {
            continue;
        }
        let cost = sse(0, k) + sse(k, n);
        if best.is_none_or(|(_, c)| cost < c) {
            best = Some((k, cost));
        }
    }
    let (k, split_cost) = best.expect("at least two distinct values");
    let scale = lloyd_inertia.abs().max(f64::MIN_POSITIVE);
    if split_cost < lloyd_inertia - 1e-12 * scale {
        let threshold = sorted[k - 1];
        for (a, &v) in assignments.iter_mut().zip(values) {
            *a = u8::from(v > threshold);
        }
        let (sum, count) = cluster_stats(values, &assignments);
        centroids = [sum[0] / count[0] as f64, sum[1] / count[1] as f64];
    }
    let inertia = inertia(values, &assignments, centroids);
    Ok(KMeansFit {
        centroids,
        assignments,
        inertia,
        degenerate: false,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmFit {
    pub weights: [f64; 2],
    /// `means[0] <= means[1]`: component 0 is the low-loss mode.
    pub means: [f64; 2],
    pub variances: [f64; 2],
    pub log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Log-likelihood before each M-step and at the final parameters.
    pub log_likelihood_trace: Vec<f64>,
}

#[derive(Clone, Copy)]
struct Params {
    weights: [f64; 2],
    means: [f64; 2],
    variances: [f64; 2],
}

fn log_normal(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + (x - mean).powi(2) / var)
}

/// E-step: log-likelihood and the responsibility of component 1 per point.
fn e_step(values: &[f64], p: &Params, resp: &mut [f64]) -> f64 {
    let mut ll = 0.0;
    for (r, &x) in resp.iter_mut().zip(values) {
        let a = p.weights[0].ln() + log_normal(x, p.means[0], p.variances[0]);
        let b = p.weights[1].ln() + log_normal(x, p.means[1], p.variances[1]);
        let m = a.max(b);
        let lse = m + ((a - m).exp() + (b - m).exp()).ln();
        ll += lse;
        *r = (b - lse).exp();
    }
    ll
}

fn m_step(values: &[f64], resp: &[f64], prev: &Params) -> Params {
    let n = values.len() as f64;
    let mut nk = [0.0; 2];
    let mut sx = [0.0; 2];
    for (&x, &r1) in values.iter().zip(resp) {
        let r = [1.0 - r1, r1];
        for k in 0..2 {
            nk[k] += r[k];
            sx[k] += r[k] * x;
        }
    }
    let mut next = *prev;
    for k in 0..2 {
        if nk[k] > 0.0 {
            next.means[k] = sx[k] / nk[k];
        }
    }
    let mut sq = [0.0; 2];
    for (&x, &r1) in values.iter().zip(resp) {
        sq[0] += (1.0 - r1) * (x - next.means[0]).powi(2);
        sq[1] += r1 * (x - next.means[1]).powi(2);
    }
    for k in 0..2 {
        if nk[k] > 0.0 {
            next.variances[k] = (sq[k] / nk[k]).max(VARIANCE_FLOOR);
        }
    }
    let w0 = nk[0] / n;
    if w0 > 0.0 && w0 < 1.0 {
        next.weights = [w0, 1.0 - w0];
    }
    next
}

/// Two-component 1-D Gaussian mixture by EM, initialized from a 2-means
/// partition of the same data.
pub fn fit_gmm2(values: &[f64]) -> Result<GmmFit> {
    if values.len() < 4 {
        return Err(SelcError::param(format!(
            "mixture fit needs at least 4 points, got {}",
            values.len()
        )));
    }
    let km = fit_kmeans2(values)?;
    let n = values.len() as f64;
    let mean_all = values.iter().sum::<f64>() / n;
    let var_all = values.iter().map(|v| (v - mean_all).powi(2)).sum::<f64>() / n;
    let mut params = if km.degenerate {
        let v = var_all.max(VARIANCE_FLOOR);
        Params {
            weights: [0.5, 0.5],
            means: [mean_all, mean_all],
            variances: [v, v],
        }
    } else {
        let mut p = Params {
            weights: [0.5, 0.5],
            means: km.centroids,
            variances: [VARIANCE_FLOOR; 2],
        };
        let mut count = [0.0; 2];
        let mut sq = [0.0; 2];
        for (&x, &a) in values.iter().zip(&km.assignments) {
            let k = a as usize;
            count[k] += 1.0;
            sq[k] += (x - km.centroids[k]).powi(2);
        }
        for k in 0..2 {
            p.variances[k] = (sq[k] / count[k]).max(VARIANCE_FLOOR);
        }
        p.weights = [count[0] / n, 1.0 - count[0] / n];
        p
    };

    let mut resp = vec![0.0; values.len()];
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..EM_MAX_ITER {
        let ll = e_step(values, &params, &mut resp);
        trace.push(ll);
        if it > 0 && ll - trace[it - 1] < EM_TOLERANCE {
            converged = true;
            break;
        }
        params = m_step(values, &resp, &params);
        iterations += 1;
    }
    if !converged {
        trace.push(e_step(values, &params, &mut resp));
    }
    let log_likelihood = *trace.last().unwrap();

    if params.means[0] > params.means[1] {
        params.weights.swap(0, 1);
        params.means.swap(0, 1);
        params.variances.swap(0, 1);
    }
    Ok(GmmFit {
        weights: params.weights,
        means: params.means,
        variances: params.variances,
        log_likelihood,
        iterations,
        converged,
        log_likelihood_trace: trace,
    })
}

pub fn metric_m1(fit: &GmmFit) -> f64 {
    (fit.means[0] - fit.means[1]).abs()
}

/// KL divergence of the low-mean component from the high-mean component.
pub fn metric_m2(fit: &GmmFit) -> f64 {
    kl_gaussian(fit.means[0], fit.variances[0], fit.means[1], fit.variances[1])
}

/// `KL(N(μ₁,σ₁²) ‖ N(μ₂,σ₂²))`.
pub fn kl_gaussian(mu1: f64, var1: f64, mu2: f64, var2: f64) -> f64 {
    let (s1, s2) = (var1.sqrt(), var2.sqrt());
    (s2 / s1).ln() + (var1 + (mu1 - mu2).powi(2)) / (2.0 * var2) - 0.5
}

pub fn metric_m3(fit: &KMeansFit) -> f64 {
    (fit.centroids[0] - fit.centroids[1]).abs()
}

/// 2-means fit together with its centroid gap.
pub fn fit_kmeans2_and_m3(values: &[f64]) -> Result<(KMeansFit, f64)> {
    let fit = fit_kmeans2(values)?;
    let m3 = metric_m3(&fit);
    Ok((fit, m3))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    M1,
    M2,
    M3,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub m1: f64,
    pub m2: f64,
    pub m3: f64,
}

impl EpochMetrics {
    pub fn get(&self, metric: Metric) -> f64 {
        match metric {
            Metric::M1 => self.m1,
            Metric::M2 => self.m2,
            Metric::M3 => self.m3,
        }
    }
}

/// Normalize raw per-sample losses and compute all three metrics.
pub fn epoch_metrics(losses: &[f64]) -> Result<EpochMetrics> {
    let normalized = normalize_losses(losses)?;
    let gmm = fit_gmm2(&normalized)?;
    let (_, m3) = fit_kmeans2_and_m3(&normalized)?;
    Ok(EpochMetrics {
        m1: metric_m1(&gmm),
        m2: metric_m2(&gmm),
        m3,
    })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricSeries {
    pub epochs: Vec<usize>,
    pub m1: Vec<f64>,
    pub m2: Vec<f64>,
    pub m3: Vec<f64>,
}

impl MetricSeries {
    pub fn push(&mut self, epoch: usize, m: EpochMetrics) {
        self.epochs.push(epoch);
        self.m1.push(m.m1);
        self.m2.push(m.m2);
        self.m3.push(m.m3);
    }

    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn values(&self, metric: Metric) -> &[f64] {
        match metric {
            Metric::M1 => &self.m1,
            Metric::M2 => &self.m2,
            Metric::M3 => &self.m3,
        }
    }

    pub fn from_snapshots(snapshots: &[LossSnapshot]) -> Result<Self> {
        let mut s = Self::default();
        for snap in snapshots {
            s.push(snap.epoch, epoch_metrics(&snap.losses)?);
        }
        Ok(s)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("epoch,m1,m2,m3\n");
        for i in 0..self.len() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                self.epochs[i],
                fmt_sig(self.m1[i]),
                fmt_sig(self.m2[i]),
                fmt_sig(self.m3[i])
            ));
        }
        std::fs::write(path, out).map_err(|e| SelcError::io(path, e))
    }
}

/// 3-point running median; the two end points are left as they are.
pub fn median_filter3(values: &[f64]) -> Vec<f64> {
    let mut out = values.to_vec();
    for i in 1..values.len().saturating_sub(1) {
        let mut w = [values[i - 1], values[i], values[i + 1]];
        w.sort_by(f64::total_cmp);
        out[i] = w[1];
    }
    out
}

/// Epoch at which `metric` peaks; ties go to the earliest epoch.
pub fn estimate_turning_point(series: &MetricSeries, metric: Metric, smooth: bool) -> Result<usize> {
    if series.is_empty() {
        return Err(SelcError::param("empty metric series"));
    }
    let raw = series.values(metric);
    let values = if smooth {
        median_filter3(raw)
    } else {
        raw.to_vec()
    };
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    Ok(series.epochs[best])
}

/// Live detection: fires once `patience` epochs pass without a new maximum.
#[derive(Debug, Clone)]
pub struct OnlineDetector {
    patience: usize,
    best: Option<(usize, f64)>,
    since_best: usize,
}

impl OnlineDetector {
    pub const DEFAULT_PATIENCE: usize = 10;

    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            since_best: 0,
        }
    }

    /// Record one epoch's value; returns true when the peak is considered passed.
    pub fn observe(&mut self, epoch: usize, value: f64) -> bool {
        match self.best {
            Some((_, b)) if value <= b => self.since_best += 1,
            _ => {
                self.best = Some((epoch, value));
                self.since_best = 0;
            }
        }
        self.fired()
    }

    pub fn fired(&self) -> bool {
        self.best.is_some() && self.since_best >= self.patience
    }

    /// Epoch of the largest value seen so far.
    pub fn peak_epoch(&self) -> Option<usize> {
        self.best.map(|(e, _)| e)
    }
}

impl Default for OnlineDetector {
    fn default() -> Self {
        Self::new(Self::DEFAULT_PATIENCE)
    }
}

/// Append `(epoch, sample_id, loss)` rows; writes the header when `header` is set.
pub fn write_loss_rows(w: &mut impl Write, snapshot: &LossSnapshot, header: bool) -> std::io::Result<()> {
    if header {
        writeln!(w, "epoch,sample_id,loss")?;
    }
    for (id, &l) in snapshot.losses.iter().enumerate() {
        writeln!(w, "{},{},{}", snapshot.epoch, id, fmt_sig(l))?;
    }
    Ok(())
}

pub fn write_loss_snapshots(path: &Path, snapshots: &[LossSnapshot]) -> Result<()> {
    let mut buf = Vec::new();
    for (i, s) in snapshots.iter().enumerate() {
        write_loss_rows(&mut buf, s, i == 0).map_err(|e| SelcError::io(path, e))?;
    }
    if snapshots.is_empty() {
        buf.extend_from_slice(b"epoch,sample_id,loss\n");
    }
    std::fs::write(path, buf).map_err(|e| SelcError::io(path, e))
}

/// Read an `epoch,sample_id,loss` CSV into per-epoch snapshots ordered by
/// epoch. Every epoch must list sample ids `0..N` exactly once.
pub fn read_loss_snapshots(path: &Path) -> Result<Vec<LossSnapshot>> {
    #[derive(Deserialize)]
    struct Row {
        epoch: usize,
        sample_id: usize,
        loss: f64,
    }
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => SelcError::io(path, io),
        other => SelcError::Config(format!("{}: {other:?}", path.display())),
    })?;
    let mut by_epoch: BTreeMap<usize, BTreeMap<usize, f64>> = BTreeMap::new();
    for row in reader.deserialize::<Row>() {
        let row = row.map_err(|e| SelcError::Format {
            path: path.to_path_buf(),
            offset: e.position().map_or(0, |p| p.byte()),
            detail: e.to_string(),
        })?;
        if by_epoch
            .entry(row.epoch)
            .or_default()
            .insert(row.sample_id, row.loss)
            .is_some()
        {
            return Err(SelcError::Config(format!(
                "{}: sample {} repeated in epoch {}",
                path.display(),
                row.sample_id,
                row.epoch
            )));
        }
    }
    by_epoch
        .into_iter()
        .map(|(epoch, rows)| {
            if rows.keys().copied().ne(0..rows.len()) {
                return Err(SelcError::Config(format!(
                    "{}: epoch {epoch} does not cover sample ids 0..{}",
                    path.display(),
                    rows.len()
                )));
            }
            LossSnapshot::new(epoch, rows.into_values().collect())
        })
        .collect()
}
