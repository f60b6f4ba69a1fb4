//! Datasets: synthetic Gaussian blobs, IDX (MNIST-format) and CSV ingestion,
//! and the noisy-label container used by the training loop.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SelcError};
use crate::noise::{inject_noise, TransitionMatrix};
use crate::rng::{sub_stream_rng, Stream};
use crate::tensor::Matrix2D;

/// Clean features with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledData {
    pub features: Matrix2D,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledData {
    pub fn new(features: Matrix2D, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(SelcError::dim(format!(
                "{} feature rows vs {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(SelcError::param(format!(
                "label {bad} outside {num_classes} classes"
            )));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}

/// Ground-truth labels of a noisy training set. Only evaluation code takes
/// this type; nothing on the training path accepts it.
#[derive(Debug, Clone, PartialEq)]
pub struct TrueLabels(Vec<usize>);

impl From<Vec<usize>> for TrueLabels {
    fn from(labels: Vec<usize>) -> Self {
        Self(labels)
    }
}

impl TrueLabels {
    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Training set with observed (possibly corrupted) labels. Sample ids are the
/// row indices `0..N`.
#[derive(Debug, Clone)]
pub struct NoisyDataset {
    features: Matrix2D,
    noisy_labels: Vec<usize>,
    true_labels: TrueLabels,
    num_classes: usize,
}

/// What the training loop is allowed to see.
///
/// ```compile_fail
/// # use selc::dataset::TrainingView;
/// fn peek(view: TrainingView<'_>) -> usize {
///     view.true_labels.len()
/// }
/// ```
#[derive(Debug, Clone, Copy)]
pub struct TrainingView<'a> {
    pub features: &'a Matrix2D,
    pub noisy_labels: &'a [usize],
    pub num_classes: usize,
}

impl TrainingView<'_> {
    pub fn len(&self) -> usize {
        self.noisy_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.noisy_labels.is_empty()
    }
}

impl NoisyDataset {
    /// Corrupt `clean` with `q` using the noise stream of `seed`.
    pub fn corrupt(clean: LabeledData, q: &TransitionMatrix, seed: u64) -> Result<Self> {
        if q.num_classes() != clean.num_classes {
            return Err(SelcError::dim(format!(
                "noise matrix over {} classes for data with {}",
                q.num_classes(),
                clean.num_classes
            )));
        }
        let noisy = inject_noise(&clean.labels, q, seed)?;
        Self::from_parts(clean.features, noisy, clean.labels, clean.num_classes)
    }

    pub fn from_parts(
        features: Matrix2D,
        noisy_labels: Vec<usize>,
        true_labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        if features.rows() != noisy_labels.len() || noisy_labels.len() != true_labels.len() {
            return Err(SelcError::dim(format!(
                "{} rows, {} noisy labels, {} true labels",
                features.rows(),
                noisy_labels.len(),
                true_labels.len()
            )));
        }
        if noisy_labels
            .iter()
            .chain(&true_labels)
            .any(|&y| y >= num_classes)
        {
            return Err(SelcError::param(format!("label outside {num_classes} classes")));
        }
        Ok(Self {
            features,
            noisy_labels,
            true_labels: TrueLabels(true_labels),
            num_classes,
        })
    }

    pub fn training_view(&self) -> TrainingView<'_> {
        TrainingView {
            features: &self.features,
            noisy_labels: &self.noisy_labels,
            num_classes: self.num_classes,
        }
    }

    pub fn features(&self) -> &Matrix2D {
        &self.features
    }

    pub fn noisy_labels(&self) -> &[usize] {
        &self.noisy_labels
    }

    pub fn true_labels(&self) -> &TrueLabels {
        &self.true_labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.noisy_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.noisy_labels.is_empty()
    }

    pub fn ids(&self) -> std::ops::Range<usize> {
        0..self.len()
    }
}

/// Isotropic Gaussian clusters, one per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobSpec {
    /// Training samples.
    pub n: usize,
    pub d: usize,
    pub classes: usize,
    pub cluster_std: f64,
    pub seed: u64,
    /// Held-out samples drawn from the same clusters.
    #[serde(default = "default_test_n")]
    pub test_n: usize,
    /// Centers are drawn uniformly from `[-center_box, center_box]^d`.
    #[serde(default = "default_center_box")]
    pub center_box: f64,
}

fn default_test_n() -> usize {
    2000
}

fn default_center_box() -> f64 {
    1.5
}

const CENTER_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone)]
pub struct TrainTest {
    pub train: LabeledData,
    pub test: LabeledData,
}

/// Draw class centers (pairwise distance at least `4·cluster_std`, rejection
/// resampled) and balanced train/test samples around them.
pub fn generate_blobs(spec: &BlobSpec) -> Result<TrainTest> {
    if spec.classes < 2 || spec.n < spec.classes {
        return Err(SelcError::param(format!(
            "blobs need C >= 2 and N >= C (C = {}, N = {})",
            spec.classes, spec.n
        )));
    }
    if spec.d == 0 || !(spec.cluster_std > 0.0) || !(spec.center_box > 0.0) {
        return Err(SelcError::param(
            "blobs need d >= 1 and positive cluster_std and center_box",
        ));
    }
    let min_dist = 4.0 * spec.cluster_std;
    let mut rng = sub_stream_rng(spec.seed, Stream::Blobs, 0);
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(spec.classes);
    let mut attempts = 0;
    while centers.len() < spec.classes {
        attempts += 1;
        if attempts > CENTER_ATTEMPTS {
            return Err(SelcError::param(format!(
                "could not place {} centers {min_dist} apart in [-{b}, {b}]^{} after {CENTER_ATTEMPTS} attempts",
                spec.classes,
                spec.d,
                b = spec.center_box
            )));
        }
        let cand: Vec<f64> = (0..spec.d)
            .map(|_| rng.random_range(-spec.center_box..=spec.center_box))
            .collect();
        let far = centers.iter().all(|c| {
            c.iter()
                .zip(&cand)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt()
                >= min_dist
        });
        if far {
            centers.push(cand);
        }
    }
    let sample = |n: usize, sub: u32| {
        let mut rng = sub_stream_rng(spec.seed, Stream::Blobs, sub);
        let mut data = Vec::with_capacity(n * spec.d);
        let labels: Vec<usize> = (0..n).map(|i| i % spec.classes).collect();
        for &y in &labels {
            for &c in &centers[y] {
                let z: f64 = rng.sample(StandardNormal);
                data.push(c + spec.cluster_std * z);
            }
        }
        LabeledData::new(
            Matrix2D::from_vec(n, spec.d, data).expect("sized above"),
            labels,
            spec.classes,
        )
    };
    Ok(TrainTest {
        train: sample(spec.n, 1)?,
        test: sample(spec.test_n, 2)?,
    })
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

struct IdxReader<'a> {
    path: &'a Path,
    bytes: Vec<u8>,
    pos: usize,
}

impl<'a> IdxReader<'a> {
    fn open(path: &'a Path) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| SelcError::io(path, e))?;
        Ok(Self {
            path,
            bytes,
            pos: 0,
        })
    }

    fn err(&self, offset: usize, detail: impl Into<String>) -> SelcError {
        SelcError::Format {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            detail: detail.into(),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let end = self.pos + 4;
        let b = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| self.err(self.pos, format!("truncated while reading {what}")))?;
        let v = u32::from_be_bytes([b[0], b[1], b[2], b[3]]);
        self.pos = end;
        Ok(v)
    }

    fn body(&mut self, len: usize) -> Result<&[u8]> {
        let available = self.bytes.len() - self.pos;
        if available < len {
            return Err(self.err(
                self.bytes.len(),
                format!("truncated payload: expected {len} bytes, found {available}"),
            ));
        }
        let start = self.pos;
        self.pos += len;
        Ok(&self.bytes[start..self.pos])
    }
}

/// Read an IDX image/label pair; pixels are scaled to `[0, 1]` and flattened.
/// The class count is one more than the largest label.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledData> {
    let mut img = IdxReader::open(images_path)?;
    let magic = img.u32("magic number")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(img.err(0, format!("bad image magic 0x{magic:08x}")));
    }
    let n = img.u32("image count")? as usize;
    let rows = img.u32("row count")? as usize;
    let cols = img.u32("column count")? as usize;
    let d = rows * cols;
    let pixels: Vec<f64> = img
        .body(n * d)?
        .iter()
        .map(|&p| p as f64 / 255.0)
        .collect();

    let mut lab = IdxReader::open(labels_path)?;
    let magic = lab.u32("magic number")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(lab.err(0, format!("bad label magic 0x{magic:08x}")));
    }
    let n_labels = lab.u32("label count")? as usize;
    if n_labels != n {
        return Err(lab.err(4, format!("{n_labels} labels for {n} images")));
    }
    let labels: Vec<usize> = lab.body(n)?.iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().map_or(2, |&m| (m + 1).max(2));
    LabeledData::new(Matrix2D::from_vec(n, d, pixels)?, labels, num_classes)
}

/// Write an IDX pair. Features are quantized to bytes as `round(255·x)`.
pub fn write_idx(
    data: &LabeledData,
    rows: usize,
    cols: usize,
    images_path: &Path,
    labels_path: &Path,
) -> Result<()> {
    if rows * cols != data.dim() {
        return Err(SelcError::dim(format!(
            "{rows}x{cols} images for {} features",
            data.dim()
        )));
    }
    if data.labels.iter().any(|&y| y > u8::MAX as usize) {
        return Err(SelcError::param("IDX labels must fit in a byte"));
    }
    let n = data.len() as u32;
    let mut img = Vec::with_capacity(16 + data.features.data().len());
    for v in [IDX_IMAGES_MAGIC, n, rows as u32, cols as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend(
        data.features
            .data()
            .iter()
            .map(|&x| (x.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    std::fs::write(images_path, img).map_err(|e| SelcError::io(images_path, e))?;

    let mut lab = Vec::with_capacity(8 + data.len());
    for v in [IDX_LABELS_MAGIC, n] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    lab.extend(data.labels.iter().map(|&y| y as u8));
    std::fs::write(labels_path, lab).map_err(|e| SelcError::io(labels_path, e))
}

/// CSV with a header row; every column but the last is a feature, the last
/// column (`label`) is the class index.
pub fn load_csv(path: &Path) -> Result<LabeledData> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut d = None;
    for rec in reader.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let offset = rec.position().map_or(0, |p| p.byte());
        let fail = |detail: String| SelcError::Format {
            path: path.to_path_buf(),
            offset,
            detail,
        };
        if rec.len() < 2 {
            return Err(fail("need at least one feature and a label".into()));
        }
        let width = rec.len() - 1;
        if *d.get_or_insert(width) != width {
            return Err(fail(format!("row has {width} features, expected {}", d.unwrap())));
        }
        for field in rec.iter().take(width) {
            data.push(
                field
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| fail(format!("feature '{field}': {e}")))?,
            );
        }
        let lab = &rec[width];
        labels.push(
            lab.trim()
                .parse::<usize>()
                .map_err(|e| fail(format!("label '{lab}': {e}")))?,
        );
    }
    let d = d.ok_or_else(|| SelcError::Format {
        path: path.to_path_buf(),
        offset: 0,
        detail: "no data rows".into(),
    })?;
    let num_classes = labels.iter().max().map_or(2, |&m| (m + 1).max(2));
    LabeledData::new(Matrix2D::from_vec(labels.len(), d, data)?, labels, num_classes)
}

pub fn write_csv(data: &LabeledData, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| SelcError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut header: Vec<String> = (0..data.dim()).map(|j| format!("x{j}")).collect();
    header.push("label".into());
    let io = |e| SelcError::io(path, e);
    writeln!(w, "{}", header.join(",")).map_err(io)?;
    for (row, y) in data.features.row_iter().zip(&data.labels) {
        let mut cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        cells.push(y.to_string());
        writeln!(w, "{}", cells.join(",")).map_err(io)?;
    }
    w.flush().map_err(io)
}

fn csv_err(path: &Path, e: csv::Error) -> SelcError {
    let offset = e.position().map_or(0, |p| p.byte());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => SelcError::io(path, io),
        other => SelcError::Format {
            path: path.to_path_buf(),
            offset,
            detail: format!("{other:?}"),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(classes: usize, std: f64, seed: u64) -> BlobSpec {
        BlobSpec {
            n: 400,
            d: 8,
            classes,
            cluster_std: std,
            seed,
            test_n: 100,
            center_box: 1.5,
        }
    }

    #[test]
    fn blobs_are_deterministic_and_balanced() {
        let a = generate_blobs(&spec(4, 0.5, 3)).unwrap();
        let b = generate_blobs(&spec(4, 0.5, 3)).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        let c = generate_blobs(&spec(4, 0.5, 4)).unwrap();
        assert_ne!(a.train, c.train);
        for k in 0..4 {
            assert_eq!(a.train.labels.iter().filter(|&&y| y == k).count(), 100);
        }
    }

    #[test]
    fn blob_centers_are_separated() {
        let s = spec(4, 0.5, 11);
        let t = generate_blobs(&s).unwrap();
        // class means estimate the centers; 100 draws per class at std 0.5
        let mut means = vec![vec![0.0; s.d]; s.classes];
        for (row, &y) in t.train.features.row_iter().zip(&t.train.labels) {
            for (m, v) in means[y].iter_mut().zip(row) {
                *m += v / 100.0;
            }
        }
        for i in 0..s.classes {
            for j in i + 1..s.classes {
                let dist: f64 = means[i]
                    .iter()
                    .zip(&means[j])
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt();
                assert!(dist > 4.0 * s.cluster_std - 0.5, "{dist}");
            }
        }
    }

    #[test]
    fn impossible_center_placement_fails() {
        let mut s = spec(8, 10.0, 1);
        s.d = 1;
        assert!(matches!(generate_blobs(&s), Err(SelcError::Parameter(_))));
    }

    #[test]
    fn invalid_blob_specs() {
        let mut s = spec(1, 1.0, 0);
        assert!(generate_blobs(&s).is_err());
        s.classes = 4;
        s.n = 3;
        assert!(generate_blobs(&s).is_err());
    }

    #[test]
    fn noisy_dataset_checks_classes() {
        let t = generate_blobs(&spec(4, 0.5, 3)).unwrap();
        let q = crate::noise::build_symmetric_q(3, 0.2, Default::default()).unwrap();
        assert!(NoisyDataset::corrupt(t.train, &q, 0).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.csv");
        let t = generate_blobs(&spec(3, 0.5, 9)).unwrap();
        write_csv(&t.train, &path).unwrap();
        let back = load_csv(&path).unwrap();
        assert_eq!(back, t.train);
    }

    #[test]
    fn csv_errors_name_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "x0,label\n0.5,1\nabc,0\n").unwrap();
        match load_csv(&path) {
            Err(SelcError::Format { path: p, offset, .. }) => {
                assert_eq!(p, path);
                assert!(offset > 0);
            }
            other => panic!("{other:?}"),
        }
    }
}
