use std::path::Path;

use selc::dataset::{load_idx, write_idx, LabeledData};
use selc::noise::{build_asymmetric_q, CIFAR10_ASYMMETRIC};
use selc::selc::{EnsembleState, PredictionSnapshot};
use selc::turning_point::{read_loss_snapshots, write_loss_snapshots, LossSnapshot};
use selc::{Matrix2D, SelcError};

fn pixels(n: usize, d: usize) -> LabeledData {
    // multiples of 1/255 survive byte quantization exactly
    let data = (0..n * d).map(|i| ((i * 37) % 256) as f64 / 255.0).collect();
    let labels = (0..n).map(|i| i % 10).collect();
    LabeledData::new(Matrix2D::from_vec(n, d, data).unwrap(), labels, 10).unwrap()
}

fn write_pair(dir: &Path, data: &LabeledData, rows: usize, cols: usize) -> (std::path::PathBuf, std::path::PathBuf) {
    let img = dir.join("images.idx3-ubyte");
    let lab = dir.join("labels.idx1-ubyte");
    write_idx(data, rows, cols, &img, &lab).unwrap();
    (img, lab)
}

#[test]
fn idx_write_then_read_reproduces_tensors() {
    let dir = tempfile::tempdir().unwrap();
    let data = pixels(30, 28 * 28);
    let (img, lab) = write_pair(dir.path(), &data, 28, 28);
    let back = load_idx(&img, &lab).unwrap();
    assert_eq!(back.features.shape(), (30, 784));
    assert_eq!(back, data);
}

#[test]
fn idx_header_arithmetic() {
    let dir = tempfile::tempdir().unwrap();
    let data = pixels(7, 12);
    let (img, _) = write_pair(dir.path(), &data, 3, 4);
    let bytes = std::fs::read(&img).unwrap();
    assert_eq!(&bytes[..4], &[0, 0, 8, 3]);
    assert_eq!(u32::from_be_bytes(bytes[4..8].try_into().unwrap()), 7);
    assert_eq!(bytes.len(), 16 + 7 * 12);
}

fn expect_format_error(result: selc::Result<LabeledData>, file: &Path) -> u64 {
    match result {
        Err(SelcError::Format { path, offset, .. }) => {
            assert_eq!(path, file);
            offset
        }
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn truncated_idx_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = pixels(10, 16);
    let (img, lab) = write_pair(dir.path(), &data, 4, 4);
    let bytes = std::fs::read(&img).unwrap();
    std::fs::write(&img, &bytes[..bytes.len() - 5]).unwrap();
    let offset = expect_format_error(load_idx(&img, &lab), &img);
    assert_eq!(offset, (bytes.len() - 5) as u64);

    std::fs::write(&img, &bytes[..10]).unwrap();
    expect_format_error(load_idx(&img, &lab), &img);
}

#[test]
fn bad_magic_and_count_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let data = pixels(10, 16);
    let (img, lab) = write_pair(dir.path(), &data, 4, 4);
    let mut labels = std::fs::read(&lab).unwrap();

    let mut wrong = labels.clone();
    wrong[3] = 0x03;
    std::fs::write(&lab, &wrong).unwrap();
    assert_eq!(expect_format_error(load_idx(&img, &lab), &lab), 0);

    labels[7] = 9;
    labels.pop();
    std::fs::write(&lab, &labels).unwrap();
    expect_format_error(load_idx(&img, &lab), &lab);

    // the label file passed as the image file
    expect_format_error(load_idx(&lab, &lab), &lab);
}

#[test]
fn missing_idx_file_is_an_io_error() {
    let err = load_idx(Path::new("/no/such/images"), Path::new("/no/such/labels")).unwrap_err();
    assert!(matches!(err, SelcError::Io { .. }));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut state = EnsembleState::selc(&[0, 2, 1], 3, 0.9).unwrap();
    let probs = Matrix2D::from_rows(&[
        vec![0.1, 0.2, 0.7],
        vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
        vec![0.05, 0.9, 0.05],
    ])
    .unwrap();
    for _ in 0..7 {
        state.update(&PredictionSnapshot::new(probs.clone()).unwrap()).unwrap();
    }
    let path = dir.path().join("targets.ckpt");
    state.write_checkpoint(&path).unwrap();
    let back = EnsembleState::read_checkpoint(&path).unwrap();
    assert_eq!(back.epoch_k(), 7);
    for i in 0..3 {
        let a: Vec<u64> = state.target(i).iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = back.target(i).iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }
}

#[test]
fn transition_matrix_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let q = build_asymmetric_q(10, 0.4, &CIFAR10_ASYMMETRIC).unwrap();
    let path = dir.path().join("q.txt");
    q.write_file(&path).unwrap();
    let back = selc::noise::TransitionMatrix::read_file(&path).unwrap();
    assert_eq!(back.matrix(), q.matrix());
}

#[test]
fn loss_snapshot_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("losses.csv");
    let snaps: Vec<LossSnapshot> = (0..3)
        .map(|e| LossSnapshot::new(e, (0..6).map(|i| (i * (e + 1)) as f64 * 0.25).collect()).unwrap())
        .collect();
    write_loss_snapshots(&path, &snaps).unwrap();
    assert_eq!(read_loss_snapshots(&path).unwrap(), snaps);
}
