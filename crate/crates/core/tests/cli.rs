use std::path::Path;
use std::process::{Command, Output};

fn selc(args: &[&str], envs: &[(&str, &Path)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_selc"));
    cmd.args(args).env_remove("SELC_OUT_DIR").env_remove("SELC_THREADS");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

const BLOBS: &str = "n = 400\nd = 4\nclasses = 3\ncluster_std = 0.5\nseed = 11\ntest_n = 150\n";

const RUN: &str = r#"
output_dir = "out"
trials = [1, 2]
threads = 2

[dataset]
kind = "csv"
train = "blobs/train.csv"
test = "blobs/test.csv"

[noise]
kind = "symmetric"
eta = 0.3

[model]
hidden = [16]

[optimizer]
epochs = 14
milestones = [10]
batch_size = 32
lr = 0.05

[output]
loss_snapshots = true
confusion_every = 5

[[methods]]
kind = "ce"

[[methods]]
kind = "selc"
te = "auto"

[[methods]]
kind = "selc_plus"
te = 4
retrain_epochs = 5
"#;

fn files(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            out.extend(files(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

#[test]
fn end_to_end_run_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    std::fs::write(root.join("blobs.toml"), BLOBS).unwrap();
    let out = selc(&["make-blobs", root.join("blobs.toml").to_str().unwrap(), root.join("blobs").to_str().unwrap()], &[]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(root.join("blobs/train.csv").is_file());

    let config = root.join("run.toml");
    std::fs::write(&config, RUN).unwrap();
    let out = selc(&["run", config.to_str().unwrap()], &[]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let first = root.join("out");
    for f in ["summary.json", "config.toml", "ce/trial_1/epochs.csv", "ce/trial_2/metrics.csv",
              "selc_a0.9/trial_1/turning_point.csv", "selc_a0.9/trial_1/confusion_epoch_4.csv",
              "selc_a0.9/trial_1/confusion_epoch_13.csv", "selc_plus_a0.9/trial_2/losses.csv"] {
        assert!(first.join(f).is_file(), "missing {f}");
    }
    let epochs = std::fs::read_to_string(first.join("selc_plus_a0.9/trial_1/epochs.csv")).unwrap();
    assert!(epochs.starts_with("stage,epoch,lr,train_loss,"));
    assert_eq!(epochs.lines().filter(|l| l.starts_with("retrain,")).count(), 5);
    assert!(!epochs.contains('\r'));

    let second = root.join("again");
    let out = selc(&["run", config.to_str().unwrap()], &[("SELC_OUT_DIR", &second), ("SELC_THREADS", Path::new("1"))]);
    assert_eq!(code(&out), 0);
    let a = files(&first);
    let b = files(&second);
    assert_eq!(a.len(), b.len());
    for (fa, fb) in a.iter().zip(&b) {
        if fa.file_name().unwrap() == "config.toml" {
            continue;
        }
        assert_eq!(std::fs::read(fa).unwrap(), std::fs::read(fb).unwrap(), "{}", fa.display());
    }

    let out = selc(&["inspect", first.to_str().unwrap()], &[]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("selc_a0.9") && text.contains("correction_acc"), "{text}");

    let losses = first.join("ce/trial_1/losses.csv");
    let series = root.join("series.csv");
    let out = selc(&["detect-turning-point", losses.to_str().unwrap(), "--metric", "m3", "--series-out", series.to_str().unwrap()], &[]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("turning_point "));
    let header = std::fs::read_to_string(&series).unwrap();
    assert!(header.starts_with("epoch,m1,m2,m3\n"));
    assert_eq!(header.lines().count(), 15);
}

#[test]
fn config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = selc(&["run", dir.path().join("nope.toml").to_str().unwrap()], &[]);
    assert_eq!(code(&missing), 1);

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, RUN.replace("hidden", "hiden")).unwrap();
    assert_eq!(code(&selc(&["run", bad.to_str().unwrap()], &[])), 1);

    // csv files referenced by the config do not exist here
    let absent = dir.path().join("absent.toml");
    std::fs::write(&absent, RUN).unwrap();
    assert_eq!(code(&selc(&["run", absent.to_str().unwrap()], &[])), 1);

    assert_eq!(code(&selc(&["frobnicate"], &[])), 1);
    assert_eq!(code(&selc(&["--help"], &[])), 0);
}

#[test]
fn runtime_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&selc(&["inspect", dir.path().join("none").to_str().unwrap()], &[])), 2);
}
