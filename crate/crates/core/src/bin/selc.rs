use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::Value;

use selc::dataset::{generate_blobs, write_csv, BlobSpec};
use selc::experiment::run_config_file;
use selc::turning_point::{estimate_turning_point, read_loss_snapshots, Metric, MetricSeries};
use selc::{Result, SelcError};

#[derive(Parser)]
#[command(name = "selc", version, about = "Self-ensemble label correction experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every method and trial of an experiment config.
    Run { config: PathBuf },
    /// Estimate the turning point from an `epoch,sample_id,loss` CSV.
    DetectTurningPoint {
        losses: PathBuf,
        #[arg(long, value_enum, default_value = "m1")]
        metric: MetricArg,
        /// 3-epoch median smoothing before taking the peak.
        #[arg(long)]
        smooth: bool,
        /// Write the per-epoch metric series here.
        #[arg(long)]
        series_out: Option<PathBuf>,
    },
    /// Print the summary of a finished run directory.
    Inspect { run_dir: PathBuf },
    /// Generate a blob dataset from a TOML spec into `<out>/train.csv` and `<out>/test.csv`.
    MakeBlobs { spec: PathBuf, out: PathBuf },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum MetricArg {
    M1,
    M2,
    M3,
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::M1 => Metric::M1,
            MetricArg::M2 => Metric::M2,
            MetricArg::M3 => Metric::M3,
        }
    }
}

fn run(config: &Path) -> Result<()> {
    let (cfg, records) = run_config_file(config)?;
    for m in &records.methods {
        let done: Vec<f64> = m.completed().map(|t| t.final_test_acc()).collect();
        let failed = m.trials.len() - done.len();
        let (mean, std) = selc::experiment::mean_std(&done);
        println!(
            "{:<24} test_acc {} ± {} ({} trials{})",
            m.label,
            mean.map_or("-".into(), |v| format!("{v:.4}")),
            std.map_or("-".into(), |v| format!("{v:.4}")),
            done.len(),
            if failed > 0 { format!(", {failed} failed") } else { String::new() }
        );
    }
    println!("results in {}", cfg.output_dir.display());
    Ok(())
}

fn detect(losses: &Path, metric: Metric, smooth: bool, series_out: Option<&Path>) -> Result<()> {
    let snapshots = read_loss_snapshots(losses)?;
    let series = MetricSeries::from_snapshots(&snapshots)?;
    if let Some(out) = series_out {
        series.write_csv(out)?;
    }
    println!("epoch\tm1\tm2\tm3");
    for i in 0..series.len() {
        println!(
            "{}\t{:.6}\t{:.6}\t{:.6}",
            series.epochs[i], series.m1[i], series.m2[i], series.m3[i]
        );
    }
    println!("turning_point {}", estimate_turning_point(&series, metric, smooth)?);
    Ok(())
}

fn inspect(run_dir: &Path) -> Result<()> {
    let path = run_dir.join("summary.json");
    let text = std::fs::read_to_string(&path).map_err(|e| SelcError::Io {
        path: path.clone(),
        source: e,
    })?;
    let summary: Value = serde_json::from_str(&text).map_err(|e| SelcError::Format {
        path: path.clone(),
        offset: 0,
        detail: e.to_string(),
    })?;
    if summary["empty"] == Value::Bool(true) {
        println!("no trials");
        return Ok(());
    }
    println!("trials: {}", summary["trials"]);
    let fmt = |v: &Value| match v {
        Value::Null => "-".to_string(),
        v => v.to_string(),
    };
    let empty = Vec::new();
    for m in summary["methods"].as_array().unwrap_or(&empty) {
        let mut line = format!(
            "{:<24} test_acc {} ± {}",
            m["label"].as_str().unwrap_or("?"),
            fmt(&m["test_acc"]["mean"]),
            fmt(&m["test_acc"]["stddev"])
        );
        if !m["correction_acc"].is_null() {
            line += &format!(
                "  correction_acc {} ± {}",
                fmt(&m["correction_acc"]["mean"]),
                fmt(&m["correction_acc"]["stddev"])
            );
        }
        line += &format!("  memorized {}", fmt(&m["memorized_frac"]["mean"]));
        let errors = m["errors"].as_array().map_or(0, Vec::len);
        if errors > 0 {
            line += &format!("  ({errors} failed)");
        }
        println!("{line}");
    }
    Ok(())
}

fn make_blobs(spec: &Path, out: &Path) -> Result<()> {
    let text = std::fs::read_to_string(spec).map_err(|e| SelcError::Io {
        path: spec.to_path_buf(),
        source: e,
    })?;
    let spec: BlobSpec = toml::from_str(&text).map_err(|e| SelcError::Config(e.to_string()))?;
    let data = generate_blobs(&spec)?;
    std::fs::create_dir_all(out).map_err(|e| SelcError::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    write_csv(&data.train, &out.join("train.csv"))?;
    write_csv(&data.test, &out.join("test.csv"))?;
    println!("wrote {} and {}", out.join("train.csv").display(), out.join("test.csv").display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match &cli.command {
        Command::Run { config } => run(config),
        Command::DetectTurningPoint {
            losses,
            metric,
            smooth,
            series_out,
        } => detect(losses, (*metric).into(), *smooth, series_out.as_deref()),
        Command::Inspect { run_dir } => inspect(run_dir),
        Command::MakeBlobs { spec, out } => make_blobs(spec, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config_error() { 1 } else { 2 })
        }
    }
}
