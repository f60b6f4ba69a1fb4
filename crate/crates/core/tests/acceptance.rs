//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::path::Path;
use std::time::{Duration, Instant};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use selc::config::{ExperimentConfig, MethodKind, MethodSpec, StartEpoch};
use selc::experiment::{emit_results, mean_std, run_experiment, RunRecords};
use selc::loss::{one_hot, soft_ce, softmax};
use selc::mlp::{Activation, MlpModel};
use selc::noise::{build_symmetric_q, empirical_noise_rate, inject_noise, SymmetricConvention};
use selc::rng::{stream_rng, Stream};
use selc::selc::{
    closed_form_target, ensemble_prediction, selc_loss, EnsembleState, PredictionSnapshot,
};
use selc::turning_point::{
    epoch_metrics, estimate_turning_point, fit_gmm2, fit_kmeans2, metric_m1, metric_m2,
    metric_m3, Metric, MetricSeries,
};
use selc::Matrix2D;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn random_simplex(rng: &mut impl Rng, c: usize) -> Vec<f64> {
    // exponential spacings give a uniform draw from the simplex
    let e: Vec<f64> = (0..c).map(|_| -(1.0 - rng.random::<f64>()).ln() + 1e-12).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn single_row(p: &[f64]) -> PredictionSnapshot {
    PredictionSnapshot::new(Matrix2D::from_rows(&[p.to_vec()]).unwrap()).unwrap()
}

fn closed_form_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = stream_rng(1, Stream::Synthetic);
    let mut worst = 0.0f64;
    for case in 0..1000 {
        let c = rng.random_range(2..=10);
        let alpha = match case % 10 {
            0 => 0.0,
            1 => 0.99,
            _ => rng.random_range(0.0..1.0),
        };
        let len = rng.random_range(0..=200);
        let label = rng.random_range(0..c);
        let history: Vec<Vec<f64>> = (0..len).map(|_| random_simplex(&mut rng, c)).collect();
        let mut state = EnsembleState::selc(&[label], c, alpha).unwrap();
        for p in &history {
            state.update(&single_row(p)).unwrap();
        }
        let closed = closed_form_target(one_hot(&[label], c).row(0), &history, alpha);
        for (a, b) in state.target(0).iter().zip(&closed) {
            worst = worst.max((a - b).abs());
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= 1e-12 && elapsed < Duration::from_secs(5),
        format!("max |iterative - closed form| = {worst:.3e}, {:.2} s", elapsed.as_secs_f64()),
    )
}

fn loss_decomposition() -> Outcome {
    let mut rng = stream_rng(2, Stream::Synthetic);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let c = rng.random_range(2..=10);
        let alpha = rng.random_range(0.0..1.0);
        let len = rng.random_range(0..=100);
        let label = rng.random_range(0..c);
        let history: Vec<Vec<f64>> = (0..len).map(|_| random_simplex(&mut rng, c)).collect();
        let mut state = EnsembleState::selc(&[label], c, alpha).unwrap();
        for p in &history {
            state.update(&single_row(p)).unwrap();
        }
        let p = random_simplex(&mut rng, c);
        let loss = selc_loss(&state, &single_row(&p)).unwrap().mean;
        let label_term = alpha.powi(len as i32) * soft_ce(one_hot(&[label], c).row(0), &p);
        let ensemble_term = soft_ce(&ensemble_prediction(&history, alpha), &p);
        worst = worst.max((loss - label_term - ensemble_term).abs());
    }
    outcome(worst <= 1e-10, format!("max |loss - decomposition| = {worst:.3e}"))
}

fn batch_loss(model: &MlpModel, x: &Matrix2D, targets: &Matrix2D) -> f64 {
    let probs = softmax(&model.forward(x).unwrap());
    (0..x.rows()).map(|r| soft_ce(targets.row(r), probs.row(r))).sum::<f64>() / x.rows() as f64
}

fn gradient_check() -> Outcome {
    let mut rng = stream_rng(3, Stream::Synthetic);
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    let mut models = 0;
    let mut attempt = 0u64;
    while models < 20 {
        attempt += 1;
        let d = rng.random_range(2..=6);
        let mut dims = vec![d];
        for _ in 0..rng.random_range(1..=2) {
            dims.push(rng.random_range(3..=12));
        }
        dims.push(rng.random_range(2..=5));
        let activation = if models % 2 == 0 { Activation::Tanh } else { Activation::Relu };
        let mut model = MlpModel::new(&dims, activation, attempt).unwrap();
        if model.num_params() > 500 {
            continue;
        }
        models += 1;
        let b = rng.random_range(1..=5);
        let x = Matrix2D::from_vec(b, d, (0..b * d).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let c = *dims.last().unwrap();
        let rows: Vec<Vec<f64>> = (0..b).map(|_| random_simplex(&mut rng, c)).collect();
        let targets = Matrix2D::from_rows(&rows).unwrap();

        let grads = model.backward(&x, &targets).unwrap();
        let analytic: Vec<f64> = grads.slices().concat();
        let mut idx = 0;
        for s in 0..model.param_slices().len() {
            for j in 0..model.param_slices()[s].len() {
                let orig = model.param_slices()[s][j];
                model.param_slices_mut()[s][j] = orig + h;
                let plus = batch_loss(&model, &x, &targets);
                model.param_slices_mut()[s][j] = orig - h;
                let minus = batch_loss(&model, &x, &targets);
                model.param_slices_mut()[s][j] = orig;
                let numeric = (plus - minus) / (2.0 * h);
                let a = analytic[idx];
                // entries that are zero up to finite-difference noise have no meaningful ratio
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max(rel);
                idx += 1;
                checked += 1;
            }
        }
    }
    outcome(worst < 1e-4, format!("{checked} entries over 20 models, max relative error {worst:.3e}"))
}

fn noise_calibration() -> Outcome {
    let (n, c, eta) = (100_000usize, 10usize, 0.4);
    let truth: Vec<usize> = (0..n).map(|i| i % c).collect();
    let q = build_symmetric_q(c, eta, SymmetricConvention::IncludeTrueClass).unwrap();
    let noisy = inject_noise(&truth, &q, 2024).unwrap();
    let rate = empirical_noise_rate(&noisy, &truth).unwrap();
    let band = 3.0 * (0.36f64 * 0.64 / n as f64).sqrt();
    let rate_ok = (rate - 0.36).abs() <= band;

    let chi2 = ChiSquared::new((c - 1) as f64).unwrap();
    let mut min_p = 1.0f64;
    for i in 0..c {
        let mut counts = vec![0u64; c];
        let mut total = 0u64;
        for (&t, &y) in truth.iter().zip(&noisy) {
            if t == i {
                counts[y] += 1;
                total += 1;
            }
        }
        let stat: f64 = (0..c)
            .map(|j| {
                let expected = q.row(i)[j] * total as f64;
                (counts[j] as f64 - expected).powi(2) / expected
            })
            .sum();
        min_p = min_p.min(1.0 - chi2.cdf(stat));
    }
    outcome(
        rate_ok && min_p > 0.01,
        format!("flip rate {rate:.5} (band 0.36 ± {band:.5}), smallest row chi-square p = {min_p:.4}"),
    )
}

fn two_mode_sample(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = stream_rng(seed, Stream::Synthetic);
    let low = Normal::new(0.1, 0.05).unwrap();
    let high = Normal::new(0.7, 0.05).unwrap();
    (0..n)
        .map(|i| if i % 2 == 0 { low.sample(&mut rng) } else { high.sample(&mut rng) })
        .collect()
}

fn quadrature_kl(mu1: f64, var1: f64, mu2: f64, var2: f64) -> f64 {
    let s1 = var1.sqrt();
    let log_pdf = |x: f64, m: f64, v: f64| -0.5 * (2.0 * std::f64::consts::PI * v).ln() - (x - m).powi(2) / (2.0 * v);
    let (a, b) = (mu1 - 12.0 * s1, mu1 + 12.0 * s1);
    let steps = 20_000;
    let w = (b - a) / steps as f64;
    // composite Simpson
    let f = |x: f64| {
        let lp = log_pdf(x, mu1, var1);
        lp.exp() * (lp - log_pdf(x, mu2, var2))
    };
    let mut sum = f(a) + f(b);
    for k in 1..steps {
        sum += f(a + k as f64 * w) * if k % 2 == 1 { 4.0 } else { 2.0 };
    }
    sum * w / 3.0
}

fn brute_force_split(values: &[f64]) -> Vec<u8> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let sse = |s: &[f64]| {
        let m = s.iter().sum::<f64>() / s.len() as f64;
        s.iter().map(|v| (v - m).powi(2)).sum::<f64>()
    };
    let k = (1..sorted.len())
        .min_by(|&a, &b| {
            let ca = sse(&sorted[..a]) + sse(&sorted[a..]);
            let cb = sse(&sorted[..b]) + sse(&sorted[b..]);
            ca.total_cmp(&cb)
        })
        .unwrap();
    let threshold = sorted[k];
    values.iter().map(|&v| u8::from(v >= threshold)).collect()
}

fn mixture_recovery() -> Outcome {
    let values = two_mode_sample(5000, 5);
    let gmm = fit_gmm2(&values).unwrap();
    let means_ok = (gmm.means[0] - 0.1).abs() <= 0.02 && (gmm.means[1] - 0.7).abs() <= 0.02;
    let m1 = metric_m1(&gmm);
    let m2 = metric_m2(&gmm);
    let kl = quadrature_kl(gmm.means[0], gmm.variances[0], gmm.means[1], gmm.variances[1]);
    let kmeans = fit_kmeans2(&values).unwrap();
    let m3 = metric_m3(&kmeans);

    let mut exact = true;
    for (n, seed) in [(500, 50), (200, 51), (37, 52)] {
        let small = two_mode_sample(n, seed);
        exact &= fit_kmeans2(&small).unwrap().assignments == brute_force_split(&small);
    }
    outcome(
        means_ok && (m1 - 0.6).abs() <= 0.05 && (m2 - kl).abs() <= 1e-3 && (m3 - 0.6).abs() <= 0.05 && exact,
        format!(
            "means ({:.4}, {:.4}), M1 {m1:.4}, M2 {m2:.3} vs quadrature {kl:.3}, M3 {m3:.4}, brute-force split match {exact}",
            gmm.means[0], gmm.means[1]
        ),
    )
}

fn turning_point_detection() -> Outcome {
    let start = Instant::now();
    let n = 2000;
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut rng = stream_rng(6, Stream::Synthetic);
    // common random numbers: every epoch reuses the same per-sample noise
    let z: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
    let mut series = MetricSeries::default();
    for epoch in 0..80 {
        let gap = 0.2 + 1.3 * (1.0 - (epoch as f64 - 37.0).abs() / 43.0);
        let losses: Vec<f64> = (0..n)
            .map(|i| {
                let center = if i % 2 == 0 { 0.5 } else { 0.5 + gap };
                center + 0.15 * z[i]
            })
            .collect();
        series.push(epoch, epoch_metrics(&losses).unwrap());
    }
    let m1 = estimate_turning_point(&series, Metric::M1, false).unwrap();
    let m2 = estimate_turning_point(&series, Metric::M2, false).unwrap();
    let m3 = estimate_turning_point(&series, Metric::M3, false).unwrap();
    let elapsed = start.elapsed();
    outcome(
        m1 == 37 && m3 == 37 && m2.abs_diff(37) <= 2 && elapsed < Duration::from_secs(30),
        format!("M1 {m1}, M2 {m2}, M3 {m3}, {:.2} s", elapsed.as_secs_f64()),
    )
}

fn selc(alpha: f64) -> MethodSpec {
    MethodSpec::new(MethodKind::Selc { alpha, te: StartEpoch::AUTO })
}

fn test_accs(records: &RunRecords, label: &str) -> Vec<f64> {
    records.method(label).unwrap().completed().map(|t| t.final_test_acc()).collect()
}

fn mean_of(records: &RunRecords, label: &str, f: impl Fn(&selc::experiment::TrialRecord) -> f64) -> f64 {
    let values: Vec<f64> = records.method(label).unwrap().completed().map(f).collect();
    assert_eq!(values.len(), 3, "{label}: not every trial completed");
    mean_std(&values).0.unwrap()
}

fn desk_benchmark(cfg: &ExperimentConfig) -> (Outcome, RunRecords) {
    let start = Instant::now();
    let records = run_experiment(cfg).unwrap();
    let elapsed = start.elapsed();
    let acc = |l: &str| mean_of(&records, l, |t| t.final_test_acc());
    let corr = |l: &str| mean_of(&records, l, |t| t.final_correction_acc().unwrap());
    let mem = |l: &str| mean_of(&records, l, |t| t.final_memorized_frac());
    let (ce, sc, eo) = ("ce", "selc_a0.9", "ensemble_only_a0.9");
    let start_acc = mean_std(
        &records.method(sc).unwrap().completed().map(|t| 1.0 - t.noise_rate).collect::<Vec<_>>(),
    )
    .0
    .unwrap();

    let a = acc(sc) - acc(ce) >= 0.05;
    let b = corr(sc) >= 0.85;
    let c = mem(sc) < mem(ce);
    let d = corr(sc) >= corr(eo);
    let pass = a && b && c && d && elapsed < Duration::from_secs(300);
    let detail = format!(
        "test acc selc {:.4} vs ce {:.4} (a {a}); correction acc {:.4} from {:.4} (b {b}); memorized selc {:.4} vs ce {:.4} (c {c}); correction acc option II {:.4} vs option I {:.4} (d {d}); {:.1} s on one thread",
        acc(sc), acc(ce), corr(sc), start_acc, mem(sc), mem(ce), corr(sc), corr(eo), elapsed.as_secs_f64()
    );
    (outcome(pass, detail), records)
}

fn alpha_sensitivity(base: &ExperimentConfig, desk: &RunRecords) -> Outcome {
    let mut cfg = base.clone();
    cfg.methods = vec![selc(0.85), selc(0.95)];
    let sweep = run_experiment(&cfg).unwrap();
    let means = [
        mean_of(&sweep, "selc_a0.85", |t| t.final_test_acc()),
        mean_of(desk, "selc_a0.9", |t| t.final_test_acc()),
        mean_of(&sweep, "selc_a0.95", |t| t.final_test_acc()),
    ];
    let spread = means.iter().cloned().fold(f64::MIN, f64::max) - means.iter().cloned().fold(f64::MAX, f64::min);
    outcome(
        spread <= 0.03,
        format!("mean test acc at α 0.85/0.9/0.95 = {:.4}/{:.4}/{:.4}, spread {:.2} points", means[0], means[1], means[2], spread * 100.0),
    )
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            out.extend(tree(&p).into_iter().map(|(name, bytes)| {
                (format!("{}/{name}", p.file_name().unwrap().to_string_lossy()), bytes)
            }));
        } else {
            out.push((p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()));
        }
    }
    out.sort();
    out
}

fn determinism(cfg: &ExperimentConfig, first: &RunRecords) -> Outcome {
    let mut again = cfg.clone();
    again.threads = 3;
    let second = run_experiment(&again).unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    emit_results(first, a.path()).unwrap();
    emit_results(&second, b.path()).unwrap();
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    let csvs = ta.iter().filter(|(n, _)| n.ends_with(".csv")).count();
    let differing: Vec<&str> = ta
        .iter()
        .zip(&tb)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    outcome(
        ta.len() == tb.len() && differing.is_empty(),
        format!("{} files ({csvs} CSV) compared across a 1-thread and a 3-thread run, {} differ", ta.len(), differing.len()),
    )
}

fn selc_plus(base: &ExperimentConfig, desk: &RunRecords) -> Outcome {
    let mut cfg = base.clone();
    cfg.methods = vec![MethodSpec::new(MethodKind::SelcPlus {
        alpha: 0.9,
        te: StartEpoch::AUTO,
        mixup_alpha: 1.0,
        retrain_epochs: None,
        harden: false,
    })];
    let records = match run_experiment(&cfg) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("pipeline failed: {e}")),
    };
    let label = cfg.methods[0].label();
    let plus = test_accs(&records, &label);
    if plus.len() != 3 {
        return outcome(false, format!("{} of 3 trials completed", plus.len()));
    }
    let plus = mean_std(&plus).0.unwrap();
    let base_acc = mean_of(desk, "selc_a0.9", |t| t.final_test_acc());
    if plus < base_acc {
        eprintln!("warning: SELC+ mean test acc {plus:.4} below SELC {base_acc:.4}");
    }
    outcome(true, format!("SELC+ mean test acc {plus:.4} vs SELC {base_acc:.4}"))
}

fn main() {
    let mut results: Vec<(&str, Outcome)> = vec![
        ("1 closed-form equivalence", closed_form_equivalence()),
        ("2 loss decomposition", loss_decomposition()),
        ("3 gradient correctness", gradient_check()),
        ("4 noise calibration", noise_calibration()),
        ("5 mixture recovery", mixture_recovery()),
        ("6 turning-point detection", turning_point_detection()),
    ];

    let mut cfg = common::desk_config(vec![
        MethodSpec::new(MethodKind::Ce),
        selc(0.9),
        MethodSpec::new(MethodKind::EnsembleOnly { alpha: 0.9, te: StartEpoch::AUTO }),
    ]);
    cfg.threads = 1;
    let (desk, records) = desk_benchmark(&cfg);
    results.push(("7 desk benchmark", desk));
    let mut parallel = cfg.clone();
    parallel.threads = 3;
    results.push(("8 alpha sensitivity", alpha_sensitivity(&parallel, &records)));
    results.push(("9 determinism", determinism(&cfg, &records)));
    results.push(("10 SELC+ pipeline", selc_plus(&parallel, &records)));

    let mut failed = 0;
    for (name, o) in &results {
        println!("{} criterion {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
