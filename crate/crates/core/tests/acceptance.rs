//! Acceptance criteria, one PASS/FAIL line each. Runs as a plain binary so
//! the lines are always printed; exits nonzero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use cpbench_core::calibration::{calibrate_marginal, finite_sample_quantile, CalibrationSet, Side};
use cpbench_core::conftr::{compare, conftr_step, ComparisonConfig, Regularization, SmoothCpConfig, TinyClassifier};
use cpbench_core::harness::{run_protocol, CalibrationMode, Protocol, IN_DISTRIBUTION};
use cpbench_core::io::{encode_cpl1, load_records, save_records};
use cpbench_core::metrics::{coverage, inefficiency};
use cpbench_core::prediction::{predict_batch, predict_from_scores};
use cpbench_core::rng::stream;
use cpbench_core::scores::{score_matrix, softmax, ModelFamily};
use cpbench_core::synthetic::{sample_features, sample_records, split, LabelPrior, OracleWorld, ShiftKind, ShiftSpec};
use cpbench_core::{LogitRecordSet, RecordMetadata, ScoreConfig};
use rand::Rng;

type Verdict = (bool, String);

fn methods() -> [ScoreConfig; 4] {
    [
        ScoreConfig::Thr,
        ScoreConfig::Aps,
        ScoreConfig::raps_preset(ModelFamily::Conv),
        ScoreConfig::raps_preset(ModelFamily::Transformer),
    ]
}

fn label(cfg: &ScoreConfig) -> String {
    match cfg {
        ScoreConfig::Raps { lambda, k_reg } => format!("RAPS({lambda},{k_reg})"),
        other => other.name().to_string(),
    }
}

/// Fresh exchangeable draws per trial: K=10, 500 calibration, 500 test.
fn marginal_coverage() -> Verdict {
    let world = OracleWorld::generate(10, 8, 1.0, 1.0, 2024).unwrap();
    let prior = LabelPrior::uniform(10);
    let alphas = [0.1, 0.05];
    let trials = 1000u64;
    let mut ok = true;
    let mut notes = Vec::new();
    for cfg in &methods()[..3] {
        let start = Instant::now();
        let mut sums = [0.0; 2];
        for t in 0..trials {
            let records = sample_records(&world.reseeded(t), &prior, 1000, &ShiftSpec::NONE).unwrap();
            let (cal, test) = split(&records, 0.5, t).unwrap();
            let cal = CalibrationSet::from_records(&cal, *cfg).unwrap();
            let scores = score_matrix(&test, cfg).unwrap();
            for (a, &alpha) in alphas.iter().enumerate() {
                let sets = predict_from_scores(&scores, &calibrate_marginal(&cal, alpha).unwrap()).unwrap();
                sums[a] += coverage(&sets, test.labels()).unwrap();
            }
        }
        let secs = start.elapsed().as_secs_f64();
        ok &= secs <= 120.0;
        for (a, &alpha) in alphas.iter().enumerate() {
            let mean = sums[a] / trials as f64;
            let (lo, hi) = (1.0 - alpha - 0.005, 1.0 - alpha + 1.0 / 501.0 + 0.005);
            ok &= (lo..=hi).contains(&mean);
            notes.push(format!("{} a={alpha}: {mean:.4}", label(cfg)));
        }
        notes.push(format!("{} took {secs:.1}s", label(cfg)));
    }
    (ok, notes.join(", "))
}

fn in_distribution_pattern() -> Verdict {
    let world = OracleWorld::generate(10, 8, 1.0, 1.0, 7).unwrap();
    let source = sample_records(&world, &LabelPrior::uniform(10), 10_000, &ShiftSpec::NONE).unwrap();
    let protocol = Protocol {
        trials: 10,
        methods: methods().to_vec(),
        alphas: vec![0.1],
        ..Default::default()
    };
    let report = run_protocol(&source, &[], &protocol).unwrap();
    let mut ok = true;
    let mut notes = Vec::new();
    for (cfg, cell) in methods().iter().zip(report.cells.iter().filter(|c| c.dataset == IN_DISTRIBUTION)) {
        let c = cell.metrics.coverage.mean;
        ok &= (c - 0.9).abs() <= 0.01;
        notes.push(format!("{}: {c:.4}", label(cfg)));
    }
    (ok, notes.join(", "))
}

struct Curve {
    coverage: Vec<Vec<f64>>,
    inefficiency: Vec<Vec<f64>>,
}

/// Calibrate in distribution, evaluate the same frozen thresholds at
/// severities 0..=5 on fresh draws; `[severity][method]` means.
fn severity_curve(kind: ShiftKind, trials: u64) -> Curve {
    let world = OracleWorld::generate(10, 8, 1.0, 1.0, 11).unwrap();
    let prior = LabelPrior::uniform(10);
    let m = methods().len();
    let mut curve = Curve {
        coverage: vec![vec![0.0; m]; 6],
        inefficiency: vec![vec![0.0; m]; 6],
    };
    for t in 0..trials {
        let source = sample_records(&world.reseeded(t), &prior, 1000, &ShiftSpec::NONE).unwrap();
        let (cal, _) = split(&source, 0.5, t).unwrap();
        let models: Vec<_> = methods()
            .iter()
            .map(|cfg| calibrate_marginal(&CalibrationSet::from_records(&cal, *cfg).unwrap(), 0.1).unwrap())
            .collect();
        for sev in 0..6 {
            let spec = ShiftSpec::new(kind, sev as f64).unwrap();
            let target = sample_records(&world.reseeded(10_000 + t), &prior, 1000, &spec).unwrap();
            for (i, model) in models.iter().enumerate() {
                let sets = predict_batch(&target, model).unwrap();
                curve.coverage[sev][i] += coverage(&sets, target.labels()).unwrap() / trials as f64;
                curve.inefficiency[sev][i] += inefficiency(&sets) / trials as f64;
            }
        }
    }
    curve
}

fn shift_degradation(drift: &Curve) -> Verdict {
    let mut ok = true;
    let mut notes = Vec::new();
    for (i, cfg) in methods().iter().enumerate() {
        for sev in 2..6 {
            ok &= drift.coverage[sev][i] < 0.9 - 0.02;
            ok &= drift.inefficiency[sev][i] > drift.inefficiency[0][i];
        }
        let cov: Vec<String> = (0..6).map(|s| format!("{:.3}", drift.coverage[s][i])).collect();
        let size: Vec<String> = (0..6).map(|s| format!("{:.2}", drift.inefficiency[s][i])).collect();
        notes.push(format!("{} cov [{}] size [{}]", label(cfg), cov.join(" "), size.join(" ")));
    }
    (ok, notes.join("; "))
}

fn severity_monotonicity(curves: &[(&str, &Curve)]) -> Verdict {
    let mut ok = true;
    let mut notes = Vec::new();
    for (name, curve) in curves {
        for (i, cfg) in methods().iter().enumerate() {
            let rises: Vec<f64> = (1..6)
                .map(|s| curve.coverage[s][i] - curve.coverage[s - 1][i])
                .filter(|&d| d > 0.0)
                .collect();
            ok &= rises.len() <= 1 && rises.iter().all(|&d| d <= 0.005);
            notes.push(format!("{name}/{}: {} inversions", label(cfg), rises.len()));
        }
    }
    (ok, notes.join(", "))
}

/// Zipf(1.5) over 100 classes; each seed is one 10-trial protocol run.
fn long_tail_run(seed: u64) -> (cpbench_core::metrics::AggregateMetrics, cpbench_core::metrics::AggregateMetrics) {
    let world = OracleWorld::generate(100, 16, 1.0, 1.0, seed).unwrap();
    let prior = LabelPrior::zipf(100, 1.5).unwrap();
    let source = sample_records(&world, &prior, 20_000, &ShiftSpec::NONE).unwrap();
    let protocol = Protocol {
        trials: 10,
        seed: seed * 1000,
        methods: vec![ScoreConfig::Thr],
        alphas: vec![0.1],
        modes: vec![CalibrationMode::Marginal, CalibrationMode::ClassBalanced],
        ..Default::default()
    };
    let mut report = run_protocol(&source, &[], &protocol).unwrap();
    let balanced = report.cells.pop().unwrap();
    let marginal = report.cells.pop().unwrap();
    assert_eq!((marginal.mode, balanced.mode), (CalibrationMode::Marginal, CalibrationMode::ClassBalanced));
    (marginal.metrics, balanced.metrics)
}

fn long_tail_violations(runs: &[(cpbench_core::metrics::AggregateMetrics, cpbench_core::metrics::AggregateMetrics)]) -> Verdict {
    let marginal = &runs[0].0;
    let cov = marginal.coverage.mean;
    let frac = marginal.violated_fraction.mean;
    (
        (cov - 0.9).abs() <= 0.01 && frac >= 0.3,
        format!(
            "THR marginal coverage {cov:.4}, violated {:.1} classes ({:.1}% of evaluated)",
            marginal.violated_classes.mean,
            100.0 * frac
        ),
    )
}

fn class_balanced_improvement(runs: &[(cpbench_core::metrics::AggregateMetrics, cpbench_core::metrics::AggregateMetrics)]) -> Verdict {
    let wins = runs
        .iter()
        .filter(|(m, b)| b.macro_coverage.mean > m.macro_coverage.mean && b.violated_classes.mean < m.violated_classes.mean)
        .count();
    let (m, b) = &runs[0];
    (
        wins >= 9,
        format!(
            "{wins}/{} seeds; seed 0 macro {:.3} -> {:.3}, violated {:.1} -> {:.1}",
            runs.len(),
            m.macro_coverage.mean,
            b.macro_coverage.mean,
            m.violated_classes.mean,
            b.violated_classes.mean
        ),
    )
}

fn raps_inside_aps() -> Verdict {
    let mut rng = stream(5, "acceptance/raps-aps");
    let mut checked = 0usize;
    for _ in 0..10_000 {
        let k = rng.random_range(2..=100);
        let scale = rng.random_range(0.1..10.0);
        let z: Vec<f64> = (0..k).map(|_| rng.random_range(-scale..scale)).collect();
        let p = softmax(&z).unwrap();
        let raps_cfg = ScoreConfig::Raps {
            lambda: rng.random_range(0.0..1.0),
            k_reg: rng.random_range(1..=k),
        };
        let tau = rng.random_range(0.0..1.5);
        let aps = ScoreConfig::Aps.score_row(&p);
        let raps = raps_cfg.score_row(&p);
        for c in 0..k {
            if raps[c] < tau && aps[c] >= tau {
                return (false, format!("class {c}: raps {} aps {} tau {tau}", raps[c], aps[c]));
            }
            checked += 1;
        }
    }
    (true, format!("10000 examples, {checked} class memberships"))
}

fn conftr_gradients() -> Verdict {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let cfg = SmoothCpConfig {
            alpha: 0.2,
            temperature: 0.3,
            size_weight: 0.5,
            kappa: (seed % 2) as u8,
            dispersion: if seed < 10 { 0.1 } else { 20.0 },
            regularization: if seed % 3 == 0 { Regularization::Quadratic } else { Regularization::Entropic },
            ..Default::default()
        };
        let world = OracleWorld::generate(3, 4, 1.0, 1.0, seed).unwrap();
        let data = sample_features(&world, &LabelPrior::uniform(3), 24, &ShiftSpec::NONE).unwrap();
        let mut model = TinyClassifier::new(&[4, 6, 3], seed).unwrap();
        let (cal, pred): (Vec<usize>, Vec<usize>) = ((0..12).collect(), (12..24).collect());
        let analytic = conftr_step(&model, &data, &cal, &pred, &cfg).unwrap().grad;
        let h = 1e-6;
        for j in 0..model.num_params() {
            let orig = model.params()[j];
            model.params_mut()[j] = orig + h;
            let up = conftr_step(&model, &data, &cal, &pred, &cfg).unwrap().loss;
            model.params_mut()[j] = orig - h;
            let down = conftr_step(&model, &data, &cal, &pred, &cfg).unwrap().loss;
            model.params_mut()[j] = orig;
            let fd = (up - down) / (2.0 * h);
            let err = (fd - analytic[j]).abs();
            let scale = fd.abs().max(analytic[j].abs());
            // relative error, with an absolute floor for near-zero gradients
            worst = worst.max(if err <= 1e-6 { 0.0 } else { err / scale });
        }
    }
    let secs = start.elapsed().as_secs_f64();
    (
        worst < 1e-4 && secs <= 60.0,
        format!("20 instances, worst relative error {worst:.2e}, {secs:.1}s"),
    )
}

fn conftr_efficiency() -> Verdict {
    let cfg = ComparisonConfig::default();
    let reports: Vec<_> = (0..10).map(|seed| compare(&cfg, seed).unwrap().report).collect();
    let wins = reports.iter().filter(|r| r.conftr.inefficiency <= r.baseline.inefficiency).count();
    let alpha = cfg.alpha;
    let n_cal = cfg.task.n_cal as f64;
    let n_test = cfg.task.n_test as f64;
    // three standard errors of a 10-seed mean of per-seed coverage
    let tol = 3.0 * (alpha * (1.0 - alpha) * (1.0 / n_cal + 1.0 / n_test) / reports.len() as f64).sqrt();
    let (lo, hi) = (1.0 - alpha - tol, 1.0 - alpha + 1.0 / (n_cal + 1.0) + tol);
    let mean = |f: fn(&cpbench_core::conftr::ComparisonReport) -> f64| reports.iter().map(f).sum::<f64>() / reports.len() as f64;
    let (cb, cc) = (mean(|r| r.baseline.coverage), mean(|r| r.conftr.coverage));
    let (sb, sc) = (mean(|r| r.baseline.inefficiency), mean(|r| r.conftr.inefficiency));
    (
        wins >= 8 && (lo..=hi).contains(&cb) && (lo..=hi).contains(&cc),
        format!(
            "{wins}/10 seeds smaller; size {sb:.3} -> {sc:.3}; coverage {cb:.4} / {cc:.4} within [{lo:.4}, {hi:.4}]"
        ),
    )
}

/// The `i`-th order statistic is picked by scanning the sorted scores for
/// the first (upper) or last (lower) rank whose fraction reaches the level,
/// with the same 1e-9 slack as the library's integer snapping.
fn brute_force_quantile(scores: &[f64], level: f64, side: Side) -> f64 {
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let x = level * n as f64;
    let slack = 1e-9 * x.round().abs().max(1.0);
    match side {
        Side::Upper => (1..=n).find(|&i| i as f64 >= x - slack).map_or(f64::INFINITY, |i| sorted[i - 1]),
        Side::Lower => (1..=n).rev().find(|&i| i as f64 <= x + slack).map_or(f64::NEG_INFINITY, |i| sorted[i - 1]),
    }
}

fn quantile_oracle() -> Verdict {
    let mut rng = stream(9, "acceptance/quantile");
    for case in 0..100_000 {
        let n = rng.random_range(1..=200);
        let discrete = rng.random_bool(0.3);
        let scores: Vec<f64> = (0..n)
            .map(|_| if discrete { rng.random_range(0..5) as f64 / 4.0 } else { rng.random() })
            .collect();
        let alpha: f64 = rng.random_range(0.001..0.999);
        let (level, side) = match rng.random_range(0..3) {
            0 => (alpha * (1.0 + 1.0 / n as f64), Side::Lower),
            1 => ((1.0 - alpha) * (1.0 + 1.0 / n as f64), Side::Upper),
            _ => (rng.random_range(0.0..1.0), if rng.random_bool(0.5) { Side::Upper } else { Side::Lower }),
        };
        let got = finite_sample_quantile(&scores, level, side).unwrap();
        let expected = brute_force_quantile(&scores, level, side);
        if got.to_bits() != expected.to_bits() {
            return (false, format!("case {case}: n {n} level {level} {side:?}: {got} vs {expected}"));
        }
    }
    (true, "100000 instances identical".into())
}

fn file_round_trip() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = stream(3, "acceptance/cpl1");
    for i in 0..100 {
        let (n, k) = match i {
            0 => (1, 2),
            1 => (1, rng.random_range(2..50)),
            2 => (rng.random_range(1..300), 2),
            _ => (rng.random_range(1..300), rng.random_range(2..50)),
        };
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        // raw bit patterns cover subnormals and negative zero
        let logits: Vec<f32> = (0..n * k)
            .map(|_| loop {
                let v = f32::from_bits(rng.random());
                if v.is_finite() {
                    break v;
                }
            })
            .collect();
        let mut metadata = RecordMetadata {
            dataset: format!("set-{i}"),
            model: "ünïcode model".into(),
            ..Default::default()
        };
        metadata.tags.insert("i".into(), i.to_string());
        let records = LogitRecordSet::with_metadata(k, labels, logits, metadata).unwrap();
        let path = dir.path().join(format!("{i}.cpl1"));
        save_records(&path, &records).unwrap();
        let back = load_records(&path).unwrap();
        if !back.bitwise_eq(&records) || encode_cpl1(&back).unwrap() != std::fs::read(&path).unwrap() {
            return (false, format!("file {i} (N={n}, K={k}) differs"));
        }
    }
    (true, "100 files bitwise identical, including N=1 and K=2".into())
}

fn run(name: &str, f: impl FnOnce() -> Verdict) -> bool {
    let (pass, detail) = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        (false, format!("panicked: {msg}"))
    });
    println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    pass
}

fn main() -> ExitCode {
    let drift = severity_curve(ShiftKind::MeanDrift, 100);
    let noise = severity_curve(ShiftKind::FeatureNoise, 100);
    let long_tail: Vec<_> = (0..10).map(long_tail_run).collect();

    let results = [
        run("marginal coverage guarantee", marginal_coverage),
        run("in-distribution coverage at 0.90 for all methods", in_distribution_pattern),
        run("shift degradation under mean drift", || shift_degradation(&drift)),
        run("coverage monotone in severity", || {
            severity_monotonicity(&[("mean_drift", &drift), ("feature_noise", &noise)])
        }),
        run("long-tail class violations", || long_tail_violations(&long_tail)),
        run("class-balanced improvement", || class_balanced_improvement(&long_tail)),
        run("RAPS set inside APS set at equal threshold", raps_inside_aps),
        run("conformal training gradients", conftr_gradients),
        run("conformal training efficiency", conftr_efficiency),
        run("quantile oracle equivalence", quantile_oracle),
        run("CPL1 round trip", file_round_trip),
    ];
    let failed = results.iter().filter(|&&p| !p).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
