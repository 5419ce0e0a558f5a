use cpbench_core::calibration::{
    calibrate_class_balanced, calibrate_marginal, finite_sample_quantile, CalibrationSet, Side,
};
use cpbench_core::io::{decode_cpl1, encode_cpl1, from_csv, to_csv};
use cpbench_core::metrics::{coverage, per_class_stats, EvalReport};
use cpbench_core::prediction::{predict_batch, predict_set};
use cpbench_core::scores::{aps_score, raps_score, score_matrix, softmax, thr_score, SortedProbView};
use cpbench_core::{LogitRecordSet, ProbVector, RecordMetadata, ScoreConfig};
use proptest::prelude::*;

fn logits(k: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = Vec<f64>> {
    k.prop_flat_map(|k| prop::collection::vec(-8.0..8.0f64, k))
}

fn probs() -> impl Strategy<Value = ProbVector> {
    logits(2..=30).prop_map(|z| softmax(&z).unwrap())
}

fn raps_config() -> impl Strategy<Value = (f64, usize)> {
    (0.0..0.5f64, 1usize..=2)
}

/// Labeled logits with `n` rows and `k` classes, labels drawn independently.
fn record_set(n: std::ops::RangeInclusive<usize>, k: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = LogitRecordSet> {
    (n, k).prop_flat_map(|(n, k)| {
        (
            prop::collection::vec(0..k, n),
            prop::collection::vec(-6.0..6.0f32, n * k),
        )
            .prop_map(move |(labels, logits)| LogitRecordSet::new(k, labels, logits).unwrap())
    })
}

fn methods() -> impl Strategy<Value = ScoreConfig> {
    prop_oneof![
        Just(ScoreConfig::Thr),
        Just(ScoreConfig::Aps),
        raps_config().prop_map(|(l, k)| ScoreConfig::Raps { lambda: l, k_reg: k }),
    ]
}

proptest! {
    #[test]
    fn softmax_is_a_distribution_and_keeps_argmax(z in logits(2..=50)) {
        let p = softmax(&z).unwrap();
        prop_assert!(p.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!((p.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-6);
        let zmax = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(z[p.argmax()], zmax);
    }

    #[test]
    fn sorted_view_is_consistent(p in probs()) {
        let view = SortedProbView::new(&p);
        let probs = p.as_slice();
        let order = view.order();
        prop_assert!(order.windows(2).all(|w| probs[w[0]] >= probs[w[1]]));
        let mut ranks: Vec<usize> = (0..p.len()).map(|k| view.rank(k)).collect();
        for k in 0..p.len() {
            prop_assert_eq!(order[view.rank(k) - 1], k);
        }
        ranks.sort_unstable();
        prop_assert_eq!(ranks, (1..=p.len()).collect::<Vec<_>>());
    }

    #[test]
    fn score_ranges_and_raps_penalty(p in probs(), (lambda, k_reg) in raps_config()) {
        let k = p.len();
        let cfg = ScoreConfig::Raps { lambda, k_reg };
        let view = SortedProbView::new(&p);
        for y in 0..k {
            let thr = thr_score(&p, y).unwrap().value;
            let aps = aps_score(&p, y).unwrap().value;
            let raps = raps_score(&p, y, &cfg).unwrap().value;
            prop_assert!((0.0..=1.0).contains(&thr));
            prop_assert!(aps > 0.0 && aps <= 1.0 + 1e-12);
            prop_assert!(raps > 0.0 && raps <= 1.0 + 1e-12 + lambda * (k - k_reg) as f64);
            let penalty = lambda * view.rank(y).saturating_sub(k_reg) as f64;
            prop_assert_eq!(raps - aps, (aps + penalty) - aps);
            prop_assert!(raps >= aps);
        }
    }

    #[test]
    fn aps_is_monotone_in_rank_with_fixed_ends(p in probs()) {
        let view = SortedProbView::new(&p);
        let by_rank: Vec<f64> = view.order().iter().map(|&k| aps_score(&p, k).unwrap().value).collect();
        prop_assert!(by_rank.windows(2).all(|w| w[0] <= w[1]));
        let max = p.as_slice().iter().copied().fold(0.0, f64::max);
        prop_assert_eq!(by_rank[0], max);
        prop_assert!((by_rank[p.len() - 1] - 1.0).abs() <= 1e-6 * p.len() as f64);
    }

    #[test]
    fn raps_set_is_inside_aps_set_at_equal_threshold(p in probs(), (lambda, k_reg) in raps_config(), tau in 0.0..1.2f64) {
        let aps = ScoreConfig::Aps.score_row(&p);
        let raps = ScoreConfig::Raps { lambda, k_reg }.score_row(&p);
        for k in 0..p.len() {
            if raps[k] < tau {
                prop_assert!(aps[k] < tau);
            }
        }
    }

    #[test]
    fn score_matrix_matches_scalar_scores(records in record_set(1..=20, 2..=8), cfg in methods()) {
        let m = score_matrix(&records, &cfg).unwrap();
        for i in 0..records.len() {
            let p = softmax(records.row(i)).unwrap();
            for k in 0..records.num_classes() {
                prop_assert_eq!(m.get(i, k).to_bits(), cfg.score(&p, k).unwrap().value.to_bits());
            }
        }
    }

    #[test]
    fn quantile_matches_sorted_selection(scores in prop::collection::vec(-5.0..5.0f64, 1..60), level in 0.0..1.0f64, upper in any::<bool>()) {
        let side = if upper { Side::Upper } else { Side::Lower };
        let got = finite_sample_quantile(&scores, level, side).unwrap();
        let mut sorted = scores.clone();
        sorted.sort_by(f64::total_cmp);
        let x = level * scores.len() as f64;
        let idx = if (x - x.round()).abs() <= 1e-9 * x.round().abs().max(1.0) {
            x.round()
        } else if upper {
            x.ceil()
        } else {
            x.floor()
        } as i64;
        let expected = if idx < 1 { f64::NEG_INFINITY } else { sorted[idx as usize - 1] };
        prop_assert_eq!(got, expected);
    }

    #[test]
    fn thresholds_move_monotonically_in_alpha(cal in record_set(5..=80, 2..=6), cfg in methods(), a in 0.01..0.98f64, b in 0.01..0.98f64) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let set = CalibrationSet::from_records(&cal, cfg).unwrap();
        let t_lo = calibrate_marginal(&set, lo).unwrap().threshold().for_class(0);
        let t_hi = calibrate_marginal(&set, hi).unwrap().threshold().for_class(0);
        match cfg {
            ScoreConfig::Thr => prop_assert!(t_lo <= t_hi),
            _ => prop_assert!(t_lo >= t_hi),
        }
    }

    #[test]
    fn sets_nest_in_alpha(cal in record_set(5..=60, 6..=6), test in record_set(1..=20, 6..=6), cfg in methods(), a in 0.01..0.98f64, b in 0.01..0.98f64, balanced in any::<bool>()) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let set = CalibrationSet::from_records(&cal, cfg).unwrap();
        let fit = |alpha| if balanced { calibrate_class_balanced(&set, alpha, 6) } else { calibrate_marginal(&set, alpha) };
        let big = predict_batch(&test, &fit(lo).unwrap()).unwrap();
        let small = predict_batch(&test, &fit(hi).unwrap()).unwrap();
        for (s, b) in small.iter().zip(&big) {
            prop_assert!(s.is_subset(b));
        }
    }

    #[test]
    fn set_shape_follows_the_method(z in logits(2..=12), tau in 0.0..1.3f64, (lambda, k_reg) in raps_config()) {
        let p = softmax(&z).unwrap();
        let view = SortedProbView::new(&p);
        let model = |cfg: ScoreConfig| {
            let n = 9;
            let cal = CalibrationSet::new(cfg, p.len(), vec![tau; n], vec![0; n]).unwrap();
            calibrate_marginal(&cal, 0.5).unwrap()
        };
        // APS sets are a prefix of the sorted order
        let aps = predict_set(&z, &model(ScoreConfig::Aps)).unwrap();
        let ranks: Vec<usize> = aps.members().iter().map(|&k| view.rank(k)).collect();
        prop_assert!(ranks.iter().all(|&r| r <= aps.len()));
        // RAPS keeps any higher-ranked class whose score is below the threshold
        let raps_cfg = ScoreConfig::Raps { lambda, k_reg };
        let raps = predict_set(&z, &model(raps_cfg)).unwrap();
        let scores = raps_cfg.score_row(&p);
        for &k in raps.members() {
            for r in 1..view.rank(k) {
                let j = view.order()[r - 1];
                prop_assert!(scores[j] <= scores[k]);
                prop_assert!(raps.contains(j));
            }
        }
        // a nonempty THR set contains the argmax
        let thr = predict_set(&z, &model(ScoreConfig::Thr)).unwrap();
        if !thr.is_empty() {
            prop_assert!(thr.contains(p.argmax()));
        }
    }

    #[test]
    fn micro_coverage_is_count_weighted_macro(records in record_set(1..=60, 2..=6), cfg in methods(), alpha in 0.05..0.6f64) {
        let cal = CalibrationSet::from_records(&records, cfg).unwrap();
        let sets = predict_batch(&records, &calibrate_marginal(&cal, alpha).unwrap()).unwrap();
        let stats = per_class_stats(&sets, records.labels(), records.num_classes()).unwrap();
        let covered: usize = stats.iter().map(|s| s.covered).sum();
        let total: usize = stats.iter().map(|s| s.count).sum();
        prop_assert_eq!(coverage(&sets, records.labels()).unwrap(), covered as f64 / total as f64);
        let report = EvalReport::compute(&records, &sets, alpha, None).unwrap();
        prop_assert!(report.violated_classes <= report.evaluated_classes);
        prop_assert_eq!(report.evaluated_classes + report.absent_classes.len(), records.num_classes());
    }

    #[test]
    fn batch_prediction_is_rowwise_and_order_preserving(records in record_set(1..=30, 2..=6), cfg in methods(), alpha in 0.05..0.6f64, seed in any::<u64>()) {
        let model = calibrate_marginal(&CalibrationSet::from_records(&records, cfg).unwrap(), alpha).unwrap();
        let sets = predict_batch(&records, &model).unwrap();
        for (i, s) in sets.iter().enumerate() {
            prop_assert_eq!(s, &predict_set(records.row(i), &model).unwrap());
        }
        let mut perm: Vec<usize> = (0..records.len()).collect();
        perm.sort_by_key(|&i| (i as u64).wrapping_mul(seed | 1).rotate_left(17));
        let permuted = predict_batch(&records.select(&perm), &model).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            prop_assert_eq!(&permuted[j], &sets[i]);
        }
    }

    #[test]
    fn cpl1_round_trip_is_bitwise(records in record_set(1..=40, 2..=9), name in "[a-z]{0,12}") {
        let mut records = records;
        records.metadata = RecordMetadata { dataset: name, model: "m".into(), ..Default::default() };
        let back = decode_cpl1(&encode_cpl1(&records).unwrap()).unwrap();
        prop_assert!(back.bitwise_eq(&records));
        let text = from_csv(&to_csv(&records)).unwrap();
        prop_assert_eq!(text.labels(), records.labels());
        prop_assert!(text.logits().iter().zip(records.logits()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
