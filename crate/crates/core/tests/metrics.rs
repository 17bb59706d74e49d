use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use resnetplus::metrics::{
    classification_metrics, confusion, dca_ovr, default_pt_grid, export_report, roc_auc_ovr, roc_binary, ConfusionMatrix,
    MetricsReport, ReportFormat,
};

mod common;
use common::brute_concordance;

#[test]
fn trapezoid_auc_equals_pairwise_concordance() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for trial in 0..1000 {
        let n = rng.gen_range(2..=50);
        // Coarse grids on some trials force ties.
        let levels = [0, 4, 10][trial % 3];
        let mut positive: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
        positive[0] = true;
        positive[1] = false;
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                let s: f64 = rng.gen();
                if levels == 0 { s } else { (s * levels as f64).round() / levels as f64 }
            })
            .collect();
        let (_, auc) = roc_binary(&scores, &positive);
        let want = brute_concordance(&scores, &positive);
        assert!((auc.unwrap() - want).abs() < 1e-9, "trial {trial}");
    }
}

#[test]
fn hand_counted_confusion_and_metrics() {
    let cm = confusion(&[0, 1, 2], &[0, 1, 1], 3).unwrap();
    assert_eq!(cm.counts, [[1, 0, 0], [0, 1, 0], [0, 1, 0]]);
    assert_eq!(cm.trace(), 2);
    let m = classification_metrics(&cm);
    assert!((m.accuracy - 2.0 / 3.0).abs() < 1e-15);
    assert_eq!(m.per_class[1].precision, 0.5);
    assert_eq!(m.per_class[1].recall, 1.0);
    assert_eq!(m.per_class[2].recall, 0.0);
    assert!((m.per_class[1].f1 - 2.0 / 3.0).abs() < 1e-15);
}

#[test]
fn accuracy_is_mean_recall_on_balanced_data() {
    let cm = ConfusionMatrix {
        counts: vec![vec![7, 2, 1], vec![3, 5, 2], vec![0, 1, 9]],
    };
    let m = classification_metrics(&cm);
    let mean_recall = m.per_class.iter().map(|c| c.recall).sum::<f64>() / 3.0;
    assert!((m.accuracy - mean_recall).abs() < 1e-15);
    assert!((m.macro_avg.recall - mean_recall).abs() < 1e-15);
}

#[test]
fn uniform_random_predictions_sit_at_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let k = 4;
    let n = 40_000;
    let y: Vec<usize> = (0..n).map(|i| i % k).collect();
    let p: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
    let acc = classification_metrics(&confusion(&y, &p, k).unwrap()).accuracy;
    // Binomial sd is about 0.0022.
    assert!((acc - 0.25).abs() < 0.01, "{acc}");
}

#[test]
fn decision_curve_direct_formula() {
    // 30 true positives and 10 false positives among 100 at pt = 0.2.
    let mut scores = Vec::new();
    let mut y = Vec::new();
    for i in 0..100 {
        let (s, label) = match i {
            0..=29 => (0.9, 0),
            30..=39 => (0.5, 1),
            40..=59 => (0.1, 0),
            _ => (0.05, 1),
        };
        scores.push(vec![s, 1.0 - s]);
        y.push(label);
    }
    let curves = dca_ovr(&scores, &y, &[0.2]).unwrap();
    assert!((curves[0].net_benefit[0] - 0.275).abs() < 1e-12);
    assert_eq!(curves[0].treat_none[0], 0.0);
    // Treat-all approaches prevalence as pt -> 0.
    let near_zero = dca_ovr(&scores, &y, &[1e-9]).unwrap();
    assert!((near_zero[0].treat_all[0] - 0.5).abs() < 1e-8);
}

#[test]
fn csv_auc_column_matches_json() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let names: Vec<String> = ["aca", "benign", "scc"].iter().map(|s| s.to_string()).collect();
    let y: Vec<usize> = (0..60).map(|i| i % 3).collect();
    let probs: Vec<Vec<f64>> = (0..60)
        .map(|_| {
            let raw: Vec<f64> = (0..3).map(|_| rng.gen::<f64>()).collect();
            let z: f64 = raw.iter().sum();
            raw.iter().map(|v| v / z).collect()
        })
        .collect();
    let report = MetricsReport::from_scores(&names, &probs, &y).unwrap();
    let dir = tempfile::tempdir().unwrap();
    export_report(&report, dir.path(), "r", &[ReportFormat::Json, ReportFormat::Csv]).unwrap();
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("r.json")).unwrap()).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("r.csv")).unwrap();
    for (k, line) in csv.lines().skip(1).take(3).enumerate() {
        let auc: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert_eq!(auc, json["roc"][k]["auc"].as_f64().unwrap());
    }
}

fn scored_labels() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..60).prop_flat_map(|n| {
        (
            prop::collection::vec(0.0..1.0f64, n),
            prop::collection::vec(any::<bool>(), n).prop_map(|mut v| {
                v[0] = true;
                v[1] = false;
                v
            }),
        )
    })
}

proptest! {
    #[test]
    fn auc_ignores_strictly_monotone_transforms((scores, positive) in scored_labels(), a in 0.1..5.0f64, b in -3.0..3.0f64) {
        let (_, base) = roc_binary(&scores, &positive);
        for transform in [|s: f64, a: f64, b: f64| a * s + b, |s: f64, a: f64, _| (a * s).exp(), |s: f64, _, b| s.powi(3) + b] {
            let moved: Vec<f64> = scores.iter().map(|&s| transform(s, a, b)).collect();
            let (_, auc) = roc_binary(&moved, &positive);
            prop_assert!((auc.unwrap() - base.unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn raising_positive_scores_never_lowers_auc((scores, positive) in scored_labels(), lift in 0.0..1.0f64) {
        let (_, base) = roc_binary(&scores, &positive);
        let raised: Vec<f64> = scores.iter().zip(&positive).map(|(&s, &p)| if p { s + lift } else { s }).collect();
        let (_, better) = roc_binary(&raised, &positive);
        prop_assert!(better.unwrap() >= base.unwrap() - 1e-12);
    }

    #[test]
    fn nobody_treated_means_zero_net_benefit(
        rows in prop::collection::vec(prop::collection::vec(0.0..0.5f64, 3), 1..40),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y: Vec<usize> = rows.iter().map(|_| rng.gen_range(0..3)).collect();
        let top = rows.iter().flatten().copied().fold(0.0, f64::max);
        let grid: Vec<f64> = default_pt_grid().into_iter().filter(|&pt| pt > top).collect();
        for curve in dca_ovr(&rows, &y, &grid).unwrap() {
            prop_assert!(curve.net_benefit.iter().all(|&nb| nb == 0.0));
        }
    }

    #[test]
    fn macro_auc_is_the_mean_of_class_aucs(seed in any::<u64>(), n in 6usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng.gen()).collect()).collect();
        let summary = roc_auc_ovr(&rows, &y).unwrap();
        let mean = summary.curves.iter().map(|c| c.auc.unwrap()).sum::<f64>() / 3.0;
        prop_assert!((summary.macro_auc.unwrap() - mean).abs() < 1e-12);
    }
}
