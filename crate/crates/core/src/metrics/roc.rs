use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub class: usize,
    /// `(fpr, tpr)` from the `+inf` threshold down to `-inf`.
    pub points: Vec<(f64, f64)>,
    /// `None` when the class has no positives or no negatives.
    pub auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocSummary {
    pub curves: Vec<RocCurve>,
    /// Mean over classes with a defined AUC.
    pub macro_auc: Option<f64>,
}

/// Threshold sweep over distinct scores, highest first. Equal scores form
/// one step, so ties contribute a diagonal segment. Returns the curve and
/// its trapezoid area, or `None` for the area when a class is missing.
pub fn roc_binary(scores: &[f64], positive: &[bool]) -> (Vec<(f64, f64)>, Option<f64>) {
    let p = positive.iter().filter(|&&b| b).count();
    let n = positive.len() - p;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![(0.0, 0.0)];
    if p == 0 || n == 0 {
        points.push((1.0, 1.0));
        return (points, None);
    }
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == s {
            if positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        // Trapezoid in count units; normalized once at the end.
        area += (fp - fp0) as f64 * (tp + tp0) as f64 / 2.0;
        points.push((fp as f64 / n as f64, tp as f64 / p as f64));
    }
    (points, Some(area / (p as f64 * n as f64)))
}

/// `P(s+ > s-) + P(s+ = s-) / 2` by enumerating all pairs.
pub fn pairwise_concordance(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let (mut wins, mut pairs) = (0.0, 0u64);
    for (i, &si) in scores.iter().enumerate() {
        if !positive[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if positive[j] {
                continue;
            }
            pairs += 1;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    (pairs > 0).then(|| wins / pairs as f64)
}

/// One-vs-all ROC per class over score rows (`scores[n][k]`).
pub fn roc_auc_ovr(scores: &[Vec<f64>], y_true: &[usize]) -> Result<RocSummary> {
    if scores.len() != y_true.len() {
        return Err(Error::Argument(format!(
            "{} score rows but {} labels",
            scores.len(),
            y_true.len()
        )));
    }
    let k = scores.first().map_or(0, Vec::len);
    if scores.iter().any(|r| r.len() != k) {
        return Err(Error::Argument("score rows differ in length".into()));
    }
    if let Some(&bad) = y_true.iter().find(|&&y| y >= k) {
        return Err(Error::Argument(format!("label {bad} out of range for {k} classes")));
    }
    let curves: Vec<RocCurve> = (0..k)
        .map(|class| {
            let col: Vec<f64> = scores.iter().map(|r| r[class]).collect();
            let pos: Vec<bool> = y_true.iter().map(|&y| y == class).collect();
            let (points, auc) = roc_binary(&col, &pos);
            RocCurve { class, points, auc }
        })
        .collect();
    let defined: Vec<f64> = curves.iter().filter_map(|c| c.auc).collect();
    let macro_auc = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok(RocSummary { curves, macro_auc })
}
