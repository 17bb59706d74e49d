//! Confusion matrices, one-vs-all ROC/AUC, decision curves and report
//! export.

mod dca;
mod report;
mod roc;

use serde::{Deserialize, Serialize};

pub use dca::{dca_ovr, default_pt_grid, net_benefit, DcaCurve};
pub use report::{export_report, Latency, MetricsReport, ReportFormat};
pub use roc::{pairwise_concordance, roc_auc_ovr, roc_binary, RocCurve, RocSummary};

use crate::error::{Error, Result};

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.counts.len()).map(|i| self.counts[i][i]).sum()
    }

    /// One-vs-all `(tp, fp, fn, tn)` for class `k`.
    pub fn one_vs_all(&self, k: usize) -> (u64, u64, u64, u64) {
        let tp = self.counts[k][k];
        let row: u64 = self.counts[k].iter().sum();
        let col: u64 = self.counts.iter().map(|r| r[k]).sum();
        let fp = col - tp;
        let fn_ = row - tp;
        (tp, fp, fn_, self.total() - tp - fp - fn_)
    }
}

pub fn confusion(y_true: &[usize], y_pred: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if y_true.len() != y_pred.len() {
        return Err(Error::Argument(format!(
            "{} labels but {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    let mut counts = vec![vec![0u64; k]; k];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if t >= k || p >= k {
            return Err(Error::Argument(format!("label pair ({t}, {p}) out of range for {k} classes")));
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    /// No true samples: recall is reported as 0.
    pub zero_support: bool,
    /// Never predicted: precision is reported as 0.
    pub never_predicted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    /// Unweighted mean over classes.
    pub macro_avg: Averages,
    /// Pooled counts over classes.
    pub micro_avg: Averages,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Accuracy and one-vs-all precision, recall and F1 (`2TP / (2TP + FP + FN)`).
pub fn classification_metrics(cm: &ConfusionMatrix) -> ClassificationMetrics {
    let k = cm.num_classes();
    let mut per_class = Vec::with_capacity(k);
    let (mut stp, mut sfp, mut sfn) = (0, 0, 0);
    for c in 0..k {
        let (tp, fp, fn_, _) = cm.one_vs_all(c);
        stp += tp;
        sfp += fp;
        sfn += fn_;
        per_class.push(ClassMetrics {
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, tp + fn_),
            f1: ratio(2 * tp, 2 * tp + fp + fn_),
            support: tp + fn_,
            zero_support: tp + fn_ == 0,
            never_predicted: tp + fp == 0,
        });
    }
    let mean = |f: fn(&ClassMetrics) -> f64| {
        if k == 0 {
            0.0
        } else {
            per_class.iter().map(f).sum::<f64>() / k as f64
        }
    };
    let macro_avg = Averages {
        precision: mean(|m| m.precision),
        recall: mean(|m| m.recall),
        f1: mean(|m| m.f1),
    };
    let micro_avg = Averages {
        precision: ratio(stp, stp + sfp),
        recall: ratio(stp, stp + sfn),
        f1: ratio(2 * stp, 2 * stp + sfp + sfn),
    };
    ClassificationMetrics {
        accuracy: ratio(cm.trace(), cm.total()),
        per_class,
        macro_avg,
        micro_avg,
    }
}

/// Index of the first maximum in each row.
pub fn argmax_rows(rows: &[Vec<f64>]) -> Vec<usize> {
    rows.iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}
