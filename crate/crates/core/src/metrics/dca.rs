use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DcaCurve {
    pub class: usize,
    pub prevalence: f64,
    pub thresholds: Vec<f64>,
    pub net_benefit: Vec<f64>,
    pub treat_all: Vec<f64>,
    pub treat_none: Vec<f64>,
}

/// `0.01, 0.02, ..., 0.99`.
pub fn default_pt_grid() -> Vec<f64> {
    (1..=99).map(|i| i as f64 / 100.0).collect()
}

/// `TP/N - FP/N * pt/(1-pt)`.
pub fn net_benefit(tp: u64, fp: u64, n: u64, pt: f64) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    tp as f64 / n - fp as f64 / n * (pt / (1.0 - pt))
}

/// Decision curves per class: predict positive iff `score >= pt`.
pub fn dca_ovr(scores: &[Vec<f64>], y_true: &[usize], pt_grid: &[f64]) -> Result<Vec<DcaCurve>> {
    if let Some(&bad) = pt_grid.iter().find(|&&pt| !(pt > 0.0 && pt < 1.0)) {
        return Err(Error::Argument(format!("threshold probability {bad} outside (0, 1)")));
    }
    if scores.len() != y_true.len() {
        return Err(Error::Argument(format!(
            "{} score rows but {} labels",
            scores.len(),
            y_true.len()
        )));
    }
    let k = scores.first().map_or(0, Vec::len);
    let n = y_true.len() as u64;
    Ok((0..k)
        .map(|class| {
            let positives = y_true.iter().filter(|&&y| y == class).count() as u64;
            let negatives = n - positives;
            let mut nb = Vec::with_capacity(pt_grid.len());
            let mut all = Vec::with_capacity(pt_grid.len());
            for &pt in pt_grid {
                let (mut tp, mut fp) = (0, 0);
                for (row, &y) in scores.iter().zip(y_true) {
                    if row[class] >= pt {
                        if y == class {
                            tp += 1;
                        } else {
                            fp += 1;
                        }
                    }
                }
                nb.push(net_benefit(tp, fp, n, pt));
                all.push(net_benefit(positives, negatives, n, pt));
            }
            DcaCurve {
                class,
                prevalence: if n == 0 { 0.0 } else { positives as f64 / n as f64 },
                thresholds: pt_grid.to_vec(),
                net_benefit: nb,
                treat_all: all,
                treat_none: vec![0.0; pt_grid.len()],
            }
        })
        .collect())
}
