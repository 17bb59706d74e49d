use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    argmax_rows, classification_metrics, confusion, dca_ovr, default_pt_grid, roc_auc_ovr, ClassificationMetrics,
    ConfusionMatrix, DcaCurve, RocCurve,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Latency {
    pub mean_ms: f64,
    pub std_ms: f64,
    pub samples: usize,
}

impl Latency {
    /// Mean and population standard deviation of per-sample timings.
    pub fn from_millis(times: &[f64]) -> Option<Self> {
        if times.is_empty() {
            return None;
        }
        let n = times.len() as f64;
        let mean = times.iter().sum::<f64>() / n;
        let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n;
        Some(Self {
            mean_ms: mean,
            std_ms: var.sqrt(),
            samples: times.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub class_names: Vec<String>,
    pub confusion: ConfusionMatrix,
    pub classification: ClassificationMetrics,
    pub roc: Vec<RocCurve>,
    pub macro_auc: Option<f64>,
    pub dca: Vec<DcaCurve>,
    pub latency: Option<Latency>,
}

impl MetricsReport {
    /// Builds every metric from softmax rows and true labels.
    pub fn from_scores(class_names: &[String], probs: &[Vec<f64>], y_true: &[usize]) -> Result<Self> {
        let k = class_names.len();
        if probs.iter().any(|r| r.len() != k) {
            return Err(Error::Argument(format!("score rows must have {k} columns")));
        }
        let preds = argmax_rows(probs);
        let cm = confusion(y_true, &preds, k)?;
        let roc = roc_auc_ovr(probs, y_true)?;
        let dca = dca_ovr(probs, y_true, &default_pt_grid())?;
        Ok(Self {
            class_names: class_names.to_vec(),
            classification: classification_metrics(&cm),
            confusion: cm,
            roc: roc.curves,
            macro_auc: roc.macro_auc,
            dca,
            latency: None,
        })
    }

    pub fn accuracy(&self) -> f64 {
        self.classification.accuracy
    }

    /// `ACC PRE REC F1 AUC` in percent.
    pub fn summary_line(&self) -> String {
        let c = &self.classification;
        let auc = self.macro_auc.map_or("n/a".to_string(), |a| format!("{:.2}", 100.0 * a));
        format!(
            "ACC {:.2}  PRE {:.2}  REC {:.2}  F1 {:.2}  AUC {}",
            100.0 * c.accuracy,
            100.0 * c.macro_avg.precision,
            100.0 * c.macro_avg.recall,
            100.0 * c.macro_avg.f1,
            auc
        )
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// `class,precision,recall,f1,auc` rows, a `macro` row and an
    /// `accuracy` line.
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("class,precision,recall,f1,auc\n");
        let opt = |a: Option<f64>| a.map_or(String::new(), |v| v.to_string());
        for (i, m) in self.classification.per_class.iter().enumerate() {
            let auc = self.roc.get(i).and_then(|r| r.auc);
            let _ = writeln!(out, "{},{},{},{},{}", self.class_names[i], m.precision, m.recall, m.f1, opt(auc));
        }
        let a = &self.classification.macro_avg;
        let _ = writeln!(out, "macro,{},{},{},{}", a.precision, a.recall, a.f1, opt(self.macro_auc));
        let _ = writeln!(out, "accuracy,{}", self.classification.accuracy);
        out
    }

    pub fn roc_csv(&self) -> String {
        let mut out = String::from("class,fpr,tpr\n");
        for c in &self.roc {
            for (x, y) in &c.points {
                let _ = writeln!(out, "{},{x},{y}", self.class_names[c.class]);
            }
        }
        out
    }

    pub fn dca_csv(&self) -> String {
        let mut out = String::from("class,pt,net_benefit,treat_all,treat_none\n");
        for c in &self.dca {
            for i in 0..c.thresholds.len() {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{}",
                    self.class_names[c.class], c.thresholds[i], c.net_benefit[i], c.treat_all[i], c.treat_none[i]
                );
            }
        }
        out
    }

    pub fn roc_svg(&self) -> String {
        let series: Vec<(String, Vec<(f64, f64)>)> = self
            .roc
            .iter()
            .map(|c| (self.class_names[c.class].clone(), c.points.clone()))
            .collect();
        let mut plot = Plot::new("ROC (one-vs-all)", "False positive rate", "True positive rate", (0.0, 1.0));
        for (i, (name, pts)) in series.iter().enumerate() {
            plot.polyline("series", i, name, pts);
        }
        plot.polyline("reference", usize::MAX, "chance", &[(0.0, 0.0), (1.0, 1.0)]);
        plot.finish()
    }

    pub fn dca_svg(&self) -> String {
        let lo = self
            .dca
            .iter()
            .flat_map(|c| c.net_benefit.iter().chain(&c.treat_all))
            .fold(0.0f64, |m, &v| m.min(v))
            .max(-0.5);
        let hi = self.dca.iter().map(|c| c.prevalence).fold(0.0f64, f64::max).max(0.05);
        let mut plot = Plot::new("Decision curves (one-vs-all)", "Threshold probability", "Net benefit", (lo, hi));
        for (i, c) in self.dca.iter().enumerate() {
            let pts: Vec<(f64, f64)> = c.thresholds.iter().copied().zip(c.net_benefit.iter().copied()).collect();
            plot.polyline("series", i, &self.class_names[c.class], &pts);
        }
        for (i, c) in self.dca.iter().enumerate() {
            let pts: Vec<(f64, f64)> = c.thresholds.iter().copied().zip(c.treat_all.iter().copied()).collect();
            plot.polyline("treat-all", i, &format!("{} treat all", self.class_names[c.class]), &pts);
        }
        plot.polyline("reference", usize::MAX, "treat none", &[(0.0, 0.0), (1.0, 0.0)]);
        plot.finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
    Svg,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            "svg" => Ok(Self::Svg),
            other => Err(Error::Argument(format!("unknown report format {other:?}"))),
        }
    }
}

/// Writes the requested formats into `dir` using `stem` as the file prefix.
/// Returns the written paths.
pub fn export_report(report: &MetricsReport, dir: &Path, stem: &str, formats: &[ReportFormat]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut files: Vec<(PathBuf, String)> = Vec::new();
    for f in formats {
        match f {
            ReportFormat::Json => files.push((dir.join(format!("{stem}.json")), report.to_json()?)),
            ReportFormat::Csv => {
                files.push((dir.join(format!("{stem}.csv")), report.metrics_csv()));
                files.push((dir.join(format!("{stem}_roc.csv")), report.roc_csv()));
                files.push((dir.join(format!("{stem}_dca.csv")), report.dca_csv()));
            }
            ReportFormat::Svg => {
                files.push((dir.join(format!("{stem}_roc.svg")), report.roc_svg()));
                files.push((dir.join(format!("{stem}_dca.svg")), report.dca_svg()));
            }
        }
    }
    for (path, text) in &files {
        fs::write(path, text)?;
    }
    Ok(files.into_iter().map(|(p, _)| p).collect())
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// Minimal SVG 1.1 line chart on a unit x range.
struct Plot {
    body: String,
    y_range: (f64, f64),
    legend_rows: usize,
}

impl Plot {
    const W: f64 = 480.0;
    const H: f64 = 400.0;
    const L: f64 = 60.0;
    const R: f64 = 160.0;
    const T: f64 = 30.0;
    const B: f64 = 50.0;

    fn new(title: &str, xlabel: &str, ylabel: &str, y_range: (f64, f64)) -> Self {
        let mut body = String::new();
        let (pw, ph) = (Self::W - Self::L - Self::R, Self::H - Self::T - Self::B);
        let _ = writeln!(
            body,
            r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{}" height="{}" font-family="sans-serif" font-size="11">"#,
            Self::W,
            Self::H
        );
        let _ = writeln!(body, r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{}</text>"#, Self::L + pw / 2.0, escape(title));
        let _ = writeln!(
            body,
            r#"<rect class="axis" x="{}" y="{}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#,
            Self::L,
            Self::T
        );
        let mut plot = Self {
            body,
            y_range,
            legend_rows: 0,
        };
        for i in 0..=4 {
            let f = i as f64 / 4.0;
            let (x, y0) = plot.map(f, y_range.0);
            let yv = y_range.0 + f * (y_range.1 - y_range.0);
            let (x0, y) = plot.map(0.0, yv);
            let _ = writeln!(plot.body, r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{f:.2}</text>"#, y0 + 15.0);
            let _ = writeln!(plot.body, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{yv:.2}</text>"#, x0 - 5.0, y + 4.0);
        }
        let _ = writeln!(
            plot.body,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            Self::L + pw / 2.0,
            Self::H - 12.0,
            escape(xlabel)
        );
        let _ = writeln!(
            plot.body,
            r#"<text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">{}</text>"#,
            Self::T + ph / 2.0,
            Self::T + ph / 2.0,
            escape(ylabel)
        );
        plot
    }

    fn map(&self, x: f64, y: f64) -> (f64, f64) {
        let (pw, ph) = (Self::W - Self::L - Self::R, Self::H - Self::T - Self::B);
        let span = (self.y_range.1 - self.y_range.0).max(1e-12);
        let yc = y.clamp(self.y_range.0, self.y_range.1);
        (Self::L + x * pw, Self::T + ph - (yc - self.y_range.0) / span * ph)
    }

    fn polyline(&mut self, class: &str, index: usize, label: &str, pts: &[(f64, f64)]) {
        let coords: Vec<String> = pts
            .iter()
            .map(|&(x, y)| {
                let (px, py) = self.map(x, y);
                format!("{px:.2},{py:.2}")
            })
            .collect();
        let (color, dash) = match class {
            "series" => (PALETTE[index % PALETTE.len()], ""),
            "treat-all" => (PALETTE[index % PALETTE.len()], r#" stroke-dasharray="2,3""#),
            _ => ("#888888", r#" stroke-dasharray="5,4""#),
        };
        let _ = writeln!(
            self.body,
            r#"<polyline class="{class}" fill="none" stroke="{color}" stroke-width="1.5"{dash} points="{}"><title>{}</title></polyline>"#,
            coords.join(" "),
            escape(label)
        );
        let ly = Self::T + 10.0 + 16.0 * self.legend_rows as f64;
        let lx = Self::W - Self::R + 10.0;
        let _ = writeln!(
            self.body,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="1.5"{dash}/><text x="{}" y="{}">{}</text>"#,
            lx + 18.0,
            lx + 22.0,
            ly + 4.0,
            escape(label)
        );
        self.legend_rows += 1;
    }

    fn finish(mut self) -> String {
        self.body.push_str("</svg>\n");
        self.body
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}
