//! Diagnostic artifacts: confusion matrix and per-class report for the
//! cluster classifier, the thresholded test-error scatter plot, EEG heatmaps
//! and high-confidence sample selection.
//!
//! SVG output is plain SVG 1.1 built from strings; CSV output always starts
//! with a header row.

use std::fmt::Write;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `k × k` counts; row = true class, column = predicted class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn from_counts(k: usize, counts: Vec<u64>) -> Result<Self> {
        if k == 0 || counts.len() != k * k {
            return Err(Error::shape("confusion_matrix", format!("{} counts for k = {k}", counts.len())));
        }
        Ok(Self { k, counts })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        self.counts[truth * self.k..(truth + 1) * self.k].iter().sum()
    }

    pub fn col_sum(&self, pred: usize) -> u64 {
        (0..self.k).map(|t| self.get(t, pred)).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("true\\pred");
        for j in 0..self.k {
            write!(s, ",{j}").unwrap();
        }
        s.push('\n');
        for i in 0..self.k {
            write!(s, "{i}").unwrap();
            for j in 0..self.k {
                write!(s, ",{}", self.get(i, j)).unwrap();
            }
            s.push('\n');
        }
        s
    }
}

pub fn confusion_matrix(true_ids: &[usize], pred_ids: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if true_ids.len() != pred_ids.len() {
        return Err(Error::shape(
            "confusion_matrix",
            format!("{} true ids vs {} predictions", true_ids.len(), pred_ids.len()),
        ));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be positive".into()));
    }
    let mut counts = vec![0u64; k * k];
    for (&t, &p) in true_ids.iter().zip(pred_ids) {
        if t >= k || p >= k {
            return Err(Error::InvalidArgument(format!("class id ({t}, {p}) outside [0, {k})")));
        }
        counts[t * k + p] += 1;
    }
    Ok(ConfusionMatrix { k, counts })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    /// No predictions of this class; precision reported as 0.
    pub precision_undefined: bool,
    /// No true samples of this class; recall reported as 0.
    pub recall_undefined: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassReport {
    pub classes: Vec<ClassMetrics>,
}

impl ClassReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,precision,recall,f1,support\n");
        for (i, c) in self.classes.iter().enumerate() {
            writeln!(s, "{i},{:.4},{:.4},{:.4},{}", c.precision, c.recall, c.f1, c.support).unwrap();
        }
        s
    }
}

pub fn class_report(cm: &ConfusionMatrix) -> Result<ClassReport> {
    if cm.k() < 2 {
        return Err(Error::InvalidArgument("class report needs k >= 2".into()));
    }
    let classes = (0..cm.k())
        .map(|c| {
            let tp = cm.get(c, c) as f64;
            let predicted = cm.col_sum(c);
            let support = cm.row_sum(c);
            let precision = if predicted > 0 { tp / predicted as f64 } else { 0.0 };
            let recall = if support > 0 { tp / support as f64 } else { 0.0 };
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassMetrics {
                precision,
                recall,
                f1,
                support,
                precision_undefined: predicted == 0,
                recall_undefined: support == 0,
            }
        })
        .collect();
    Ok(ClassReport { classes })
}

/// Drawing area of the scatter plot, in the same pixel units as the data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Viewport {
    pub width: f64,
    pub height: f64,
}

impl Default for Viewport {
    fn default() -> Self {
        Self {
            width: 800.0,
            height: 600.0,
        }
    }
}

pub const BLUE: &str = "#1f4fd1";
pub const RED: &str = "#d1261f";

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorScatter {
    pub svg: String,
    /// `x,y,distance_mm,flag` with one row per sample; flag is `blue` or `red`.
    pub csv: String,
    pub blue: usize,
    pub red: usize,
}

/// Marks every true position blue when its prediction lies within
/// `threshold_mm` (inclusive) and red otherwise, with a faint segment from
/// each prediction to its label.
pub fn error_scatter(
    preds_px: &[[f64; 2]],
    labels_px: &[[f64; 2]],
    threshold_mm: f64,
    px_per_mm: f64,
    view: Viewport,
) -> Result<ErrorScatter> {
    if preds_px.len() != labels_px.len() {
        return Err(Error::shape(
            "error_scatter",
            format!("{} predictions vs {} labels", preds_px.len(), labels_px.len()),
        ));
    }
    if !(px_per_mm > 0.0) || !(threshold_mm >= 0.0) {
        return Err(Error::InvalidArgument("threshold and px_per_mm must be positive".into()));
    }
    let mut svg = String::new();
    writeln!(
        svg,
        r##"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{w}" height="{h}" viewBox="0 0 {w} {h}">
<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>
<g id="segments" stroke="#888888" stroke-opacity="0.25" stroke-width="0.5">"##,
        w = view.width,
        h = view.height
    )
    .unwrap();
    for (p, l) in preds_px.iter().zip(labels_px) {
        writeln!(
            svg,
            r#"<line x1="{:.3}" y1="{:.3}" x2="{:.3}" y2="{:.3}"/>"#,
            p[0], p[1], l[0], l[1]
        )
        .unwrap();
    }
    svg.push_str("</g>\n<g id=\"markers\">\n");
    let mut csv = String::from("x,y,distance_mm,flag\n");
    let (mut blue, mut red) = (0, 0);
    for (p, l) in preds_px.iter().zip(labels_px) {
        let d_mm = (p[0] - l[0]).hypot(p[1] - l[1]) / px_per_mm;
        let within = d_mm <= threshold_mm;
        let (colour, flag) = if within { (BLUE, "blue") } else { (RED, "red") };
        if within {
            blue += 1;
        } else {
            red += 1;
        }
        writeln!(
            svg,
            r#"<circle cx="{:.3}" cy="{:.3}" r="2.5" fill="{colour}" fill-opacity="0.6" class="{flag}"/>"#,
            l[0], l[1]
        )
        .unwrap();
        writeln!(csv, "{},{},{},{flag}", l[0], l[1], d_mm).unwrap();
    }
    svg.push_str("</g>\n</svg>\n");
    Ok(ErrorScatter { svg, csv, blue, red })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub rows: usize,
    pub cols: usize,
    /// Min-max normalized values in `[0, 1]`, row-major.
    pub normalized: Vec<f64>,
    pub svg: String,
    pub csv: String,
}

/// Per-sample min-max normalization (a constant sample maps to 0.5),
/// rendered as one grey cell per value: black at the minimum, white at the
/// maximum.
pub fn eeg_heatmap(sample: &[f64], rows: usize, cols: usize) -> Result<Heatmap> {
    if rows == 0 || cols == 0 || sample.len() != rows * cols {
        return Err(Error::shape("eeg_heatmap", format!("{} values for {rows}x{cols}", sample.len())));
    }
    if sample.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("heatmap sample must be finite".into()));
    }
    let (lo, hi) = sample
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let normalized: Vec<f64> = if hi > lo {
        sample.iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.5; sample.len()]
    };
    let cell = 4;
    let mut svg = String::new();
    writeln!(
        svg,
        r#"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{w}" height="{h}" viewBox="0 0 {w} {h}" shape-rendering="crispEdges">"#,
        w = cols * cell,
        h = rows * cell
    )
    .unwrap();
    let mut csv = String::new();
    for c in 0..cols {
        if c > 0 {
            csv.push(',');
        }
        write!(csv, "t{c}").unwrap();
    }
    csv.push('\n');
    for r in 0..rows {
        for c in 0..cols {
            let v = normalized[r * cols + c];
            let level = (v * 255.0).round() as u8;
            writeln!(
                svg,
                r#"<rect x="{}" y="{}" width="{cell}" height="{cell}" fill="rgb({level},{level},{level})"/>"#,
                c * cell,
                r * cell
            )
            .unwrap();
            if c > 0 {
                csv.push(',');
            }
            write!(csv, "{v}").unwrap();
        }
        csv.push('\n');
    }
    svg.push_str("</svg>\n");
    Ok(Heatmap {
        rows,
        cols,
        normalized,
        svg,
        csv,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfidentSample {
    pub index: usize,
    pub class: usize,
    pub probability: f64,
}

/// Rows of `[n, k]` logits whose largest softmax probability is at least
/// `threshold`.
pub fn high_confidence_select(logits: &Tensor, threshold: f64) -> Result<Vec<ConfidentSample>> {
    let s = logits.shape();
    if s.len() != 2 || s[1] < 2 {
        return Err(Error::shape("high_confidence_select", format!("logits {s:?}, need [n, k >= 2]")));
    }
    let k = s[1];
    Ok(logits
        .data()
        .chunks(k)
        .enumerate()
        .filter_map(|(index, row)| {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let (class, _) = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
            let probability = 1.0 / z;
            (probability >= threshold).then_some(ConfidentSample {
                index,
                class,
                probability,
            })
        })
        .collect())
}
