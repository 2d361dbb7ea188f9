use super::cv::{CvReport, PredictionRow, SplitRow, SummaryRow};
use super::metrics::roc_curve;
use crate::error::{Error, Result};
use crate::labels::Target;
use serde::de::DeserializeOwned;
use serde::Serialize;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

pub const SPLITS_CSV: &str = "cv_splits.csv";
pub const SUMMARY_CSV: &str = "cv_summary.csv";
pub const PREDICTIONS_CSV: &str = "cv_predictions.csv";

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::BadManifest(format!("{}: {e}", path.display()))
}

pub fn write_csv<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|_| Error::BrokenReference(path.to_path_buf()))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

/// Writes the per-split, summary and prediction CSVs into `dir`.
pub fn write_report(report: &CvReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_csv(&report.splits, &dir.join(SPLITS_CSV))?;
    write_csv(&report.summary, &dir.join(SUMMARY_CSV))?;
    write_csv(&report.predictions, &dir.join(PREDICTIONS_CSV))?;
    Ok(())
}

/// Reads back what [`write_report`] wrote. The predictions file is optional.
pub fn read_report(dir: &Path) -> Result<CvReport> {
    let splits: Vec<SplitRow> = read_csv(&dir.join(SPLITS_CSV))?;
    let summary: Vec<SummaryRow> = read_csv(&dir.join(SUMMARY_CSV))?;
    let pred_path = dir.join(PREDICTIONS_CSV);
    let predictions: Vec<PredictionRow> = if pred_path.is_file() { read_csv(&pred_path)? } else { Vec::new() };
    Ok(CvReport { splits, summary, predictions })
}

fn cell(row: Option<&SummaryRow>) -> String {
    match row.map(|r| (r.mean, r.std)) {
        Some((Some(m), Some(s))) => format!("{m:.2} ± {s:.2}"),
        Some((Some(m), None)) => format!("{m:.2}"),
        _ => "n/a".into(),
    }
}

/// Markdown table with one row per (target, TTA) and `mean ± std` cells.
pub fn render_summary_table(summary: &[SummaryRow]) -> String {
    let mut groups: Vec<(Target, bool)> = Vec::new();
    for r in summary {
        if !groups.contains(&(r.target, r.tta)) {
            groups.push((r.target, r.tta));
        }
    }
    let mut out = String::from("| target | TTA | AUC | Accuracy | F1 | Sensitivity | Specificity | MCC |\n");
    out.push_str("|---|---|---|---|---|---|---|---|\n");
    for (target, tta) in groups {
        let find = |m: &str| summary.iter().find(|r| r.target == target && r.tta == tta && r.metric == m);
        let _ = write!(out, "| {target} | {} |", if tta { "on" } else { "off" });
        for m in ["auc", "accuracy", "f1", "sensitivity", "specificity", "mcc"] {
            let _ = write!(out, " {} |", cell(find(m)));
        }
        out.push('\n');
    }
    out
}

/// Pooled ROC curves of all test predictions as a static SVG with one
/// polyline per (target, TTA) group.
pub fn roc_svg(predictions: &[PredictionRow]) -> String {
    const SIZE: f64 = 400.0;
    const PAD: f64 = 40.0;
    const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];
    let mut groups: Vec<(Target, bool)> = Vec::new();
    for p in predictions {
        if !groups.contains(&(p.target, p.tta)) {
            groups.push((p.target, p.tta));
        }
    }
    let total = SIZE + 2.0 * PAD;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{total}\" height=\"{total}\" viewBox=\"0 0 {total} {total}\">\n"
    );
    let _ = writeln!(
        svg,
        "<rect x=\"{PAD}\" y=\"{PAD}\" width=\"{SIZE}\" height=\"{SIZE}\" fill=\"none\" stroke=\"#000\"/>"
    );
    let _ = writeln!(
        svg,
        "<line x1=\"{PAD}\" y1=\"{}\" x2=\"{}\" y2=\"{PAD}\" stroke=\"#999\" stroke-dasharray=\"4 4\"/>",
        PAD + SIZE,
        PAD + SIZE
    );
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">false positive rate</text>",
        PAD + SIZE / 2.0,
        total - 8.0
    );
    let _ = writeln!(
        svg,
        "<text x=\"14\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">true positive rate</text>",
        PAD + SIZE / 2.0,
        PAD + SIZE / 2.0
    );
    for (g, (target, tta)) in groups.iter().enumerate() {
        let (labels, scores): (Vec<bool>, Vec<f64>) =
            predictions.iter().filter(|p| p.target == *target && p.tta == *tta).map(|p| (p.label, p.score)).unzip();
        let pts: Vec<String> = roc_curve(&labels, &scores)
            .into_iter()
            .map(|(x, y)| format!("{:.2},{:.2}", PAD + x * SIZE, PAD + (1.0 - y) * SIZE))
            .collect();
        let color = COLORS[g % COLORS.len()];
        let _ = writeln!(
            svg,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>",
            pts.join(" ")
        );
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{target} (TTA {})</text>",
            PAD + SIZE * 0.45,
            PAD + SIZE - 12.0 - 18.0 * g as f64,
            if *tta { "on" } else { "off" }
        );
    }
    svg.push_str("</svg>\n");
    svg
}
