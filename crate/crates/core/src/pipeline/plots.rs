use std::fmt::Write;
use std::path::{Path, PathBuf};

use crate::stats::{boxplot_csv, quantile, EvalReport, ReportRow, Significance};

/// Files written by [`emit_plots`].
#[derive(Debug, Clone, PartialEq)]
pub struct PlotFiles {
    pub subject_boxes: PathBuf,
    pub dataset_boxes: PathBuf,
    pub lines: PathBuf,
}

/// Solid for a significant subject (flagged on its adjusted p), dashed otherwise.
pub fn line_style(row: &ReportRow) -> &'static str {
    if row.significance.is_significant() {
        "solid"
    } else {
        "dashed"
    }
}

fn box_row(out: &mut String, condition: &str, values: &[f64], marker: &str) {
    let q1 = quantile(values, 0.25);
    let q3 = quantile(values, 0.75);
    let iqr = q3 - q1;
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let _ = writeln!(
        out,
        "{condition},{},{min},{},{q1},{},{q3},{},{max},{marker}",
        values.len(),
        (q1 - 1.5 * iqr).max(min),
        quantile(values, 0.5),
        (q3 + 1.5 * iqr).min(max)
    );
}

/// Writes plot data for the real-vs-random figure: one box per condition over
/// subject means, one paired line per subject, plus per-subject boxes.
pub fn emit_plots(report: &EvalReport, dir: &Path) -> std::io::Result<PlotFiles> {
    std::fs::create_dir_all(dir)?;
    let mut lines = String::from("subject_id,real_mu,rand_mu,p_raw,p_fdr,significance,line_style\n");
    for r in &report.per_subject {
        let p = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        let sig = serde_json::to_value(r.significance).expect("enum serializes");
        let _ = writeln!(
            lines,
            "{},{},{},{},{},{},{}",
            r.subject_id,
            r.real_mu,
            r.rand_mu,
            p(r.p_raw),
            p(r.p_fdr),
            sig.as_str().unwrap_or_default(),
            line_style(r)
        );
    }
    let marker = match report.whole_dataset.as_ref().map(|w| w.significance) {
        Some(Significance::HighlySignificant) => "**",
        Some(Significance::Significant) => "*",
        _ => "",
    };
    let mut boxes = String::from("condition,n,min,whisker_low,q1,median,q3,whisker_high,max,overall_marker\n");
    if !report.per_subject.is_empty() {
        let real: Vec<f64> = report.per_subject.iter().map(|r| r.real_mu).collect();
        let rand: Vec<f64> = report.per_subject.iter().map(|r| r.rand_mu).collect();
        box_row(&mut boxes, "real", &real, marker);
        box_row(&mut boxes, "random", &rand, marker);
    }
    let files = PlotFiles {
        subject_boxes: dir.join("subject_boxes.csv"),
        dataset_boxes: dir.join("dataset_boxes.csv"),
        lines: dir.join("paired_lines.csv"),
    };
    std::fs::write(&files.subject_boxes, boxplot_csv(report))?;
    std::fs::write(&files.dataset_boxes, boxes)?;
    std::fs::write(&files.lines, lines)?;
    Ok(files)
}
