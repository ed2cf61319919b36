//! Text tables over run records.

use std::fmt::Write as _;

use dtmars_core::metrics::{DetectionMetrics, RowMetrics};

use crate::pipeline::{RowSummary, RunRecord};

const METHOD_WIDTH: usize = 18;

/// Precision, recall, mAP50 and mAP50-95 per method.
pub fn detection_table(records: &[RunRecord]) -> String {
    let rows: Vec<(&str, &DetectionMetrics)> = records.iter().map(|r| (r.method.as_str(), &r.metrics)).collect();
    detection_table_rows(&rows)
}

pub fn detection_table_rows(rows: &[(&str, &DetectionMetrics)]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<METHOD_WIDTH$} {:>7} {:>7} {:>7} {:>9}", "Method", "P", "R", "mAP50", "mAP50-95");
    for (name, m) in rows {
        let flag = if m.zero_gt_warning { "  (no ground truth)" } else { "" };
        let _ = writeln!(
            s,
            "{:<METHOD_WIDTH$} {:>7.3} {:>7.3} {:>7.3} {:>9.3}{flag}",
            name, m.precision, m.recall, m.map50, m.map50_95
        );
    }
    s
}

fn cell(m: Option<RowMetrics>) -> (String, String) {
    match m {
        Some(m) => (format!("{:.2}", m.mae_theta_deg), format!("{:.2}", m.mae_dist_px)),
        None => ("n/a".into(), "n/a".into()),
    }
}

/// Row-offset errors with both fitters side by side.
pub fn row_table(records: &[RunRecord]) -> String {
    let rows: Vec<(&str, &RowSummary)> = records.iter().map(|r| (r.method.as_str(), &r.rows)).collect();
    row_table_rows(&rows)
}

pub fn row_table_rows(rows: &[(&str, &RowSummary)]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<METHOD_WIDTH$} {:^23} {:^23}", "", "MAE with RANSAC", "MAE with line fit");
    let _ = writeln!(
        s,
        "{:<METHOD_WIDTH$} {:>11} {:>11} {:>11} {:>11} {:>8}",
        "Method", "Angle(deg)", "Dist(px)", "Angle(deg)", "Dist(px)", "unfit"
    );
    for (name, r) in rows {
        let (ra, rd) = cell(r.ransac);
        let (la, ld) = cell(r.lsq);
        let _ = writeln!(
            s,
            "{:<METHOD_WIDTH$} {:>11} {:>11} {:>11} {:>11} {:>8}",
            name,
            ra,
            rd,
            la,
            ld,
            format!("{}/{}", r.ransac_failed.max(r.lsq_failed), r.frames)
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tables_have_one_line_per_method() {
        let m = DetectionMetrics { precision: 0.5, recall: 0.25, map50: 0.4, map50_95: 0.2, zero_gt_warning: false };
        let t = detection_table_rows(&[("Sim-Only", &m), ("CycleGAN", &m)]);
        assert_eq!(t.lines().count(), 3);
        assert!(t.contains("Sim-Only") && t.contains("0.250"));
        let r = RowSummary {
            ransac: Some(RowMetrics { mae_theta_deg: 1.5, mae_dist_px: 3.25 }),
            lsq: None,
            ransac_failed: 0,
            lsq_failed: 2,
            frames: 10,
        };
        let t = row_table_rows(&[("Sim-Only", &r)]);
        assert_eq!(t.lines().count(), 3);
        assert!(t.contains("1.50") && t.contains("n/a") && t.contains("2/10"));
    }
}
