//! Result tables in the layout of the published ablations: one config column,
//! then EER (%) and minDCF at each target prior.

use std::fmt::Write as _;
use std::path::Path;

use mqmha::metrics::EvalReport;
use serde::{Deserialize, Serialize};

use crate::error::CliResult;

pub const ORDERING_NOTE: &str =
    "desk-scale synthetic data; row orderings are not claimed to match the published results";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub config: String,
    pub eer_percent: f64,
    pub min_dcf_001: f64,
    pub min_dcf_005: f64,
}

impl ReportRow {
    pub fn from_eval(config: impl Into<String>, report: &EvalReport) -> Self {
        Self {
            config: config.into(),
            eer_percent: 100.0 * report.eer,
            min_dcf_001: report.min_dcf_at(0.01).unwrap_or(f64::NAN),
            min_dcf_005: report.min_dcf_at(0.05).unwrap_or(f64::NAN),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub title: String,
    pub rows: Vec<ReportRow>,
    pub note: String,
}

impl Report {
    pub fn new(title: impl Into<String>, rows: Vec<ReportRow>) -> Self {
        Self {
            title: title.into(),
            rows,
            note: ORDERING_NOTE.to_owned(),
        }
    }

    /// Lowest EER, then lowest DCF at 0.05, then the earliest row.
    pub fn best(&self) -> Option<usize> {
        (0..self.rows.len()).min_by(|&a, &b| {
            let (ra, rb) = (&self.rows[a], &self.rows[b]);
            ra.eer_percent
                .total_cmp(&rb.eer_percent)
                .then(ra.min_dcf_005.total_cmp(&rb.min_dcf_005))
                .then(a.cmp(&b))
        })
    }

    /// The aligned text table. The best row carries a `*` marker when the
    /// table has more than one row.
    pub fn render(&self) -> String {
        let header = ["Configures", "EER(%)", "DCF0.01", "DCF0.05"];
        let best = if self.rows.len() > 1 { self.best() } else { None };
        let cells: Vec<[String; 4]> = self
            .rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let mark = if Some(i) == best { " *" } else { "" };
                [
                    format!("{}{mark}", r.config),
                    format!("{:.4}", r.eer_percent),
                    format!("{:.4}", r.min_dcf_001),
                    format!("{:.4}", r.min_dcf_005),
                ]
            })
            .collect();
        let mut widths = header.map(str::len);
        for row in &cells {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.chars().count());
            }
        }
        let line = |cols: [&str; 4]| {
            let mut s = format!("{:<w$}", cols[0], w = widths[0]);
            for (c, w) in cols[1..].iter().zip(&widths[1..]) {
                write!(s, "  {c:>w$}").unwrap();
            }
            s.push('\n');
            s
        };
        let rule = "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)) + "\n";
        let mut out = format!("{}\n{rule}", self.title);
        out += &line(header);
        out += &rule;
        for row in &cells {
            out += &line([&row[0], &row[1], &row[2], &row[3]]);
        }
        out += &rule;
        if best.is_some() {
            out += "* best row\n";
        }
        out += &format!("note: {}\n", self.note);
        out
    }

    pub fn to_json(&self) -> CliResult<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Writes the JSON form to `json_path` and returns the text table.
pub fn emit_report(report: &Report, json_path: &Path) -> CliResult<String> {
    if let Some(dir) = json_path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(json_path, report.to_json()?)?;
    Ok(report.render())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(config: &str, eer: f64, d1: f64, d5: f64) -> ReportRow {
        ReportRow {
            config: config.into(),
            eer_percent: eer,
            min_dcf_001: d1,
            min_dcf_005: d5,
        }
    }

    #[test]
    fn one_run_gives_header_and_one_row() {
        let text = Report::new("eval", vec![row("q=4, h=16, n=1, d_s=1", 1.5, 0.2, 0.1)]).render();
        let data_lines: Vec<&str> = text.lines().filter(|l| l.contains("d_s=1")).collect();
        assert_eq!(data_lines.len(), 1);
        assert!(text.contains("EER(%)") && text.contains("DCF0.05"));
        assert!(!text.contains('*'));
    }

    #[test]
    fn best_row_is_marked() {
        let rows: Vec<ReportRow> = (0..6)
            .map(|i| row(&format!("r{i}"), [3.0, 2.0, 2.0, 4.0, 5.0, 2.5][i], 0.5, [0.3, 0.2, 0.1, 0.1, 0.1, 0.1][i]))
            .collect();
        let report = Report::new("sweep", rows);
        assert_eq!(report.best(), Some(2));
        let text = report.render();
        assert_eq!(text.matches(" *").count(), 1);
        assert!(text.lines().any(|l| l.starts_with("r2 *")));
        assert!(text.contains("not claimed to match"));
    }

    #[test]
    fn re_rendering_from_json_is_byte_identical() {
        let report = Report::new(
            "sweep",
            vec![row("a", 1.0 / 3.0, 0.123456789, 0.1), row("b, longer label", 12.5, 1.0, 0.987654321)],
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.json");
        let text = emit_report(&report, &path).unwrap();
        let back = Report::read(&path).unwrap();
        assert_eq!(back, report);
        assert_eq!(back.render(), text);
    }

    #[test]
    fn columns_are_aligned() {
        let text = Report::new("t", vec![row("a", 1.0, 0.1, 0.1), row("much longer", 10.0, 0.1, 0.1)]).render();
        let widths: Vec<usize> = text.lines().skip(1).take(5).map(|l| l.len()).collect();
        assert!(widths.windows(2).all(|w| w[0] == w[1]), "{text}");
    }
}
