//! CSV and Markdown rendering of sweep rows.
//!
//! AP values are written as percentages with two decimals. The average column
//! is the mean of the rounded AP columns, itself rounded, so that it always
//! agrees with the table a reader sees.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{HarnessError, ReportRow};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Markdown,
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "md" | "markdown" => Ok(ReportFormat::Markdown),
            other => Err(format!("unknown report format {other:?} (expected csv or md)")),
        }
    }
}

fn round_to(x: f64, decimals: i32) -> f64 {
    let scale = 10f64.powi(decimals);
    (x * scale).round() / scale
}

/// A row exactly as it appears in the CSV file.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub threshold: Option<f64>,
    pub n_images: usize,
    pub instances_per_image: u32,
    /// Percentages, two decimals.
    pub ap: Vec<f64>,
    pub ap_avg: f64,
    pub attempts: f64,
    pub seconds: f64,
}

impl CsvRow {
    pub fn from_row(row: &ReportRow) -> Self {
        let ap: Vec<f64> = row.ap.iter().map(|a| round_to(a.ap * 100.0, 2)).collect();
        let ap_avg = round_to(ap.iter().sum::<f64>() / ap.len().max(1) as f64, 2);
        Self {
            threshold: row.threshold.map(|t| round_to(t, 2)),
            n_images: row.n_images,
            instances_per_image: row.instances_per_image,
            ap,
            ap_avg,
            attempts: row.attempts,
            seconds: round_to(row.seconds, 3),
        }
    }
}

/// `0.2 -> "02"`, `0.5 -> "05"`, `0.75 -> "075"`.
fn iou_suffix(t: f64) -> String {
    let text = format!("{t}");
    text.replacen('.', "", 1)
}

fn header(rows: &[ReportRow]) -> Vec<String> {
    let mut cols = vec!["threshold".to_owned(), "n_images".into(), "instances_per_image".into()];
    cols.extend(rows[0].ap.iter().map(|a| format!("ap_{}", iou_suffix(a.iou_threshold))));
    cols.extend(["ap_avg".into(), "attempts".into(), "seconds".into()]);
    cols
}

fn check_rows(rows: &[ReportRow]) -> Result<(), HarnessError> {
    let Some(first) = rows.first() else {
        return Err(HarnessError::InvalidSpec("no rows to report".into()));
    };
    let same = rows.iter().all(|r| {
        r.ap.len() == first.ap.len()
            && r.ap
                .iter()
                .zip(&first.ap)
                .all(|(a, b)| a.iou_threshold == b.iou_threshold)
    });
    if !same {
        return Err(HarnessError::InvalidSpec("rows disagree on IoU thresholds".into()));
    }
    Ok(())
}

fn render_csv(rows: &[ReportRow]) -> String {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record(header(rows)).expect("writing to memory");
    for row in rows {
        let r = CsvRow::from_row(row);
        let mut fields = vec![
            r.threshold.map(|t| format!("{t:.2}")).unwrap_or_default(),
            r.n_images.to_string(),
            r.instances_per_image.to_string(),
        ];
        fields.extend(r.ap.iter().map(|v| format!("{v:.2}")));
        fields.push(format!("{:.2}", r.ap_avg));
        fields.push(format!("{}", r.attempts));
        fields.push(format!("{:.3}", r.seconds));
        writer.write_record(fields).expect("writing to memory");
    }
    String::from_utf8(writer.into_inner().expect("in-memory flush")).expect("ASCII output")
}

fn render_markdown(rows: &[ReportRow]) -> String {
    let mut cols = vec!["Threshold".to_owned(), "Images".into(), "Instances/image".into()];
    cols.extend(rows[0].ap.iter().map(|a| format!("AP@{}", a.iou_threshold)));
    cols.extend(["Average".into(), "Attempts".into()]);
    let mut out = format!("| {} |\n", cols.join(" | "));
    let aligns: Vec<&str> = cols.iter().map(|_| "---:").collect();
    out.push_str(&format!("| {} |\n", aligns.join(" | ")));
    for row in rows {
        let r = CsvRow::from_row(row);
        let mut cells = vec![
            r.threshold.map(|t| format!("{t:.2}")).unwrap_or_else(|| "-".into()),
            r.n_images.to_string(),
            r.instances_per_image.to_string(),
        ];
        cells.extend(r.ap.iter().map(|v| format!("{v:.2}")));
        cells.push(format!("{:.2}", r.ap_avg));
        cells.push(format!("{}", r.attempts));
        out.push_str(&format!("| {} |\n", cells.join(" | ")));
    }
    out
}

pub fn render_report(rows: &[ReportRow], format: ReportFormat) -> Result<String, HarnessError> {
    check_rows(rows)?;
    Ok(match format {
        ReportFormat::Csv => render_csv(rows),
        ReportFormat::Markdown => render_markdown(rows),
    })
}

pub fn emit_report(rows: &[ReportRow], format: ReportFormat, out_path: &Path) -> Result<(), HarnessError> {
    let text = render_report(rows, format)?;
    fs::write(out_path, text).map_err(|source| HarnessError::Io {
        path: out_path.to_owned(),
        source,
    })
}

/// Reads back a CSV report. Column count and names are checked.
pub fn parse_csv(text: &str) -> Result<Vec<CsvRow>, HarnessError> {
    let bad = |m: String| HarnessError::InvalidSpec(format!("malformed report: {m}"));
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let head = reader.headers().map_err(|e| bad(e.to_string()))?.clone();
    let n = head.len();
    if n < 7 || &head[0] != "threshold" || &head[1] != "n_images" || &head[2] != "instances_per_image" {
        return Err(bad("unexpected header".into()));
    }
    let n_ap = n - 6;
    if !head.iter().skip(3).take(n_ap).all(|h| h.starts_with("ap_"))
        || &head[n - 3] != "ap_avg"
        || &head[n - 2] != "attempts"
        || &head[n - 1] != "seconds"
    {
        return Err(bad("unexpected header".into()));
    }
    let num = |s: &str| -> Result<f64, HarnessError> { s.parse().map_err(|_| bad(format!("bad number {s:?}"))) };
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| bad(e.to_string()))?;
        rows.push(CsvRow {
            threshold: if record[0].is_empty() {
                None
            } else {
                Some(num(&record[0])?)
            },
            n_images: record[1]
                .parse()
                .map_err(|_| bad(format!("bad count {:?}", &record[1])))?,
            instances_per_image: record[2]
                .parse()
                .map_err(|_| bad(format!("bad count {:?}", &record[2])))?,
            ap: (3..3 + n_ap).map(|i| num(&record[i])).collect::<Result<_, _>>()?,
            ap_avg: num(&record[n - 3])?,
            attempts: num(&record[n - 2])?,
            seconds: num(&record[n - 1])?,
        });
    }
    Ok(rows)
}
