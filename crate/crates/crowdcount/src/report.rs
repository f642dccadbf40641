//! Metrics reports and loss traces.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crowdcount_core::eval::MetricsReport;

use crate::error::{Error, Result};

/// `{"n", "mae", "mse", "per_image", "skipped"}`; `mse` is the root mean square.
pub fn report_json(report: &MetricsReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

pub fn write_report(path: &Path, report: &MetricsReport) -> Result<()> {
    fs::write(path, report_json(report)).map_err(|e| Error::io(path, e))
}

pub fn read_report(path: &Path) -> Result<MetricsReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, &e))
}

/// CSV `iteration,loss` with 1-based iterations. Losses print in their
/// shortest round-trip form.
pub fn loss_csv(losses: &[f64]) -> String {
    let mut s = String::from("iteration,loss\n");
    for (i, l) in losses.iter().enumerate() {
        writeln!(s, "{},{l:?}", i + 1).expect("writing to a String");
    }
    s
}

pub fn parse_loss_csv(text: &str) -> Option<Vec<f64>> {
    let mut lines = text.lines();
    if lines.next()? != "iteration,loss" {
        return None;
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let (it, loss) = line.split_once(',')?;
            (it.parse::<usize>().ok()? == i + 1).then_some(())?;
            loss.parse().ok()
        })
        .collect()
}
