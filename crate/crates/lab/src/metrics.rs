//! `metrics.csv`: one row per epoch, empty cells for absent diagnostics.

use std::path::Path;

use igdm_core::MetricRecord;

use crate::error::{LabError, Result};

pub const HEADER: [&str; 10] = [
    "epoch",
    "loss_total",
    "loss_ad",
    "loss_igdm",
    "clean_acc",
    "pgd_acc",
    "gd",
    "gc",
    "remainder",
    "lr",
];

fn csv_err(path: &Path, e: csv::Error) -> LabError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => LabError::io(path, io),
        other => LabError::format(path, format!("{other:?}")),
    }
}

pub fn metrics_to_string(records: &[MetricRecord]) -> Result<String> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    for r in records {
        w.serialize(r).map_err(|e| csv_err(Path::new("metrics.csv"), e))?;
    }
    let bytes = w.into_inner().map_err(|e| LabError::Input(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn write_metrics(records: &[MetricRecord], path: &Path) -> Result<()> {
    if records.is_empty() {
        return Err(LabError::Input("no metric records to write".into()));
    }
    let text = metrics_to_string(records)?;
    std::fs::write(path, text).map_err(|e| LabError::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let mut r = csv::ReaderBuilder::new()
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let header: Vec<String> = r
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(str::to_owned)
        .collect();
    if header != HEADER {
        return Err(LabError::format(path, format!("unexpected header {header:?}")));
    }
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}
