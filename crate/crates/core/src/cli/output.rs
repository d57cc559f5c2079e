use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::nn::EpochMetrics;

/// Version of the metrics CSV column layout.
pub const METRICS_SCHEMA: u32 = 1;

/// Columns of `metrics.csv`, in order.
pub const METRICS_COLUMNS: [&str; 14] = [
    "schema",
    "epoch",
    "step",
    "learning_rate",
    "train_loss",
    "train_accuracy",
    "test_loss",
    "test_accuracy",
    "saturations",
    "weight_zero_fraction",
    "activation_zero_fraction",
    "gradient_zero_fraction",
    "mean_gamma",
    "converged_so_far",
];

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// One metrics row; `converged_so_far` is whether the train loss is below
/// the first epoch's.
pub fn metrics_row(m: &EpochMetrics, step: u64, first_loss: f64) -> Vec<String> {
    vec![
        METRICS_SCHEMA.to_string(),
        m.epoch.to_string(),
        step.to_string(),
        m.learning_rate.to_string(),
        m.train_loss.to_string(),
        m.train_accuracy.to_string(),
        m.test_loss.to_string(),
        m.test_accuracy.to_string(),
        m.saturations.to_string(),
        m.weight_zero_fraction.to_string(),
        m.activation_zero_fraction.to_string(),
        m.gradient_zero_fraction.to_string(),
        m.mean_gamma.to_string(),
        (m.epoch == 0 || m.train_loss < first_loss).to_string(),
    ]
}

pub fn csv_text(header: &[&str], rows: &[Vec<String>]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Input(format!("csv: {e}"));
    w.write_record(header).map_err(err)?;
    for row in rows {
        w.write_record(row).map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Input(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Reads back rows of an existing metrics file, for resuming.
pub fn read_metrics_rows(path: &Path) -> Result<Vec<Vec<String>>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?
        .iter()
        .map(str::to_string)
        .collect();
    if header != METRICS_COLUMNS {
        return Err(Error::Input(format!(
            "{}: not a schema {METRICS_SCHEMA} metrics file",
            path.display()
        )));
    }
    reader
        .records()
        .map(|r| {
            r.map(|rec| rec.iter().map(str::to_string).collect())
                .map_err(|e| Error::Input(format!("{}: {e}", path.display())))
        })
        .collect()
}
