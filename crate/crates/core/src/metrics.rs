//! JSON-lines training metrics and their metadata companion.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub iter: usize,
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
    /// Seconds since the run started; `null` unless wall-clock logging is enabled.
    pub wall_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user: Option<usize>,
}

/// Everything needed to interpret (and re-run) a metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub command: String,
    pub version: String,
    pub precision: String,
    pub seeds: Vec<u64>,
    pub model: String,
    pub adapter: String,
    /// Choices made where the method leaves details open.
    pub notes: Vec<String>,
    pub config: serde_json::Value,
}

/// `metrics.jsonl` → `metrics.meta.json`.
pub fn metadata_path(metrics: &Path) -> PathBuf {
    let stem = metrics
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "metrics".into());
    metrics.with_file_name(format!("{stem}.meta.json"))
}

pub fn write_metrics(path: &Path, records: &[MetricRecord], meta: &RunMetadata) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    let mut meta_json = serde_json::to_string_pretty(meta)?;
    meta_json.push('\n');
    fs::write(metadata_path(path), meta_json)?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Config(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

/// Learning curves as CSV: `iter,epoch,split,user,loss,accuracy`.
pub fn to_csv(records: &[MetricRecord]) -> String {
    let mut out = String::from("iter,epoch,split,user,loss,accuracy\n");
    for r in records {
        let user = r.user.map(|u| u.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.iter, r.epoch, r.split, user, r.loss, r.accuracy
        ));
    }
    out
}
