use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::runner::RunRecord;
use super::stats::{summarize, SummaryRow};
use crate::error::{Error, Result};

pub const TRACE_FILE: &str = "trace.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const META_FILE: &str = "meta.json";
pub const PLOT_FILE: &str = "plot.svg";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub dtdlab_core: String,
    pub output_format: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub versions: Versions,
    pub repetitions: usize,
    pub diverged: Vec<bool>,
    pub theta_c: Vec<f64>,
    pub wall_clock_secs: f64,
}

impl RunRecord {
    pub fn summary(&self) -> Vec<SummaryRow> {
        let traces: Vec<&[f64]> = self.reps.iter().map(|r| r.errors.as_slice()).collect();
        summarize(&self.ks, &traces)
    }

    pub fn meta(&self) -> RunMeta {
        RunMeta {
            config: self.config.clone(),
            config_hash: self.config_hash.clone(),
            versions: Versions { dtdlab_core: env!("CARGO_PKG_VERSION").into(), output_format: 1 },
            repetitions: self.reps.len(),
            diverged: self.reps.iter().map(|r| r.diverged).collect(),
            theta_c: self.theta_c.iter().copied().collect(),
            wall_clock_secs: self.wall_clock_secs,
        }
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

/// Shortest representation that parses back to the same `f64`.
fn fmt_f64(x: f64) -> String {
    format!("{x}")
}

pub fn trace_csv(record: &RunRecord) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let p = Path::new(TRACE_FILE);
    w.write_record(["rep", "k", "error"]).map_err(|e| csv_err(p, e))?;
    for (rep, r) in record.reps.iter().enumerate() {
        for (k, e) in record.ks.iter().zip(&r.errors) {
            w.write_record([rep.to_string(), k.to_string(), fmt_f64(*e)]).map_err(|e| csv_err(p, e))?;
        }
    }
    w.into_inner().map_err(|e| Error::io(p, e.into_error()))
}

pub fn summary_csv(rows: &[SummaryRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let p = Path::new(SUMMARY_FILE);
    w.write_record(["k", "mean", "std"]).map_err(|e| csv_err(p, e))?;
    for r in rows {
        w.write_record([r.k.to_string(), fmt_f64(r.mean), fmt_f64(r.std)]).map_err(|e| csv_err(p, e))?;
    }
    w.into_inner().map_err(|e| Error::io(p, e.into_error()))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Write trace, summary and metadata under `<root>/<config hash>/`.
pub fn write_run(record: &RunRecord, root: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = root.as_ref().join(&record.config_hash);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write(&dir.join(TRACE_FILE), &trace_csv(record)?)?;
    write(&dir.join(SUMMARY_FILE), &summary_csv(&record.summary())?)?;
    let meta = serde_json::to_string_pretty(&record.meta())?;
    write(&dir.join(META_FILE), meta.as_bytes())?;
    Ok(dir)
}

/// A run directory read back from disk.
#[derive(Debug, Clone)]
pub struct LoadedRun {
    pub meta: RunMeta,
    pub summary: Vec<SummaryRow>,
    /// Per repetition `(k, error)` pairs.
    pub traces: Vec<Vec<(usize, f64)>>,
}

fn parse<T: std::str::FromStr>(field: Option<&str>, path: &Path) -> Result<T> {
    field
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::InvalidTrace(format!("malformed row in {}", path.display())))
}

pub fn load_run(dir: impl AsRef<Path>) -> Result<LoadedRun> {
    let dir = dir.as_ref();
    let meta_path = dir.join(META_FILE);
    let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: RunMeta = serde_json::from_str(&text)?;

    let trace_path = dir.join(TRACE_FILE);
    let mut traces = vec![Vec::new(); meta.repetitions];
    let mut rdr = csv::Reader::from_path(&trace_path).map_err(|e| csv_err(&trace_path, e))?;
    for row in rdr.records() {
        let row = row.map_err(|e| csv_err(&trace_path, e))?;
        let rep: usize = parse(row.get(0), &trace_path)?;
        let k: usize = parse(row.get(1), &trace_path)?;
        let e: f64 = parse(row.get(2), &trace_path)?;
        traces
            .get_mut(rep)
            .ok_or_else(|| Error::InvalidTrace(format!("repetition {rep} out of range")))?
            .push((k, e));
    }

    let summary_path = dir.join(SUMMARY_FILE);
    let mut summary = Vec::new();
    let mut rdr = csv::Reader::from_path(&summary_path).map_err(|e| csv_err(&summary_path, e))?;
    for row in rdr.records() {
        let row = row.map_err(|e| csv_err(&summary_path, e))?;
        let k: usize = parse(row.get(0), &summary_path)?;
        let count = traces.iter().filter(|t| t.iter().any(|(kk, _)| *kk == k)).count();
        summary.push(SummaryRow {
            k,
            mean: parse(row.get(1), &summary_path)?,
            std: parse(row.get(2), &summary_path)?,
            count,
        });
    }
    Ok(LoadedRun { meta, summary, traces })
}
