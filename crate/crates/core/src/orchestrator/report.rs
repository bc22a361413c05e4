use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::{Setting, Task};
use super::pipeline::RunRecord;
use crate::error::{Error, Result};

pub const RESULTS_JSON: &str = "results.json";
pub const RESULTS_CSV: &str = "results.csv";

#[derive(Debug, Serialize)]
struct CsvRow<'a> {
    setting: Setting,
    task: Task,
    train_mask: String,
    test_mask: String,
    metric: &'a str,
    value: f64,
    ci: f64,
    seed: u64,
    config_hash: &'a str,
}

/// One line per evaluation row; floats use the shortest exact form.
pub fn csv_bytes(records: &[RunRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        for row in &r.rows {
            w.serialize(CsvRow {
                setting: r.pipeline.setting,
                task: r.pipeline.task,
                train_mask: row.train_mask.to_string(),
                test_mask: row.test_mask.to_string(),
                metric: &row.metric,
                value: row.value,
                ci: row.ci,
                seed: r.seed,
                config_hash: &r.config_hash,
            })
            .map_err(|e| Error::Data(format!("csv: {e}")))?;
        }
    }
    w.into_inner()
        .map_err(|e| Error::Data(format!("csv: {}", e.error())))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Writes `results.json` and `results.csv` under `out`.
pub fn report(records: &[RunRecord], out: &Path) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Invalid("report needs at least one record".into()));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let json = serde_json::to_vec_pretty(records)?;
    write_atomic(&out.join(RESULTS_JSON), &json)?;
    write_atomic(&out.join(RESULTS_CSV), &csv_bytes(records)?)
}

pub fn read_records(path: &Path) -> Result<Vec<RunRecord>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Every record in `results.json` files below `dir`, in a stable order.
pub fn collect_records(dir: &Path) -> Result<Vec<RunRecord>> {
    let mut files = Vec::new();
    find_results(dir, &mut files)?;
    files.sort();
    let mut records = Vec::new();
    for f in files {
        records.extend(read_records(&f)?);
    }
    records.sort_by(|a, b| {
        (a.pipeline.setting, a.pipeline.task, &a.config_hash, a.seed).cmp(&(
            b.pipeline.setting,
            b.pipeline.task,
            &b.config_hash,
            b.seed,
        ))
    });
    Ok(records)
}

fn find_results(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            find_results(&path, out)?;
        } else if path.file_name().is_some_and(|n| n == RESULTS_JSON) {
            out.push(path);
        }
    }
    Ok(())
}
