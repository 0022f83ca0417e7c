//! CSV layout shared by runs, probes and summaries.
//!
//! Floats are written as `{:.16e}` (17 significant digits), which round-trips
//! every `f64` exactly; missing values are empty cells.

use crate::metrics::StepRecord;
use std::path::Path;

pub const STEP_COLUMNS: [&str; 4] = ["step", "task_index", "loss", "accuracy"];

pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "NaN".to_string()
    } else if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.to_string()
    } else {
        format!("{v:.16e}")
    }
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

pub fn parse_opt(cell: &str) -> Result<Option<f64>, String> {
    if cell.is_empty() {
        return Ok(None);
    }
    cell.parse::<f64>()
        .map(Some)
        .map_err(|e| format!("bad number `{cell}`: {e}"))
}

/// Step-size label used in file names, e.g. `1e-2`.
pub fn step_label(step_size: f64) -> String {
    format!("{step_size:e}")
}

pub fn step_cells(r: &StepRecord) -> [String; 4] {
    [
        r.step.to_string(),
        r.task_index.to_string(),
        fmt_f64(r.loss),
        fmt_opt(r.accuracy),
    ]
}

pub fn write_steps(path: &Path, records: &[StepRecord]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(STEP_COLUMNS)?;
    for r in records {
        w.write_record(step_cells(r))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads the leading step columns of a run or probe CSV.
pub fn read_steps(path: &Path) -> Result<Vec<StepRecord>, String> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let headers = rdr.headers().map_err(|e| e.to_string())?.clone();
    if headers.iter().take(4).ne(STEP_COLUMNS) {
        return Err(format!("{}: unexpected header", path.display()));
    }
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| format!("{}: {e}", path.display()))?;
        let int = |k: usize| row[k].parse::<u64>().map_err(|e| format!("{}: {e}", path.display()));
        out.push(StepRecord {
            step: int(0)?,
            task_index: int(1)?,
            loss: parse_opt(&row[2])?.ok_or("missing loss")?,
            accuracy: parse_opt(&row[3])?,
        });
    }
    Ok(out)
}
