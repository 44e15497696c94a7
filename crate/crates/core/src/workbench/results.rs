use std::fs::OpenOptions;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const RESULTS_COLUMNS: [&str; 7] =
    ["experiment_id", "timestamp", "metric", "value", "method", "dataset", "model"];

/// One measured number. The schema is the same for every experiment kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsRow {
    pub experiment_id: String,
    pub timestamp: String,
    pub metric: String,
    pub value: f64,
    pub method: String,
    pub dataset: String,
    pub model: String,
}

/// Appends rows to a results CSV, writing the header when the file is new.
/// Non-finite values are rejected before anything is written.
pub fn append_results(path: impl AsRef<Path>, rows: &[ResultsRow]) -> Result<()> {
    let path = path.as_ref();
    if let Some(r) = rows.iter().find(|r| !r.value.is_finite()) {
        return Err(Error::Contract(format!(
            "metric `{}` ({}) is not finite: {}",
            r.metric, r.method, r.value
        )));
    }
    let fresh = !path.exists() || std::fs::metadata(path).map_err(|e| Error::io(path, e))?.len() == 0;
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    if fresh {
        w.write_record(RESULTS_COLUMNS)?;
    }
    for r in rows {
        w.write_record([
            r.experiment_id.as_str(),
            r.timestamp.as_str(),
            r.metric.as_str(),
            &format!("{:?}", r.value),
            r.method.as_str(),
            r.dataset.as_str(),
            r.model.as_str(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_results(path: impl AsRef<Path>) -> Result<Vec<ResultsRow>> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    let headers = r.headers()?.clone();
    if headers.iter().ne(RESULTS_COLUMNS) {
        return Err(Error::Parse {
            location: path.as_ref().display().to_string(),
            message: format!("unexpected header {headers:?}"),
        });
    }
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}
