//! Machine-readable experiment outputs: training curves, trade-off tables
//! and per-iteration activation matrices, all as CSV.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub mod sweep;

pub use sweep::{sweep, SweepEntry, SweepManifest, SweepRow};

/// A CSV record type with a fixed header.
pub trait CsvRow: Serialize + DeserializeOwned {
    const HEADER: &'static [&'static str];
}

/// One epoch of training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Percent.
    pub train_acc: f64,
    /// Percent.
    pub test_acc: f64,
    pub lambda: f64,
    /// Not written to CSV so logs of identical runs compare equal.
    #[serde(skip)]
    pub wall_time_s: f64,
}

impl CsvRow for MetricRow {
    const HEADER: &'static [&'static str] =
        &["epoch", "lr", "train_loss", "train_acc", "test_acc", "lambda"];
}

impl MetricRow {
    /// Equality on every logged column, ignoring wall time.
    pub fn same_values(&self, other: &MetricRow) -> bool {
        MetricRow {
            wall_time_s: 0.0,
            ..self.clone()
        } == MetricRow {
            wall_time_s: 0.0,
            ..other.clone()
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricLog {
    rows: Vec<MetricRow>,
}

impl MetricLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, row: MetricRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if row.epoch <= last.epoch {
                return Err(Error::Internal(format!(
                    "epoch {} logged after epoch {}",
                    row.epoch, last.epoch
                )));
            }
        }
        for acc in [row.train_acc, row.test_acc] {
            if !(0.0..=100.0).contains(&acc) {
                return Err(Error::Internal(format!("accuracy {acc} outside [0, 100]")));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn rows(&self) -> &[MetricRow] {
        &self.rows
    }

    pub fn last(&self) -> Option<&MetricRow> {
        self.rows.last()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Row-wise [`MetricRow::same_values`].
    pub fn same_values(&self, other: &MetricLog) -> bool {
        self.rows.len() == other.rows.len()
            && self.rows.iter().zip(&other.rows).all(|(a, b)| a.same_values(b))
    }

    pub fn extend(&mut self, other: MetricLog) -> Result<()> {
        for row in other.rows {
            self.push(row)?;
        }
        Ok(())
    }

    pub fn to_csv(&self) -> Result<String> {
        rows_to_csv(&self.rows)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_rows(path, &self.rows)
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let mut log = MetricLog::new();
        for row in read_rows(path)? {
            log.push(row)?;
        }
        Ok(log)
    }
}

pub fn rows_to_csv<R: CsvRow>(rows: &[R]) -> Result<String> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    w.write_record(R::HEADER)?;
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Internal(format!("csv buffer: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Internal(e.to_string()))
}

/// Header row then one line per record; a header-only file when empty.
pub fn write_rows<R: CsvRow>(path: impl AsRef<Path>, rows: &[R]) -> Result<()> {
    write_text(path.as_ref(), &rows_to_csv(rows)?)
}

pub fn read_rows<R: CsvRow>(path: impl AsRef<Path>) -> Result<Vec<R>> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    if header != R::HEADER {
        return Err(Error::Data(format!(
            "{}: header {header:?} does not match {:?}",
            path.display(),
            R::HEADER
        )));
    }
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Writes a matrix with a leading index column named `index` and value
/// columns `{prefix}0, {prefix}1, …`.
pub fn write_matrix(
    path: impl AsRef<Path>,
    index: &str,
    prefix: &str,
    rows: &[Vec<f64>],
) -> Result<()> {
    let width = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != width) {
        return Err(Error::Internal("ragged matrix".into()));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let header: Vec<String> = std::iter::once(index.to_owned())
        .chain((0..width).map(|c| format!("{prefix}{c}")))
        .collect();
    w.write_record(&header)?;
    for (i, row) in rows.iter().enumerate() {
        let mut rec = vec![i.to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Internal(format!("csv buffer: {e}")))?;
    write_text(path.as_ref(), std::str::from_utf8(&bytes).expect("ascii csv"))
}

/// Reads a matrix written by [`write_matrix`], dropping the index column.
pub fn read_matrix(path: impl AsRef<Path>) -> Result<Vec<Vec<f64>>> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .skip(1)
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|_| Error::Data(format!("{}: bad number {s:?}", path.display())))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(row);
    }
    Ok(out)
}
