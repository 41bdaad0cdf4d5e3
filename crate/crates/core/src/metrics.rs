//! Per-step training metrics sinks and CSV record files.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub trait MetricsSink {
    fn record(&mut self, step: usize, loss: f64);
}

/// Discards everything.
pub struct NullSink;

impl MetricsSink for NullSink {
    fn record(&mut self, _step: usize, _loss: f64) {}
}

/// Collects (step, loss) pairs in memory.
#[derive(Default)]
pub struct VecSink {
    pub records: Vec<(usize, f64)>,
}

impl MetricsSink for VecSink {
    fn record(&mut self, step: usize, loss: f64) {
        self.records.push((step, loss));
    }
}

/// A record type with a fixed CSV column order. `headers()` must list the
/// serialized fields in declaration order.
pub trait CsvRecord: Serialize {
    fn headers() -> &'static [&'static str];
}

/// Write records as CSV with a stable column order and a header row. A fresh
/// file gets the header even when `records` is empty; appending to an
/// existing file adds rows without repeating the header.
pub fn write_csv<T: CsvRecord>(path: &Path, records: &[T], append: bool) -> Result<()> {
    let fresh = !append || !path.exists();
    let file = std::fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut writer = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(file);
    let io_err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    if fresh {
        writer.write_record(T::headers()).map_err(io_err)?;
    }
    for rec in records {
        writer.serialize(rec).map_err(io_err)?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let mut out = Vec::new();
    for row in reader.deserialize() {
        out.push(row.map_err(|e| Error::io(path, std::io::Error::other(e)))?);
    }
    Ok(out)
}
