//! Tidy CSV and JSON writers.

use std::path::Path;

use gkrls_core::{GkrlsError, Result};
use serde::Serialize;

fn io_err(path: &Path, e: std::io::Error) -> GkrlsError {
    GkrlsError::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

/// Serialize rows (one per replicate per cell) to CSV.
pub fn write_csv_to<W: std::io::Write, T: Serialize>(w: W, rows: &[T]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    write_csv_to(f, rows)
}

pub fn csv_string<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut buf = Vec::new();
    write_csv_to(&mut buf, rows)?;
    String::from_utf8(buf).map_err(|e| GkrlsError::Data(e.to_string()))
}

pub fn read_csv<T: serde::de::DeserializeOwned, R: std::io::Read>(r: R) -> Result<Vec<T>> {
    let mut rd = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for row in rd.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s).map_err(|e| io_err(path, e))
}
