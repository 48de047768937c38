//! Newline-delimited JSON helpers shared by every artifact format.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::{Error, Result};

/// Yields `(1-based line number, line)` for every non-blank line.
pub fn lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push((i + 1, line));
    }
    Ok(out)
}

pub fn parse_line<T: DeserializeOwned>(line_no: usize, line: &str) -> Result<T> {
    serde_json::from_str(line).map_err(|e| Error::Parse { line: line_no, message: e.to_string() })
}

pub fn read<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    lines(path)?.into_iter().map(|(n, l)| parse_line(n, &l)).collect()
}

pub fn write<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
