//! Deterministic CSV emission.
//!
//! Replayed runs must produce byte-identical metric files, so anything
//! wall-clock-dependent goes to a separate timings file that is excluded
//! from determinism checks.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Writes rows of f64-or-integer cells under a header. Floats use Rust's
/// shortest-roundtrip formatting, which is deterministic for equal values.
pub struct CsvWriter {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl CsvWriter {
    pub fn new(header: &[&str]) -> CsvWriter {
        CsvWriter { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn row(&mut self, cells: Vec<String>) -> Result<()> {
        if cells.len() != self.header.len() {
            return Err(Error::Contract(format!(
                "csv row has {} cells, header has {}",
                cells.len(),
                self.header.len()
            )));
        }
        self.rows.push(cells);
        Ok(())
    }

    pub fn to_string(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.join(","));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        let mut f = fs::File::create(path)?;
        f.write_all(self.to_string().as_bytes())?;
        Ok(())
    }
}

pub fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        "nan".to_string()
    } else {
        format!("{x}")
    }
}

/// Minimal reader for the crate's own CSV files: header plus float cells
/// ("nan" allowed).
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Format(format!("reading {}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::Format("empty csv".into()))?
        .split(',')
        .map(|s| s.trim().to_string())
        .collect();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<f64> = line
            .split(',')
            .map(|c| {
                let c = c.trim();
                if c == "nan" {
                    Ok(f64::NAN)
                } else if c == "true" {
                    Ok(1.0)
                } else if c == "false" {
                    Ok(0.0)
                } else {
                    c.parse::<f64>()
                        .map_err(|e| Error::Format(format!("line {}: {e}", i + 2)))
                }
            })
            .collect::<Result<_>>()?;
        if cells.len() != header.len() {
            return Err(Error::Format(format!(
                "line {}: {} cells for {} columns",
                i + 2,
                cells.len(),
                header.len()
            )));
        }
        rows.push(cells);
    }
    Ok((header, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let mut w = CsvWriter::new(&["a", "b"]);
        w.row(vec![fmt_f64(1.5), fmt_f64(f64::NAN)]).unwrap();
        w.row(vec![fmt_f64(0.1 + 0.2), "3".into()]).unwrap();
        w.write(&path).unwrap();
        let (header, rows) = read_csv(&path).unwrap();
        assert_eq!(header, vec!["a", "b"]);
        assert_eq!(rows.len(), 2);
        assert!(rows[0][1].is_nan());
        assert_eq!(rows[1][0], 0.1 + 0.2);
        // Identical content writes identical bytes.
        let path2 = dir.path().join("m2.csv");
        w.write(&path2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn ragged_row_rejected() {
        let mut w = CsvWriter::new(&["a", "b"]);
        assert!(w.row(vec!["1".into()]).is_err());
    }
}
