//! CSV emission to a file or stdout.

use std::io::Write;
use std::path::Path;

use prunefuse_core::Result;

pub fn write_csv(path: Option<&Path>, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(header)
            .and_then(|_| rows.iter().try_for_each(|r| w.write_record(r)))
            .and_then(|_| w.flush().map_err(csv::Error::from))
            .map_err(|e| prunefuse_core::Error::Format(e.to_string()))?;
    }
    match path {
        Some(p) => {
            if let Some(parent) = p.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent)?;
                }
            }
            std::fs::write(p, buf)?;
        }
        None => std::io::stdout().write_all(&buf)?,
    }
    Ok(())
}

/// Shortest exact decimal for an f64 (matches Rust's default float Display).
pub fn num(v: f64) -> String {
    format!("{v}")
}
