//! Output locations and atomic file writes.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

/// Environment variable naming the directory all runs are written under.
pub const OUT_ENV: &str = "PIVOTGSL_OUT";
pub const DEFAULT_OUT_ROOT: &str = "runs";

pub fn out_root() -> PathBuf {
    std::env::var_os(OUT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_ROOT))
}

/// `explicit` if given, else `$PIVOTGSL_OUT/<name>`; created if missing.
pub fn run_dir(explicit: Option<&Path>, name: &str) -> Result<PathBuf> {
    let dir = match explicit {
        Some(p) => p.to_path_buf(),
        None => out_root().join(name),
    };
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

/// Writes through a sibling temp file and renames it into place, so
/// readers never observe a partial file.
pub fn write_atomic(path: &Path, body: &[u8]) -> Result<()> {
    let file_name = path.file_name().and_then(|s| s.to_str()).unwrap_or("out");
    let tmp = path.with_file_name(format!(".{file_name}.{}.tmp", std::process::id()));
    fs::write(&tmp, body).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

/// Serializes `rows` as CSV with a header taken from the field names.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let body = w.into_inner().context("flushing csv")?;
    write_atomic(path, &body)
}
