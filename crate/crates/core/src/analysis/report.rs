use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::Result;

/// `<dir>/<probe>-seed<seed>-<hash>.<ext>`
pub fn artifact_name(dir: &Path, probe: &str, seed: u64, config_hash: &str, ext: &str) -> PathBuf {
    dir.join(format!("{probe}-seed{seed}-{config_hash}.{ext}"))
}

/// Header row plus one record per row, LF line endings.
pub fn write_csv<S: Serialize>(rows: &[S], path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<S: Serialize>(value: &S, path: &Path) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}
