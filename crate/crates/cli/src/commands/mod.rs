pub mod detector;
pub mod frames;
pub mod labels;
pub mod serve;
pub mod synth;
pub mod tracks;

use std::path::Path;

use anyhow::{Context as _, Result};
use serde::Serialize;

use cyclodet_core::fsio::write_atomic;

/// One JSON value per line, replacing `path` atomically.
pub fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    ensure_parent(path)?;
    write_atomic(path, |w| {
        for item in items {
            serde_json::to_writer(&mut *w, &item)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })
    .with_context(|| format!("writing {}", path.display()))
}

pub fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}
