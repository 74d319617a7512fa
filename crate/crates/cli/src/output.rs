//! Reading and writing run artifacts. Batch outputs are written whole and
//! renamed into place, so a rerun replaces rather than appends.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Serialize;
use spawnwatch_core::store::{self, RecordEnvelope, ScanFilter};

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_bytes(path, &bytes)
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    store::write_atomic(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn write_jsonl<'a>(path: &Path, records: impl IntoIterator<Item = &'a RecordEnvelope>) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&r.to_line()?);
        text.push('\n');
    }
    write_bytes(path, text.as_bytes())
}

/// Every record of a log; a corrupt interior line is an error.
pub fn read_jsonl(path: &Path) -> Result<Vec<RecordEnvelope>> {
    if !path.is_file() {
        bail!("{} does not exist", path.display());
    }
    let scanned = store::scan(path, &ScanFilter::all())?;
    if let Some(c) = scanned.corrupt.first() {
        bail!("corrupt record at {}:{}: {}", c.path.display(), c.position, c.reason);
    }
    Ok(scanned.envelopes().collect())
}

pub fn require_dir(path: &Path) -> Result<()> {
    if !path.is_dir() {
        bail!("run directory {} does not exist", path.display());
    }
    Ok(())
}

pub fn mix(seed: u64, a: u64) -> u64 {
    seed ^ a.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}
