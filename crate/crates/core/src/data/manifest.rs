//! JSON-lines label manifest: one `{id, noun, verb, dataset, frames}` object
//! per line.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::write_atomic;
use crate::error::{Result, XmicError};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub noun: String,
    pub verb: String,
    pub dataset: String,
    pub frames: usize,
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let e: ManifestEntry = serde_json::from_str(line)
            .map_err(|err| XmicError::Format(format!("manifest line {}: {err}", i + 1)))?;
        if !seen.insert(e.id.clone()) {
            return Err(XmicError::Format(format!("manifest repeats clip id {:?}", e.id)));
        }
        out.push(e);
    }
    Ok(out)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| XmicError::io(path, e))?;
    parse_manifest(&text)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut text = String::new();
    for e in entries {
        text.push_str(&serde_json::to_string(e)?);
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}
