//! Dataset-facing plumbing: the binary embedding store, the label manifest,
//! class vocabularies, frame sampling and shared/novel partitioning.

mod clipset;
mod manifest;
mod partition;
mod sampling;
mod store;
mod vocab;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, XmicError};

pub use clipset::{ClipSet, ClipTensors};
pub use manifest::{read_manifest, write_manifest, ManifestEntry};
pub use partition::{partition_shared_novel, Partition};
pub use sampling::{sample_frames, FrameSampling};
pub use store::{read_store, write_store, STORE_MAGIC, STORE_VERSION};
pub use vocab::{canonicalize, ClassVocabulary, Task};

/// Row-major `F x D` matrix of 32-bit embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings {
    frames: usize,
    dim: usize,
    data: Vec<f32>,
}

impl Embeddings {
    pub fn new(frames: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if frames == 0 || dim == 0 {
            return Err(XmicError::DimMismatch(format!(
                "embedding matrix must be non-empty, got {frames}x{dim}"
            )));
        }
        if data.len() != frames * dim {
            return Err(XmicError::DimMismatch(format!(
                "{frames}x{dim} embeddings need {} values, got {}",
                frames * dim,
                data.len()
            )));
        }
        Ok(Self { frames, dim, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(XmicError::DimMismatch("ragged embedding rows".into()));
        }
        Self::new(rows.len(), dim, rows.concat())
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Gathers the given frames as a `[idx.len(), D]` 64-bit matrix.
    pub fn gather(&self, idx: &[usize]) -> Vec<f64> {
        idx.iter()
            .flat_map(|&i| self.row(i.min(self.frames - 1)).iter().map(|&v| f64::from(v)))
            .collect()
    }
}

/// Labels attached to a clip from the manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipLabels {
    pub noun: String,
    pub verb: String,
    pub dataset: String,
}

impl ClipLabels {
    pub fn for_task(&self, task: Task) -> &str {
        match task {
            Task::Noun => &self.noun,
            Task::Verb => &self.verb,
        }
    }
}

/// One clip: full-frame embeddings, optional hand-crop embeddings, labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipRecord {
    pub id: String,
    pub full: Embeddings,
    pub hand: Option<Embeddings>,
    pub labels: Option<ClipLabels>,
}

impl ClipRecord {
    pub fn frames(&self) -> usize {
        self.full.frames()
    }

    pub fn dim(&self) -> usize {
        self.full.dim()
    }

    /// Hand stream, or the full-frame stream when no hands were detected.
    pub fn hand_or_full(&self) -> &Embeddings {
        self.hand.as_ref().unwrap_or(&self.full)
    }

    pub fn label(&self, task: Task) -> Result<&str> {
        self.labels
            .as_ref()
            .map(|l| l.for_task(task))
            .filter(|l| !l.is_empty())
            .ok_or_else(|| XmicError::MissingLabel(self.id.clone()))
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if let Some(h) = &self.hand {
            if h.frames() != self.full.frames() || h.dim() != self.full.dim() {
                return Err(XmicError::DimMismatch(format!(
                    "clip {}: hand stream is {}x{} but full stream is {}x{}",
                    self.id,
                    h.frames(),
                    h.dim(),
                    self.full.frames(),
                    self.full.dim()
                )));
            }
        }
        Ok(())
    }
}

/// Attaches manifest labels to store records by id. Every record must be
/// listed in the manifest.
pub fn attach_labels(records: &mut [ClipRecord], manifest: &[ManifestEntry]) -> Result<()> {
    let by_id: std::collections::HashMap<&str, &ManifestEntry> =
        manifest.iter().map(|m| (m.id.as_str(), m)).collect();
    for r in records.iter_mut() {
        let m = by_id
            .get(r.id.as_str())
            .ok_or_else(|| XmicError::MissingLabel(r.id.clone()))?;
        if m.frames != r.frames() {
            return Err(XmicError::DimMismatch(format!(
                "clip {}: manifest says {} frames, store has {}",
                r.id,
                m.frames,
                r.frames()
            )));
        }
        r.labels = Some(ClipLabels {
            noun: m.noun.clone(),
            verb: m.verb.clone(),
            dataset: m.dataset.clone(),
        });
    }
    Ok(())
}

/// Writes `bytes` to `path` through a temporary file in the same directory
/// and an atomic rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| XmicError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| XmicError::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| XmicError::io(path, e))?;
    tmp.persist(path).map_err(|e| XmicError::io(path, e.error))?;
    Ok(())
}
