use std::collections::HashMap;

use super::{sample_frames, ClassVocabulary, ClipRecord, FrameSampling, Task};
use crate::error::{Result, XmicError};
use crate::tensor::Tensor;

/// Labelled clips from the V stream, paired by id with the V2 stream (the
/// V stream itself when no second store is given).
#[derive(Clone, Debug)]
pub struct ClipSet {
    v: Vec<ClipRecord>,
    v2: Option<Vec<ClipRecord>>,
    labels: Vec<usize>,
    vocab: ClassVocabulary,
}

/// Sampled `[N, D]` inputs of one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipTensors {
    pub video: Tensor,
    pub frames2: Tensor,
    pub hands2: Tensor,
}

impl ClipSet {
    pub fn new(v: Vec<ClipRecord>, v2: Option<Vec<ClipRecord>>, vocab: &ClassVocabulary) -> Result<Self> {
        if v.is_empty() {
            return Err(XmicError::Empty("clip set"));
        }
        let task = vocab.task();
        let mut labels = Vec::with_capacity(v.len());
        for r in &v {
            let name = r.label(task)?;
            let idx = vocab.index_of(name).ok_or_else(|| XmicError::UnknownLabel {
                clip: r.id.clone(),
                label: name.to_string(),
            })?;
            labels.push(idx);
        }
        let d = v[0].dim();
        if let Some(bad) = v.iter().find(|r| r.dim() != d) {
            return Err(XmicError::DimMismatch(format!("clip {} has width {}, expected {d}", bad.id, bad.dim())));
        }
        let v2 = match v2 {
            None => None,
            Some(other) => {
                let mut by_id: HashMap<String, ClipRecord> = other.into_iter().map(|r| (r.id.clone(), r)).collect();
                let mut aligned = Vec::with_capacity(v.len());
                for r in &v {
                    let s = by_id
                        .remove(&r.id)
                        .ok_or_else(|| XmicError::Format(format!("clip {} missing from the second store", r.id)))?;
                    if s.dim() != d {
                        return Err(XmicError::DimMismatch(format!(
                            "second store has width {}, first has {d}",
                            s.dim()
                        )));
                    }
                    if s.frames() != r.frames() {
                        return Err(XmicError::DimMismatch(format!(
                            "clip {}: {} frames in the first store, {} in the second",
                            r.id,
                            r.frames(),
                            s.frames()
                        )));
                    }
                    aligned.push(s);
                }
                Some(aligned)
            }
        };
        Ok(Self {
            v,
            v2,
            labels,
            vocab: vocab.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.v[0].dim()
    }

    pub fn task(&self) -> Task {
        self.vocab.task()
    }

    pub fn vocab(&self) -> &ClassVocabulary {
        &self.vocab
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn record(&self, i: usize) -> &ClipRecord {
        &self.v[i]
    }

    pub fn second(&self, i: usize) -> &ClipRecord {
        self.v2.as_ref().map_or(&self.v[i], |s| &s[i])
    }

    /// Samples `n` frame indices of clip `i` and gathers all three streams
    /// at those indices. Missing hand crops fall back to the full frames.
    pub fn tensors(&self, i: usize, n: usize, mode: FrameSampling) -> Result<ClipTensors> {
        let r = &self.v[i];
        let idx = sample_frames(r.frames(), n, mode);
        let d = r.dim();
        let s = self.second(i);
        let shape = vec![idx.len(), d];
        Ok(ClipTensors {
            video: Tensor::new(shape.clone(), r.full.gather(&idx))?,
            frames2: Tensor::new(shape.clone(), s.full.gather(&idx))?,
            hands2: Tensor::new(shape, s.hand_or_full().gather(&idx))?,
        })
    }
}
