use std::collections::HashSet;

use serde::Serialize;

use super::vocab::{canonicalize, ClassVocabulary};
use crate::error::{Result, XmicError};

/// Shared and dataset-specific class names of two vocabularies, in the
/// order they appear in their source vocabulary.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Partition {
    pub shared: Vec<String>,
    pub novel_a: Vec<String>,
    pub novel_b: Vec<String>,
}

impl Partition {
    pub fn counts(&self) -> (usize, usize, usize) {
        (self.shared.len(), self.novel_a.len(), self.novel_b.len())
    }

    pub fn is_shared(&self, name: &str) -> bool {
        let c = canonicalize(name);
        self.shared.contains(&c)
    }
}

/// Classes are shared when their canonical names match exactly.
pub fn partition_shared_novel(a: &ClassVocabulary, b: &ClassVocabulary) -> Result<Partition> {
    if a.task() != b.task() {
        return Err(XmicError::TaskMismatch(a.task().to_string(), b.task().to_string()));
    }
    let canon = |v: &ClassVocabulary| -> Vec<String> { v.names().iter().map(|n| canonicalize(n)).collect() };
    let ca = canon(a);
    let cb = canon(b);
    let sa: HashSet<&String> = ca.iter().collect();
    let sb: HashSet<&String> = cb.iter().collect();
    Ok(Partition {
        shared: ca.iter().filter(|n| sb.contains(n)).cloned().collect(),
        novel_a: ca.iter().filter(|n| !sb.contains(n)).cloned().collect(),
        novel_b: cb.iter().filter(|n| !sa.contains(n)).cloned().collect(),
    })
}
