use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::write_atomic;
use crate::error::{Result, XmicError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Noun,
    Verb,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Noun => "noun",
            Task::Verb => "verb",
        })
    }
}

impl FromStr for Task {
    type Err = XmicError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noun" => Ok(Task::Noun),
            "verb" => Ok(Task::Verb),
            other => Err(XmicError::Config(format!("unknown task {other:?}"))),
        }
    }
}

/// Lowercases, trims and collapses internal whitespace.
pub fn canonicalize(name: &str) -> String {
    name.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Ordered, duplicate-free list of class names for one task.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassVocabulary {
    task: Task,
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl ClassVocabulary {
    pub fn new<S: AsRef<str>>(task: Task, names: &[S]) -> Result<Self> {
        let mut index = HashMap::new();
        let mut kept = Vec::with_capacity(names.len());
        for n in names {
            let c = canonicalize(n.as_ref());
            if c.is_empty() {
                return Err(XmicError::EmptyClassName);
            }
            if index.insert(c.clone(), kept.len()).is_some() {
                return Err(XmicError::Format(format!("duplicate class name {c:?}")));
            }
            kept.push(n.as_ref().trim().to_string());
        }
        if kept.is_empty() {
            return Err(XmicError::Empty("vocabulary has no classes"));
        }
        Ok(Self {
            task,
            names: kept,
            index,
        })
    }

    /// One class name per line; blank lines are skipped.
    pub fn parse(task: Task, text: &str) -> Result<Self> {
        let names: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        Self::new(task, &names)
    }

    pub fn read(path: &Path, task: Task) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| XmicError::io(path, e))?;
        Self::parse(task, &text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = self.names.join("\n");
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Index of `name` after canonicalization.
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(&canonicalize(name)).copied()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index_of(name).is_some()
    }
}
