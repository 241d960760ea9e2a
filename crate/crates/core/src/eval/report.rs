use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{argmax, harmonic_mean, predict_set, top1_accuracy};
use crate::adapters::{Model, TextSide};
use crate::data::{ClipSet, Partition};
use crate::error::{Result, XmicError};

/// Top-1 accuracy (percent) over `clips` clips.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub accuracy: f64,
    pub clips: usize,
}

impl Cell {
    fn from(preds: &[usize], labels: &[usize]) -> Result<Option<Cell>> {
        if preds.is_empty() {
            return Ok(None);
        }
        Ok(Some(Cell {
            accuracy: top1_accuracy(preds, labels)?,
            clips: preds.len(),
        }))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossResult {
    pub dataset: String,
    pub all: Cell,
    pub shared: Option<Cell>,
    pub novel: Option<Cell>,
    pub hm_shared_novel: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub strategy: String,
    pub within_dataset: String,
    pub within: Cell,
    pub cross: Option<CrossResult>,
    pub hm_within_cross: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub frames: usize,
    /// Score shared (novel) clips against shared (novel) classifier rows
    /// only, instead of the full vocabulary.
    pub restrict_rows: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            frames: 16,
            restrict_rows: false,
        }
    }
}

fn check_vocab(set: &ClipSet, text: &TextSide) -> Result<()> {
    if set.vocab() != text.classifier.vocab() {
        return Err(XmicError::VocabularyMismatch(format!(
            "clips are labelled with a {}-class vocabulary but the classifier has {} classes in a different order",
            set.vocab().len(),
            text.classifier.vocab().len()
        )));
    }
    Ok(())
}

fn dataset_name(set: &ClipSet) -> String {
    set.record(0)
        .labels
        .as_ref()
        .map(|l| l.dataset.clone())
        .unwrap_or_default()
}

/// Within-dataset accuracy on `within`, and when `cross` is given, accuracy
/// on the second dataset with its own vocabulary, split into shared and
/// novel classes by `partition`.
pub fn evaluate_cross_dataset(
    model: &Model,
    within: (&ClipSet, &TextSide),
    cross: Option<(&ClipSet, &TextSide)>,
    partition: Option<&Partition>,
    options: &EvalOptions,
) -> Result<EvalReport> {
    let (wset, wtext) = within;
    check_vocab(wset, wtext)?;
    let wpreds: Vec<usize> = predict_set(model, wtext, wset, options.frames)?
        .iter()
        .map(|p| p.class)
        .collect();
    let within_cell = Cell::from(&wpreds, wset.labels())?.expect("clip sets are non-empty");

    let cross = match cross {
        None => None,
        Some((cset, ctext)) => {
            check_vocab(cset, ctext)?;
            let vocab = cset.vocab();
            let shared_class: Option<Vec<bool>> = partition
                .map(|p| {
                    if let Some(n) = p.shared.iter().chain(&p.novel_b).find(|n| !vocab.contains(n)) {
                        return Err(XmicError::VocabularyMismatch(format!(
                            "partition class {n:?} is not in the evaluation vocabulary"
                        )));
                    }
                    Ok(vocab.names().iter().map(|n| p.is_shared(n)).collect())
                })
                .transpose()?;
            let preds = predict_set(model, ctext, cset, options.frames)?;
            let all: Vec<usize> = preds.iter().map(|p| p.class).collect();
            let labels = cset.labels();
            let all_cell = Cell::from(&all, labels)?.expect("clip sets are non-empty");
            let (mut shared, mut novel) = (None, None);
            let mut hm = None;
            if let Some(flags) = &shared_class {
                let mut split = [(Vec::new(), Vec::new()), (Vec::new(), Vec::new())];
                for (p, &l) in preds.iter().zip(labels) {
                    let side = usize::from(!flags[l]);
                    let class = if options.restrict_rows {
                        let masked: Vec<f64> = p
                            .scores
                            .iter()
                            .zip(flags)
                            .map(|(&s, &f)| if f == flags[l] { s } else { f64::NEG_INFINITY })
                            .collect();
                        argmax(&masked)
                    } else {
                        p.class
                    };
                    split[side].0.push(class);
                    split[side].1.push(l);
                }
                shared = Cell::from(&split[0].0, &split[0].1)?;
                novel = Cell::from(&split[1].0, &split[1].1)?;
                if let (Some(s), Some(n)) = (shared, novel) {
                    hm = Some(harmonic_mean(s.accuracy, n.accuracy)?);
                }
            }
            Some(CrossResult {
                dataset: dataset_name(cset),
                all: all_cell,
                shared,
                novel,
                hm_shared_novel: hm,
            })
        }
    };
    let hm_within_cross = cross
        .as_ref()
        .map(|c| harmonic_mean(within_cell.accuracy, c.all.accuracy))
        .transpose()?;
    Ok(EvalReport {
        task: wset.task().to_string(),
        strategy: model.config.strategy.to_string(),
        within_dataset: dataset_name(wset),
        within: within_cell,
        cross,
        hm_within_cross,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Table,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = XmicError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(Self::Json),
            "table" => Ok(Self::Table),
            "csv" => Ok(Self::Csv),
            _ => Err(XmicError::Config(format!("unknown format {s:?}; use json, table or csv"))),
        }
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"))
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl EvalReport {
    pub const COLUMNS: [&'static str; 6] = ["within", "cross", "hm", "shared", "novel", "hm_sn"];

    /// The six numeric columns in table order; absent cells are `None`.
    pub fn values(&self) -> [Option<f64>; 6] {
        let c = self.cross.as_ref();
        [
            Some(self.within.accuracy),
            c.map(|c| c.all.accuracy),
            self.hm_within_cross,
            c.and_then(|c| c.shared).map(|s| s.accuracy),
            c.and_then(|c| c.novel).map(|s| s.accuracy),
            c.and_then(|c| c.hm_shared_novel),
        ]
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Rows labelled by `label`, one report each, as an aligned table.
    pub fn table(rows: &[(String, EvalReport)]) -> String {
        let width = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max("variant".len());
        let mut out = format!("{:<width$}", "variant");
        for c in Self::COLUMNS {
            let _ = write!(out, " {c:>8}");
        }
        out.push('\n');
        for (label, r) in rows {
            let _ = write!(out, "{label:<width$}");
            for v in r.values() {
                let _ = write!(out, " {:>8}", fmt_opt(v));
            }
            out.push('\n');
        }
        out
    }

    pub fn csv(rows: &[(String, EvalReport)]) -> String {
        let mut out = format!("variant,{}\n", Self::COLUMNS.join(","));
        for (label, r) in rows {
            let vals: Vec<String> = r
                .values()
                .iter()
                .map(|v| v.map_or_else(String::new, |x| format!("{x:.4}")))
                .collect();
            let _ = writeln!(out, "{},{}", csv_field(label), vals.join(","));
        }
        out
    }
}
