//! Conditioned-classifier prediction, accuracy metrics, the cross-dataset report and the
//! activation-cost profile.

mod cost;
mod metrics;
mod report;

use crate::adapters::{ClipVars, Model, TextSide};
use crate::data::{ClipSet, ClipTensors, FrameSampling};
use crate::error::Result;
use crate::graph::Graph;
use crate::parallel::par_map;
use crate::tensor::Tensor;

pub use cost::{activation_cost_profile, CostRecord};
pub use metrics::{argmax, harmonic_mean, top1_accuracy};
pub use report::{evaluate_cross_dataset, Cell, CrossResult, EvalOptions, EvalReport, ReportFormat};

/// Predicted class and the cosine score of every class.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub class: usize,
    pub scores: Vec<f64>,
}

/// Text rows that do not depend on the clip, computed once per evaluation.
pub fn shared_text_rows(model: &Model, text: &TextSide) -> Result<Option<Tensor>> {
    if !model.text_is_shared() {
        return Ok(None);
    }
    let mut g = Graph::new();
    let (rows, _) = model.text_rows(&mut g, text, None)?;
    Ok(Some(g.value(rows).clone()))
}

/// Scores one clip against the adapted classifier.
pub fn classify_clip(model: &Model, text: &TextSide, clip: &ClipTensors, shared: Option<&Tensor>) -> Result<Prediction> {
    let mut g = Graph::new();
    let vars = ClipVars {
        video: g.constant(clip.video.clone()),
        frames2: g.constant(clip.frames2.clone()),
        hands2: g.constant(clip.hands2.clone()),
    };
    let shared = shared.map(|t| g.constant(t.clone()));
    let (logits, _) = model.clip_logits(&mut g, text, &vars, shared, 1.0)?;
    let scores = g.value(logits).data().to_vec();
    Ok(Prediction {
        class: argmax(&scores),
        scores,
    })
}

/// Predictions for every clip of `set`, with `n_eval` uniformly sampled
/// frames. Clips run in parallel; the result is in clip order.
pub fn predict_set(model: &Model, text: &TextSide, set: &ClipSet, n_eval: usize) -> Result<Vec<Prediction>> {
    let shared = shared_text_rows(model, text)?;
    let idx: Vec<usize> = (0..set.len()).collect();
    par_map(&idx, |&i| {
        let clip = set.tensors(i, n_eval, FrameSampling::Uniform)?;
        classify_clip(model, text, &clip, shared.as_ref())
    })
    .into_iter()
    .collect()
}

/// Top-1 accuracy over a whole clip set.
pub fn set_accuracy(model: &Model, text: &TextSide, set: &ClipSet, n_eval: usize) -> Result<f64> {
    let preds: Vec<usize> = predict_set(model, text, set, n_eval)?.iter().map(|p| p.class).collect();
    top1_accuracy(&preds, set.labels())
}
