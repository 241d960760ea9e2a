//! AdamW and the training loop: frame sampling, conditioned-classifier logits, cross-entropy
//! and parameter updates on the adapter side only.

mod optim;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::{ClipVars, Model, TextSide};
use crate::data::{ClipSet, FrameSampling, Partition, Task};
use crate::error::{Result, XmicError};
use crate::eval::{evaluate_cross_dataset, EvalOptions, EvalReport};
use crate::graph::Graph;
use crate::nn::Module;
use crate::parallel::par_map;

pub use optim::{adamw_step, adamw_step_module, AdamW, OptimizerState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub frames: usize,
    /// Frames per clip at evaluation; defaults to `frames`.
    pub eval_frames: Option<usize>,
    pub temperature: f64,
    pub task: Task,
    /// Global gradient-norm cap; off by default.
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let opt = AdamW::default();
        Self {
            lr: opt.lr,
            beta1: opt.beta1,
            beta2: opt.beta2,
            weight_decay: opt.weight_decay,
            eps: opt.eps,
            epochs: 15,
            batch_size: 64,
            frames: 16,
            eval_frames: None,
            temperature: 0.01,
            task: Task::Noun,
            grad_clip: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(XmicError::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0 < self.beta1 && self.beta1 < self.beta2 && self.beta2 < 1.0) {
            return bad(format!("need 0 < beta1 < beta2 < 1, got {} and {}", self.beta1, self.beta2));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if self.weight_decay < 0.0 || self.eps <= 0.0 {
            return bad("weight decay must be non-negative and eps positive".into());
        }
        if self.batch_size == 0 || self.frames == 0 || self.eval_frames == Some(0) {
            return bad("batch size and frame counts must be positive".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("grad_clip must be positive, got {c}"));
            }
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            weight_decay: self.weight_decay,
            eps: self.eps,
        }
    }

    pub fn eval_frames(&self) -> usize {
        self.eval_frames.unwrap_or(self.frames)
    }
}

/// Seed for the frames of clip `clip` in epoch `epoch`.
fn frame_seed(seed: u64, epoch: usize, clip: usize) -> u64 {
    let mut z = seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (clip as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

struct ClipResult {
    loss: f64,
    params: Vec<Option<Vec<f64>>>,
    rows: Option<Vec<f64>>,
}

/// Mean cross-entropy over `batch` and its gradient for every trainable
/// tensor of `model` (visit order). Each clip is differentiated on its own
/// graph; the per-clip gradients are summed in batch order, so the result
/// does not depend on the thread count.
pub fn batch_gradients(
    model: &Model,
    text: &TextSide,
    set: &ClipSet,
    batch: &[(usize, FrameSampling)],
    frames: usize,
    temperature: f64,
) -> Result<(f64, Vec<Vec<f64>>)> {
    if batch.is_empty() {
        return Err(XmicError::Empty("training batch"));
    }
    let mut trainable = Vec::new();
    model.visit("", &mut |_, t| {
        if t.requires_grad() {
            trainable.push(t);
        }
    });
    let scale = 1.0 / batch.len() as f64;

    let mut text_graph = Graph::new();
    let shared = if model.text_is_shared() {
        let (rows, _) = model.text_rows(&mut text_graph, text, None)?;
        Some(rows)
    } else {
        None
    };
    let shared_value = shared.map(|r| text_graph.value(r).clone());
    let rows_trainable = model.text_has_params();

    let results = par_map(batch, |&(i, sampling)| -> Result<ClipResult> {
        let t = set.tensors(i, frames, sampling)?;
        let mut g = Graph::new();
        let clip = ClipVars {
            video: g.constant(t.video),
            frames2: g.constant(t.frames2),
            hands2: g.constant(t.hands2),
        };
        let rows = shared_value.as_ref().map(|v| {
            if rows_trainable {
                g.variable(v.clone())
            } else {
                g.constant(v.clone())
            }
        });
        let (logits, _) = model.clip_logits(&mut g, text, &clip, rows, temperature)?;
        let ce = g.cross_entropy(logits, &[set.labels()[i]])?;
        let loss = g.value(ce).data()[0];
        let scaled = g.scale(ce, scale);
        let grads = g.backward(scaled)?;
        Ok(ClipResult {
            loss,
            params: trainable.iter().map(|t| grads.of_param(t).map(<[f64]>::to_vec)).collect(),
            rows: rows.and_then(|r| grads.get(r).map(<[f64]>::to_vec)),
        })
    });

    let mut total: Vec<Vec<f64>> = trainable.iter().map(|t| vec![0.0; t.len()]).collect();
    let mut rows_grad: Option<Vec<f64>> = None;
    let mut loss = 0.0;
    for r in results {
        let r = r?;
        loss += r.loss;
        for (acc, g) in total.iter_mut().zip(&r.params) {
            if let Some(g) = g {
                acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
        if let Some(g) = r.rows {
            match &mut rows_grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => rows_grad = Some(g),
            }
        }
    }

    // Push the summed row gradient through the shared text pass.
    if let (Some(rows), Some(gr)) = (shared, rows_grad) {
        let shape = text_graph.value(rows).shape().to_vec();
        let seed = text_graph.constant(crate::tensor::Tensor::new(shape, gr)?);
        let surrogate = text_graph.dot(rows, seed)?;
        let grads = text_graph.backward(surrogate)?;
        for (acc, t) in total.iter_mut().zip(&trainable) {
            if let Some(g) = grads.of_param(t) {
                acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
    }
    Ok((loss * scale, total))
}

fn clip_gradients(grads: &mut [Vec<f64>], max_norm: f64) {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
}

/// One optimization step on `batch` (clip indices); returns the batch loss
/// before the update.
pub fn train_step(
    model: &mut Model,
    state: &mut OptimizerState,
    text: &TextSide,
    set: &ClipSet,
    batch: &[usize],
    epoch: usize,
    config: &TrainConfig,
) -> Result<f64> {
    let sampled: Vec<(usize, FrameSampling)> = batch
        .iter()
        .map(|&i| {
            let seed = frame_seed(config.seed, epoch, i);
            (i, FrameSampling::Random { seed })
        })
        .collect();
    let (loss, mut grads) = batch_gradients(model, text, set, &sampled, config.frames, config.temperature)?;
    if let Some(c) = config.grad_clip {
        clip_gradients(&mut grads, c);
    }
    adamw_step_module(model, &grads, state, &config.optimizer())?;
    Ok(loss)
}

/// Evaluation run at the end of every epoch.
pub struct EvalHook<'a> {
    pub within: (&'a ClipSet, &'a TextSide),
    pub cross: Option<(&'a ClipSet, &'a TextSide)>,
    pub partition: Option<&'a Partition>,
    pub options: EvalOptions,
}

impl EvalHook<'_> {
    pub fn run(&self, model: &Model) -> Result<EvalReport> {
        evaluate_cross_dataset(model, self.within, self.cross, self.partition, &self.options)
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub step: u64,
    pub loss: Option<f64>,
    pub lr: f64,
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub eval: BTreeMap<String, f64>,
}

fn eval_columns(r: &EvalReport) -> BTreeMap<String, f64> {
    EvalReport::COLUMNS
        .iter()
        .zip(r.values())
        .filter_map(|(k, v)| v.map(|v| (k.to_string(), v)))
        .collect()
}

pub struct TrainOutcome {
    pub model: Model,
    pub metrics: Vec<EpochMetrics>,
    pub frozen_hash: String,
}

impl TrainOutcome {
    /// Metrics as JSON lines.
    pub fn metrics_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for m in &self.metrics {
            out.push_str(&serde_json::to_string(m)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// SHA-256 over every frozen text-side tensor.
pub fn frozen_hash(text: &TextSide) -> String {
    let mut h = Sha256::new();
    h.update(text.classifier.raw().to_le_bytes());
    if let Some(enc) = text.encoder() {
        h.update(enc.fingerprint());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Trains `model` on `set` for `config.epochs` epochs with a seeded clip
/// order per epoch. Logs an initial evaluation and one line per epoch.
pub fn train_run(
    mut model: Model,
    text: &TextSide,
    set: &ClipSet,
    config: &TrainConfig,
    eval: Option<&EvalHook<'_>>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if set.task() != config.task {
        return Err(XmicError::TaskMismatch(set.task().to_string(), config.task.to_string()));
    }
    let before = frozen_hash(text);
    let mut state = OptimizerState::new();
    let mut metrics = Vec::with_capacity(config.epochs + 1);
    let evaluate = |m: &Model| -> Result<BTreeMap<String, f64>> {
        eval.map(|h| h.run(m).map(|r| eval_columns(&r)))
            .transpose()
            .map(Option::unwrap_or_default)
    };
    metrics.push(EpochMetrics {
        epoch: 0,
        step: 0,
        loss: None,
        lr: config.lr,
        eval: evaluate(&model)?,
    });
    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..set.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(frame_seed(config.seed, epoch, usize::MAX));
        order.shuffle(&mut rng);
        let mut weighted = 0.0;
        for batch in order.chunks(config.batch_size) {
            let loss = train_step(&mut model, &mut state, text, set, batch, epoch, config)?;
            weighted += loss * batch.len() as f64;
        }
        metrics.push(EpochMetrics {
            epoch,
            step: state.t,
            loss: Some(weighted / set.len() as f64),
            lr: config.lr,
            eval: evaluate(&model)?,
        });
    }
    let after = frozen_hash(text);
    if after != before {
        return Err(XmicError::Config("frozen text tensors changed during training".into()));
    }
    Ok(TrainOutcome {
        model,
        metrics,
        frozen_hash: after,
    })
}
