use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::adapters::{condition_rows, ClipVars, Model, ModelConfig, Strategy, TextSide};
use crate::data::{ClassVocabulary, Task};
use crate::encoders::{build_text_classifier, EncodeCost};
use crate::error::Result;
use crate::graph::Graph;
use crate::tensor::Tensor;

/// Activations spent on the text/conditioning path for one batch, counted
/// on the graph during real forward passes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CostRecord {
    pub strategy: String,
    pub batch: usize,
    pub classes: usize,
    pub prompt_len: usize,
    pub dim: usize,
    pub frames: usize,
    pub encoder_passes: usize,
    pub encoder_activations: usize,
    /// Encoder activations plus the arithmetic that turns text embeddings
    /// into each clip's classifier.
    pub conditioning_activations: usize,
}

/// Runs one batch of `batch` random clips through `strategy` and counts
/// text-side work. Text rows shared by the batch are computed once, as in
/// training.
pub fn activation_cost_profile(
    strategy: &Strategy,
    batch: usize,
    classes: usize,
    prompt_len: usize,
    dim: usize,
    frames: usize,
) -> Result<CostRecord> {
    let config = ModelConfig {
        dim,
        strategy: strategy.clone(),
        prompt_len,
        zero_init: false,
        ..ModelConfig::default()
    };
    let model = Model::new(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x636f7374);
    let names: Vec<String> = (0..classes).map(|c| format!("class {c}")).collect();
    let vocab = ClassVocabulary::new(Task::Noun, &names)?;
    let classifier = build_text_classifier(Tensor::randn(&[classes, dim], 1.0, &mut rng), vocab)?;
    let text = TextSide::new(classifier, model.config.text_encoder()?)?;

    let mut enc = EncodeCost::default();
    let mut conditioning = 0;
    let shared = if model.text_is_shared() {
        let mut g = Graph::new();
        let (rows, c) = model.text_rows(&mut g, &text, None)?;
        enc.add(c);
        conditioning += g.activation_count();
        Some(g.value(rows).clone())
    } else {
        None
    };
    for _ in 0..batch {
        let mut g = Graph::new();
        let clip = ClipVars {
            video: g.constant(Tensor::randn(&[frames, dim], 1.0, &mut rng)),
            frames2: g.constant(Tensor::randn(&[frames, dim], 1.0, &mut rng)),
            hands2: g.constant(Tensor::randn(&[frames, dim], 1.0, &mut rng)),
        };
        let ev = Model::video_embedding(&mut g, clip.video)?;
        let a_v = model.xmic_vector(&mut g, &clip)?;
        let start = g.activation_count();
        let rows = match &shared {
            Some(t) => g.constant(t.clone()),
            None => {
                let (rows, c) = model.text_rows(&mut g, &text, Some(ev))?;
                enc.add(c);
                rows
            }
        };
        if let Some(a_v) = a_v {
            condition_rows(&mut g, rows, a_v, model.config.alpha, model.config.norm)?;
        }
        conditioning += g.activation_count() - start;
    }
    Ok(CostRecord {
        strategy: strategy.to_string(),
        batch,
        classes,
        prompt_len,
        dim,
        frames,
        encoder_passes: enc.passes,
        encoder_activations: enc.activations,
        conditioning_activations: conditioning,
    })
}
