use rand::Rng;

use crate::encoders::{EncodeCost, TextClassifier, ToyTextEncoder};
use crate::error::{Result, XmicError};
use crate::graph::{Graph, Var};
use crate::nn::{join, Linear, Module, INIT_STD};
use crate::tensor::Tensor;

/// Frozen text side of a model: the class embeddings `e_t` and, when prompt
/// strategies are in play, the toy encoder together with its prompt-free
/// encodings of every class name.
#[derive(Clone, Debug)]
pub struct TextSide {
    pub classifier: TextClassifier,
    encoder: Option<ToyTextEncoder>,
    plain: Option<Tensor>,
}

impl TextSide {
    pub fn new(classifier: TextClassifier, encoder: Option<ToyTextEncoder>) -> Result<Self> {
        let plain = match &encoder {
            Some(enc) => {
                if enc.out_dim() != classifier.dim() {
                    return Err(XmicError::DimMismatch(format!(
                        "text encoder emits width {} but the classifier has width {}",
                        enc.out_dim(),
                        classifier.dim()
                    )));
                }
                let mut g = Graph::new();
                let (rows, _) = enc.encode(&mut g, classifier.vocab().names(), None)?;
                Some(g.value(rows).clone())
            }
            None => None,
        };
        Ok(Self {
            classifier,
            encoder,
            plain,
        })
    }

    pub fn encoder(&self) -> Option<&ToyTextEncoder> {
        self.encoder.as_ref()
    }

    pub fn classes(&self) -> usize {
        self.classifier.classes()
    }

    fn require_encoder(&self) -> Result<(&ToyTextEncoder, &Tensor)> {
        match (&self.encoder, &self.plain) {
            (Some(e), Some(p)) => Ok((e, p)),
            _ => Err(XmicError::IncompatibleComposition(
                "prompt strategies need a text encoder".into(),
            )),
        }
    }

    /// `e_t + enc(context, name) - enc(name)` for every class: the prompt's
    /// effect is added to the frozen embeddings, so an encoder that ignores
    /// the context leaves them untouched.
    fn encode_with(&self, g: &mut Graph, context: Option<Var>) -> Result<(Var, EncodeCost)> {
        let (enc, plain) = self.require_encoder()?;
        let (rows, cost) = enc.encode(g, self.classifier.vocab().names(), context)?;
        let plain = g.constant(plain.clone());
        let delta = g.sub(rows, plain)?;
        let base = g.constant(self.classifier.raw().clone());
        Ok((g.add(base, delta)?, cost))
    }
}

/// `P` context vectors shared by every class.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptLearner {
    /// `[P, D_tok]`; absent when `P = 0`.
    pub vectors: Option<Tensor>,
}

impl PromptLearner {
    pub fn new<R: Rng + ?Sized>(len: usize, token_dim: usize, rng: &mut R) -> Self {
        let vectors = (len > 0).then(|| Tensor::randn(&[len, token_dim], INIT_STD, rng).with_requires_grad(true));
        Self { vectors }
    }

    pub fn len(&self) -> usize {
        self.vectors.as_ref().map_or(0, |v| v.rows())
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_none()
    }
}

impl Module for PromptLearner {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        if let Some(v) = &self.vectors {
            f(join(prefix, "vectors"), v);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        if let Some(v) = &mut self.vectors {
            f(join(prefix, "vectors"), v);
        }
    }
}

/// Shared prompts plus a map from the video embedding to a token-space
/// offset added to every prompt vector of that video.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionalPromptAdapter {
    pub prompts: PromptLearner,
    pub meta: Linear,
}

impl ConditionalPromptAdapter {
    pub fn new<R: Rng + ?Sized>(len: usize, dim: usize, token_dim: usize, zero_meta: bool, rng: &mut R) -> Result<Self> {
        if len == 0 {
            return Err(XmicError::IncompatibleComposition(
                "conditional prompts need at least one context vector".into(),
            ));
        }
        let prompts = PromptLearner::new(len, token_dim, rng);
        let meta = if zero_meta {
            Linear::zeros(dim, token_dim)
        } else {
            Linear::new(dim, token_dim, rng)
        };
        Ok(Self { prompts, meta })
    }
}

impl Module for ConditionalPromptAdapter {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.prompts.visit(&join(prefix, "prompts"), f);
        self.meta.visit(&join(prefix, "meta"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.prompts.visit_mut(&join(prefix, "prompts"), f);
        self.meta.visit_mut(&join(prefix, "meta"), f);
    }
}

/// Class embeddings with the shared prompts prepended: `[C, D]`, before the
/// final normalization. One encoder pass per class regardless of batch size.
pub fn prompt_forward(g: &mut Graph, learner: &PromptLearner, text: &TextSide) -> Result<(Var, EncodeCost)> {
    let context = learner.vectors.as_ref().map(|v| g.param(v));
    text.encode_with(g, context)
}

/// Class embeddings for one video: the prompts are shifted by
/// `meta(video)` before encoding. One encoder pass per (video, class).
pub fn cocoop_forward(
    g: &mut Graph,
    adapter: &ConditionalPromptAdapter,
    text: &TextSide,
    video: Var,
) -> Result<(Var, EncodeCost)> {
    let prompts = adapter
        .prompts
        .vectors
        .as_ref()
        .ok_or_else(|| XmicError::IncompatibleComposition("empty conditional prompts".into()))?;
    let p = g.param(prompts);
    let offset = adapter.meta.forward(g, video)?;
    let context = g.add_row(p, offset)?;
    text.encode_with(g, Some(context))
}

/// Value-level [`cocoop_forward`] for a `[B, D]` batch of unit video
/// embeddings; returns one normalized classifier per video.
pub fn cocoop_classifiers(
    adapter: &ConditionalPromptAdapter,
    text: &TextSide,
    videos: &Tensor,
) -> Result<(Vec<TextClassifier>, EncodeCost)> {
    let mut out = Vec::with_capacity(videos.rows());
    let mut cost = EncodeCost::default();
    for b in 0..videos.rows() {
        let mut g = Graph::new();
        let v = g.constant(Tensor::vector(videos.row(b).to_vec()));
        let (rows, c) = cocoop_forward(&mut g, adapter, text, v)?;
        cost.add(c);
        out.push(crate::encoders::build_text_classifier(
            g.value(rows).clone(),
            text.classifier.vocab().clone(),
        )?);
    }
    Ok((out, cost))
}
