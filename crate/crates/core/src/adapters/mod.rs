//! The X-MIC adapter, the baseline adapters it is compared with, and the
//! composed model used by training and evaluation.

mod bottleneck;
mod checkpoint;
mod prompt;
mod xmic;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::encoders::{EncodeCost, ToyTextEncoder};
use crate::error::{Result, XmicError};
use crate::graph::{Graph, Var};
use crate::nn::{cosine_logits, join, Module};
use crate::tensor::Tensor;

pub use bottleneck::{BottleneckAdapter, DEFAULT_RATIO};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use prompt::{cocoop_classifiers, cocoop_forward, prompt_forward, ConditionalPromptAdapter, PromptLearner, TextSide};
pub use xmic::{
    condition_classifier, condition_rows, ego_spatial_block, temporal_block, NormFlags, SpatialMode, XmicAdapter,
    XmicOptions, TEMPORAL_DEPTH,
};

/// One building block of a composed model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Component {
    /// Shared learnable prompts in the text encoder (early fusion, uni-modal).
    EarlyUni,
    /// Video-conditioned prompts (early fusion, cross-modal).
    EarlyCross,
    Xmic,
    /// Bottleneck adapter on the text embeddings.
    TextAdapter,
    /// Bottleneck adapter on the video embedding.
    VideoAdapter,
}

impl Component {
    pub fn name(self) -> &'static str {
        match self {
            Component::EarlyUni => "early-uni",
            Component::EarlyCross => "early-cross",
            Component::Xmic => "xmic",
            Component::TextAdapter => "tt",
            Component::VideoAdapter => "vv",
        }
    }
}

impl FromStr for Component {
    type Err = XmicError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "early-uni" | "coop" => Ok(Component::EarlyUni),
            "early-cross" | "cocoop" => Ok(Component::EarlyCross),
            "xmic" | "x-mic" => Ok(Component::Xmic),
            "tt" => Ok(Component::TextAdapter),
            "vv" => Ok(Component::VideoAdapter),
            other => Err(XmicError::Config(format!("unknown strategy component {other:?}"))),
        }
    }
}

/// `+`-separated list of components; the empty list is plain zero-shot
/// classification (`zero-shot`).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Strategy(pub Vec<Component>);

impl Strategy {
    pub fn xmic() -> Self {
        Strategy(vec![Component::Xmic])
    }

    pub fn has(&self, c: Component) -> bool {
        self.0.contains(&c)
    }

    /// Rejects repeated components and mixing both prompt styles.
    pub fn validate(&self) -> Result<()> {
        for (i, c) in self.0.iter().enumerate() {
            if self.0[..i].contains(c) {
                return Err(XmicError::IncompatibleComposition(format!("{} listed twice", c.name())));
            }
        }
        if self.has(Component::EarlyUni) && self.has(Component::EarlyCross) {
            return Err(XmicError::IncompatibleComposition(
                "early-uni and early-cross both own the prompt slot".into(),
            ));
        }
        Ok(())
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return f.write_str("zero-shot");
        }
        let names: Vec<&str> = self.0.iter().map(|c| c.name()).collect();
        f.write_str(&names.join("+"))
    }
}

impl FromStr for Strategy {
    type Err = XmicError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("zero-shot") || s.eq_ignore_ascii_case("none") {
            return Ok(Strategy::default());
        }
        let parts = s.split('+').map(str::parse).collect::<Result<Vec<_>>>()?;
        let st = Strategy(parts);
        st.validate()?;
        Ok(st)
    }
}

impl Serialize for Strategy {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Strategy {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Everything needed to rebuild a model's structure and initialization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub dim: usize,
    pub strategy: Strategy,
    pub alpha: f64,
    pub norm: NormFlags,
    pub spatial: SpatialMode,
    pub temporal: bool,
    pub zero_init: bool,
    pub prompt_len: usize,
    pub bottleneck_ratio: f64,
    pub text_encoder_seed: u64,
    pub text_context: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            strategy: Strategy::xmic(),
            alpha: 1.0,
            norm: NormFlags::N1,
            spatial: SpatialMode::FullHand,
            temporal: true,
            zero_init: true,
            prompt_len: 4,
            bottleneck_ratio: DEFAULT_RATIO,
            text_encoder_seed: 0,
            text_context: 16,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn xmic_options(&self) -> XmicOptions {
        XmicOptions {
            alpha: self.alpha,
            norm: self.norm,
            spatial: self.spatial,
            temporal: self.temporal,
            zero_init: self.zero_init,
        }
    }

    pub fn uses_prompts(&self) -> bool {
        self.strategy.has(Component::EarlyUni) || self.strategy.has(Component::EarlyCross)
    }

    /// The frozen toy text encoder, built only for prompt strategies.
    pub fn text_encoder(&self) -> Result<Option<ToyTextEncoder>> {
        if !self.uses_prompts() {
            return Ok(None);
        }
        ToyTextEncoder::new(self.dim, self.dim, self.text_context, self.text_encoder_seed).map(Some)
    }
}

/// Per-clip graph inputs: V-stream frames and the V2 frame/hand streams,
/// all `[N, D]`.
#[derive(Clone, Copy, Debug)]
pub struct ClipVars {
    pub video: Var,
    pub frames2: Var,
    pub hands2: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub xmic: Option<XmicAdapter>,
    pub prompts: Option<PromptLearner>,
    pub cocoop: Option<ConditionalPromptAdapter>,
    pub text_adapter: Option<BottleneckAdapter>,
    pub video_adapter: Option<BottleneckAdapter>,
}

/// Builds the model described by `components` on top of `base`.
pub fn compose(components: &[Component], base: &ModelConfig) -> Result<Model> {
    Model::new(ModelConfig {
        strategy: Strategy(components.to_vec()),
        ..base.clone()
    })
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.strategy.validate()?;
        let d = config.dim;
        if d == 0 || d % crate::nn::HEADS != 0 {
            return Err(XmicError::IncompatibleComposition(format!(
                "embedding width {d} must be a positive multiple of {}",
                crate::nn::HEADS
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let has = |c| config.strategy.has(c);
        let xmic = has(Component::Xmic)
            .then(|| XmicAdapter::new(d, config.xmic_options(), &mut rng))
            .transpose()?;
        let prompts = has(Component::EarlyUni).then(|| PromptLearner::new(config.prompt_len, d, &mut rng));
        let cocoop = has(Component::EarlyCross)
            .then(|| ConditionalPromptAdapter::new(config.prompt_len, d, d, config.zero_init, &mut rng))
            .transpose()?;
        let ratio = config.bottleneck_ratio;
        let text_adapter = has(Component::TextAdapter)
            .then(|| BottleneckAdapter::new(d, ratio, config.zero_init, &mut rng))
            .transpose()?;
        let video_adapter = has(Component::VideoAdapter)
            .then(|| BottleneckAdapter::new(d, ratio, config.zero_init, &mut rng))
            .transpose()?;
        Ok(Self {
            config,
            xmic,
            prompts,
            cocoop,
            text_adapter,
            video_adapter,
        })
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    /// True when the text rows do not depend on the clip, so one text pass
    /// serves a whole batch.
    pub fn text_is_shared(&self) -> bool {
        self.cocoop.is_none()
    }

    /// True when the shared text rows carry trainable parameters.
    pub fn text_has_params(&self) -> bool {
        self.prompts.is_some() || self.text_adapter.is_some()
    }

    /// `ē_v` as a `[1, D]` row: the normalized mean of normalized frames.
    pub fn video_embedding(g: &mut Graph, frames: Var) -> Result<Var> {
        let x = g.l2_normalize(frames)?;
        let m = g.mean_rows(x);
        let d = g.value(m).len();
        let m = g.reshape(m, &[1, d])?;
        g.l2_normalize(m)
    }

    /// Text rows before conditioning, `[C, D]`. `video` is the clip's `ē_v`
    /// and is only read by conditional prompts.
    pub fn text_rows(&self, g: &mut Graph, text: &TextSide, video: Option<Var>) -> Result<(Var, EncodeCost)> {
        if text.classifier.dim() != self.dim() {
            return Err(XmicError::DimMismatch(format!(
                "classifier width {} vs model width {}",
                text.classifier.dim(),
                self.dim()
            )));
        }
        let (mut rows, cost) = if let Some(p) = &self.prompts {
            prompt_forward(g, p, text)?
        } else if let Some(c) = &self.cocoop {
            let v = video.ok_or_else(|| {
                XmicError::IncompatibleComposition("conditional prompts need the clip embedding".into())
            })?;
            cocoop_forward(g, c, text, v)?
        } else {
            (g.constant(text.classifier.raw().clone()), EncodeCost::default())
        };
        if let Some(tt) = &self.text_adapter {
            rows = tt.forward(g, rows)?;
        }
        Ok((rows, cost))
    }

    /// `a_v` for one clip, `[1, D]`; `None` without an X-MIC component.
    pub fn xmic_vector(&self, g: &mut Graph, clip: &ClipVars) -> Result<Option<Var>> {
        self.xmic
            .as_ref()
            .map(|x| x.forward(g, clip.frames2, clip.hands2))
            .transpose()
    }

    /// `[1, C]` logits for one clip. `shared_rows`, when given, replaces the
    /// text pass (see [`Model::text_is_shared`]).
    pub fn clip_logits(
        &self,
        g: &mut Graph,
        text: &TextSide,
        clip: &ClipVars,
        shared_rows: Option<Var>,
        temperature: f64,
    ) -> Result<(Var, EncodeCost)> {
        let ev = Self::video_embedding(g, clip.video)?;
        let (rows, cost) = match shared_rows {
            Some(r) => (r, EncodeCost::default()),
            None => self.text_rows(g, text, Some(ev))?,
        };
        let query = match &self.video_adapter {
            Some(vv) => vv.forward(g, ev)?,
            None => ev,
        };
        let classifier = match self.xmic_vector(g, clip)? {
            Some(a_v) => {
                let o = &self.config;
                condition_rows(g, rows, a_v, o.alpha, o.norm)?
            }
            None => g.l2_normalize(rows)?,
        };
        Ok((cosine_logits(g, query, classifier, temperature)?, cost))
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| {
            if t.requires_grad() {
                n += t.len();
            }
        });
        n
    }
}

impl Module for Model {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        if let Some(m) = &self.xmic {
            m.visit(&join(prefix, "xmic"), f);
        }
        if let Some(m) = &self.prompts {
            m.visit(&join(prefix, "prompts"), f);
        }
        if let Some(m) = &self.cocoop {
            m.visit(&join(prefix, "cocoop"), f);
        }
        if let Some(m) = &self.text_adapter {
            m.visit(&join(prefix, "text_adapter"), f);
        }
        if let Some(m) = &self.video_adapter {
            m.visit(&join(prefix, "video_adapter"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        if let Some(m) = &mut self.xmic {
            m.visit_mut(&join(prefix, "xmic"), f);
        }
        if let Some(m) = &mut self.prompts {
            m.visit_mut(&join(prefix, "prompts"), f);
        }
        if let Some(m) = &mut self.cocoop {
            m.visit_mut(&join(prefix, "cocoop"), f);
        }
        if let Some(m) = &mut self.text_adapter {
            m.visit_mut(&join(prefix, "text_adapter"), f);
        }
        if let Some(m) = &mut self.video_adapter {
            m.visit_mut(&join(prefix, "video_adapter"), f);
        }
    }
}
