use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::encoders::{build_text_classifier, TextClassifier};
use crate::error::{Result, XmicError};
use crate::graph::{Graph, Var};
use crate::nn::{join, Linear, Module, TransformerBlock, INIT_STD};
use crate::tensor::Tensor;

/// Which inner l2-normalizations are active: `n1` on the adapter inputs,
/// `n2` on `a_v` before the sum, `n3` on the text embedding before the sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct NormFlags {
    pub n1: bool,
    pub n2: bool,
    pub n3: bool,
}

impl NormFlags {
    pub const N1: NormFlags = NormFlags { n1: true, n2: false, n3: false };
    pub const NONE: NormFlags = NormFlags { n1: false, n2: false, n3: false };
}

impl fmt::Display for NormFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let on: Vec<&str> = [("n1", self.n1), ("n2", self.n2), ("n3", self.n3)]
            .iter()
            .filter(|(_, b)| *b)
            .map(|(n, _)| *n)
            .collect();
        if on.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&on.join(","))
        }
    }
}

impl FromStr for NormFlags {
    type Err = XmicError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("none") {
            return Ok(Self::NONE);
        }
        let mut flags = Self::NONE;
        for part in s.split(',') {
            match part.trim().to_ascii_lowercase().as_str() {
                "n1" => flags.n1 = true,
                "n2" => flags.n2 = true,
                "n3" => flags.n3 = true,
                other => {
                    return Err(XmicError::Config(format!(
                        "unknown normalization flag {other:?}; use n1,n2,n3 or none"
                    )))
                }
            }
        }
        Ok(flags)
    }
}

impl Serialize for NormFlags {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for NormFlags {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Streams fed to the two tokens of the spatial block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpatialMode {
    /// Full frames for both tokens.
    #[serde(rename = "F")]
    Full,
    /// Hand crops for both tokens.
    #[serde(rename = "H")]
    Hand,
    #[default]
    #[serde(rename = "F+H")]
    FullHand,
}

impl fmt::Display for SpatialMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SpatialMode::Full => "F",
            SpatialMode::Hand => "H",
            SpatialMode::FullHand => "F+H",
        })
    }
}

impl FromStr for SpatialMode {
    type Err = XmicError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "F" => Ok(SpatialMode::Full),
            "H" => Ok(SpatialMode::Hand),
            "F+H" | "FH" => Ok(SpatialMode::FullHand),
            _ => Err(XmicError::Config(format!("unknown spatial mode {s:?}; use F, H or F+H"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct XmicOptions {
    pub alpha: f64,
    pub norm: NormFlags,
    pub spatial: SpatialMode,
    pub temporal: bool,
    /// Start with every residual branch and the output projection at zero,
    /// so that `a_v = 0` and conditioning reduces to zero-shot.
    pub zero_init: bool,
}

impl Default for XmicOptions {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            norm: NormFlags::N1,
            spatial: SpatialMode::FullHand,
            temporal: true,
            zero_init: true,
        }
    }
}

/// The adapter `A`: one spatial block over `[frame; hand]` pairs, two
/// temporal blocks over the frame sequence, mean pooling and a linear
/// output projection.
#[derive(Clone, Debug, PartialEq)]
pub struct XmicAdapter {
    pub spatial: TransformerBlock,
    pub temporal: Vec<TransformerBlock>,
    pub proj: Linear,
    pub options: XmicOptions,
}

pub const TEMPORAL_DEPTH: usize = 2;

impl XmicAdapter {
    pub fn new<R: Rng + ?Sized>(dim: usize, options: XmicOptions, rng: &mut R) -> Result<Self> {
        if !(options.alpha > 0.0 && options.alpha.is_finite()) {
            return Err(XmicError::Config(format!("alpha must be positive, got {}", options.alpha)));
        }
        let zero = options.zero_init;
        let spatial = TransformerBlock::new(dim, zero, rng)?;
        let temporal = (0..TEMPORAL_DEPTH)
            .map(|_| TransformerBlock::new(dim, zero, rng))
            .collect::<Result<Vec<_>>>()?;
        // A zero a_v cannot be normalized, so n2 needs a non-degenerate start.
        let proj = match (zero, options.norm.n2) {
            (true, false) => Linear::zeros(dim, dim),
            (true, true) => Linear::with_std(dim, dim, INIT_STD, rng),
            (false, _) => Linear::identity(dim),
        };
        Ok(Self {
            spatial,
            temporal,
            proj,
            options,
        })
    }

    pub fn dim(&self) -> usize {
        self.spatial.width()
    }

    /// `a_v` as a `[1, D]` row from `[N, D]` frame and hand embeddings.
    pub fn forward(&self, g: &mut Graph, frames: Var, hands: Var) -> Result<Var> {
        let (mut x, mut h) = match self.options.spatial {
            SpatialMode::FullHand => (frames, hands),
            SpatialMode::Full => (frames, frames),
            SpatialMode::Hand => (hands, hands),
        };
        if self.options.norm.n1 {
            let same = x == h;
            x = g.l2_normalize(x)?;
            h = if same { x } else { g.l2_normalize(h)? };
        }
        let s = ego_spatial_block(g, x, h, &self.spatial)?;
        let pooled = if self.options.temporal {
            temporal_block(g, s, &self.temporal)?
        } else {
            g.mean_rows(s)
        };
        self.proj.forward(g, pooled)
    }
}

impl Module for XmicAdapter {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.spatial.visit(&join(prefix, "spatial"), f);
        for (i, b) in self.temporal.iter().enumerate() {
            b.visit(&join(prefix, &format!("temporal{i}")), f);
        }
        self.proj.visit(&join(prefix, "proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.spatial.visit_mut(&join(prefix, "spatial"), f);
        for (i, b) in self.temporal.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("temporal{i}")), f);
        }
        self.proj.visit_mut(&join(prefix, "proj"), f);
    }
}

/// Runs `block` on every length-2 sequence `[x_i; h_i]` independently and
/// averages the two output tokens: `[N, D]` in, `[N, D]` out.
pub fn ego_spatial_block(g: &mut Graph, frames: Var, hands: Var, block: &TransformerBlock) -> Result<Var> {
    if g.shape(frames) != g.shape(hands) {
        return Err(XmicError::DimMismatch(format!(
            "frames {:?} vs hands {:?}",
            g.shape(frames),
            g.shape(hands)
        )));
    }
    let n = g.value(frames).rows();
    let stacked = g.concat_rows(&[frames, hands])?;
    let interleaved: Vec<usize> = (0..n).flat_map(|i| [i, n + i]).collect();
    let pairs = g.select_rows(stacked, &interleaved)?;
    let out = block.forward(g, pairs, 2)?;
    let even: Vec<usize> = (0..n).map(|i| 2 * i).collect();
    let odd: Vec<usize> = (0..n).map(|i| 2 * i + 1).collect();
    let a = g.select_rows(out, &even)?;
    let b = g.select_rows(out, &odd)?;
    let s = g.add(a, b)?;
    Ok(g.scale(s, 0.5))
}

/// Sequential temporal blocks over the whole `[N, D]` sequence, then the
/// mean over frames.
pub fn temporal_block(g: &mut Graph, seq: Var, blocks: &[TransformerBlock]) -> Result<Var> {
    let n = g.value(seq).rows();
    let mut x = seq;
    for b in blocks {
        x = b.forward(g, x, n)?;
    }
    Ok(g.mean_rows(x))
}

/// Adapted classifier rows `normalize(maybe_n3(e_t) + alpha * maybe_n2(a_v))`
/// for `[C, D]` text embeddings and a `D`-vector `a_v`.
pub fn condition_rows(g: &mut Graph, text: Var, a_v: Var, alpha: f64, norm: NormFlags) -> Result<Var> {
    let d = g.value(text).last_dim();
    if g.value(a_v).len() != d {
        return Err(XmicError::DimMismatch(format!(
            "a_v of length {} against text width {d}",
            g.value(a_v).len()
        )));
    }
    let e = if norm.n3 { g.l2_normalize(text)? } else { text };
    let a = if norm.n2 { g.l2_normalize(a_v)? } else { a_v };
    let a = g.scale(a, alpha);
    let sum = g.add_row(e, a)?;
    g.l2_normalize(sum)
}

/// Value-level form of [`condition_rows`].
pub fn condition_classifier(
    classifier: &TextClassifier,
    a_v: &[f64],
    alpha: f64,
    norm: NormFlags,
) -> Result<TextClassifier> {
    let mut g = Graph::new();
    let text = g.constant(classifier.raw().clone());
    let a = g.constant(Tensor::vector(a_v.to_vec()));
    let rows = condition_rows(&mut g, text, a, alpha, norm)?;
    build_text_classifier(g.value(rows).clone(), classifier.vocab().clone())
}
