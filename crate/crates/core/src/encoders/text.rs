use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::data::{read_store, write_store, ClassVocabulary, ClipRecord, Embeddings, Task};
use crate::error::{Result, XmicError};
use crate::graph::{Graph, Var};
use crate::nn::{Linear, Module, TransformerBlock};
use crate::tensor::{normalized, Tensor};

/// Frozen class-text embeddings `e_t` together with their unit-normalized
/// rows, the linear classifier used for zero-shot prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct TextClassifier {
    raw: Tensor,
    rows: Tensor,
    vocab: ClassVocabulary,
}

/// Normalizes each row of `rows` and pairs it with `vocab`.
pub fn build_text_classifier(rows: Tensor, vocab: ClassVocabulary) -> Result<TextClassifier> {
    if rows.shape().len() != 2 || rows.shape()[0] != vocab.len() {
        return Err(XmicError::DimMismatch(format!(
            "classifier of shape {:?} for {} classes",
            rows.shape(),
            vocab.len()
        )));
    }
    let mut unit = Vec::with_capacity(rows.len());
    for r in 0..rows.rows() {
        unit.extend(normalized(rows.row(r))?);
    }
    let unit = Tensor::new(rows.shape().to_vec(), unit)?;
    Ok(TextClassifier {
        raw: rows.with_requires_grad(false),
        rows: unit,
        vocab,
    })
}

impl TextClassifier {
    /// Unit-norm `[C, D]` rows.
    pub fn rows(&self) -> &Tensor {
        &self.rows
    }

    /// Embeddings before normalization.
    pub fn raw(&self) -> &Tensor {
        &self.raw
    }

    pub fn vocab(&self) -> &ClassVocabulary {
        &self.vocab
    }

    pub fn classes(&self) -> usize {
        self.vocab.len()
    }

    pub fn dim(&self) -> usize {
        self.rows.last_dim()
    }

    /// Stores the raw embeddings in the embedding-store format: one record
    /// per class, id = class name, one frame.
    pub fn write(&self, path: &Path) -> Result<()> {
        let d = self.dim();
        let records: Vec<ClipRecord> = self
            .vocab
            .names()
            .iter()
            .enumerate()
            .map(|(c, name)| {
                let row: Vec<f32> = self.raw.row(c).iter().map(|&v| v as f32).collect();
                Ok(ClipRecord {
                    id: name.clone(),
                    full: Embeddings::new(1, d, row)?,
                    hand: None,
                    labels: None,
                })
            })
            .collect::<Result<_>>()?;
        write_store(path, &records)
    }

    pub fn read(path: &Path, task: Task) -> Result<Self> {
        let records = read_store(path)?;
        let names: Vec<&str> = records.iter().map(|r| r.id.as_str()).collect();
        let vocab = ClassVocabulary::new(task, &names)?;
        let rows: Vec<Vec<f64>> = records
            .iter()
            .map(|r| {
                if r.frames() != 1 {
                    return Err(XmicError::Format(format!(
                        "text embedding {:?} has {} rows, expected 1",
                        r.id,
                        r.frames()
                    )));
                }
                Ok(r.full.gather(&[0]))
            })
            .collect::<Result<_>>()?;
        build_text_classifier(Tensor::from_rows(&rows), vocab)
    }

    /// Reorders rows to follow `vocab`; every class must be present.
    pub fn aligned_to(&self, vocab: &ClassVocabulary) -> Result<Self> {
        let mut rows = Vec::with_capacity(vocab.len());
        for name in vocab.names() {
            let i = self.vocab.index_of(name).ok_or_else(|| {
                XmicError::VocabularyMismatch(format!("no text embedding for class {name:?}"))
            })?;
            rows.push(self.raw.row(i).to_vec());
        }
        build_text_classifier(Tensor::from_rows(&rows), vocab.clone())
    }
}

/// Activation accounting for text-encoder passes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EncodeCost {
    pub passes: usize,
    pub activations: usize,
}

impl EncodeCost {
    pub fn add(&mut self, other: EncodeCost) {
        self.passes += other.passes;
        self.activations += other.activations;
    }
}

/// Frozen toy text encoder: hashed token embeddings, two transformer blocks,
/// mean pooling and a linear projection into the joint space.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyTextEncoder {
    token_dim: usize,
    context: usize,
    seed: u64,
    blocks: Vec<TransformerBlock>,
    proj: Linear,
}

impl ToyTextEncoder {
    pub const DEPTH: usize = 2;

    pub fn new(token_dim: usize, out_dim: usize, context: usize, seed: u64) -> Result<Self> {
        if context == 0 {
            return Err(XmicError::Config("text context length must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7465_7874);
        let std = 1.0 / (token_dim as f64).sqrt();
        let mut blocks = (0..Self::DEPTH)
            .map(|_| TransformerBlock::with_std(token_dim, std, false, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        blocks.iter_mut().for_each(TransformerBlock::freeze);
        let mut proj = Linear::with_std(token_dim, out_dim, std, &mut rng);
        proj.freeze();
        Ok(Self {
            token_dim,
            context,
            seed,
            blocks,
            proj,
        })
    }

    pub fn token_dim(&self) -> usize {
        self.token_dim
    }

    pub fn out_dim(&self) -> usize {
        self.proj.output_dim()
    }

    pub fn context(&self) -> usize {
        self.context
    }

    /// Deterministic embedding for one token.
    pub fn token_embedding(&self, token: &str) -> Tensor {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(token.as_bytes());
        let digest = h.finalize();
        let seed = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(&[self.token_dim], 1.0, &mut rng)
    }

    fn tokens(&self, name: &str) -> Result<Tensor> {
        let toks: Vec<Vec<f64>> = crate::data::canonicalize(name)
            .split(' ')
            .filter(|t| !t.is_empty())
            .take(self.context)
            .map(|t| self.token_embedding(t).into_data())
            .collect();
        if toks.is_empty() {
            return Err(XmicError::EmptyClassName);
        }
        Ok(Tensor::from_rows(&toks))
    }

    /// Encodes one class name with `context` vectors (`[P, D_tok]`) prepended.
    /// Returns the raw `[D]` embedding and the activations spent on the pass.
    pub fn encode_one(&self, g: &mut Graph, name: &str, context: Option<Var>) -> Result<(Var, EncodeCost)> {
        let before = g.activation_count();
        let tokens = g.constant(self.tokens(name)?);
        let mut x = match context {
            Some(p) => {
                if g.value(p).last_dim() != self.token_dim {
                    return Err(XmicError::DimMismatch(format!(
                        "prompt width {} vs token width {}",
                        g.value(p).last_dim(),
                        self.token_dim
                    )));
                }
                g.concat_rows(&[p, tokens])?
            }
            None => tokens,
        };
        let len = g.value(x).rows();
        for b in &self.blocks {
            x = b.forward(g, x, len)?;
        }
        let pooled = g.mean_rows(x);
        let out = self.proj.forward(g, pooled)?;
        let cost = EncodeCost {
            passes: 1,
            activations: g.activation_count() - before,
        };
        Ok((out, cost))
    }

    /// Encodes every class name; returns raw `[C, D]` rows.
    pub fn encode(&self, g: &mut Graph, names: &[String], context: Option<Var>) -> Result<(Var, EncodeCost)> {
        let mut rows = Vec::with_capacity(names.len());
        let mut cost = EncodeCost::default();
        for n in names {
            let (r, c) = self.encode_one(g, n, context)?;
            rows.push(r);
            cost.add(c);
        }
        Ok((g.concat_rows(&rows)?, cost))
    }

    /// Zero-shot classifier from class names alone.
    pub fn classifier(&self, vocab: &ClassVocabulary) -> Result<TextClassifier> {
        let mut g = Graph::new();
        let (rows, _) = self.encode(&mut g, vocab.names(), None)?;
        build_text_classifier(g.value(rows).clone(), vocab.clone())
    }

    /// Little-endian bytes of every frozen tensor.
    pub fn fingerprint(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("block{i}"), &mut |_, t| out.extend(t.to_le_bytes()));
        }
        self.proj.visit("proj", &mut |_, t| out.extend(t.to_le_bytes()));
        out
    }
}
