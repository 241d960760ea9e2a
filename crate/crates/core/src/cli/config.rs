use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapters::ModelConfig;
use crate::encoders::SyntheticSpec;
use crate::error::{Result, XmicError};
use crate::training::TrainConfig;

/// Input files. Relative paths in a config file are resolved against the
/// file's directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub store_v: Option<PathBuf>,
    pub store_v2: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    /// Class text embeddings (store format, one record per class). Without
    /// it the toy text encoder embeds the vocabulary.
    pub text: Option<PathBuf>,
    /// Held-out clips of the training dataset; the training clips are used
    /// for within-dataset accuracy when absent.
    pub test_store: Option<PathBuf>,
    pub test_store_v2: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    pub eval_store: Option<PathBuf>,
    pub eval_store_v2: Option<PathBuf>,
    pub eval_manifest: Option<PathBuf>,
    pub eval_vocab: Option<PathBuf>,
    pub eval_text: Option<PathBuf>,
}

impl DataConfig {
    fn paths_mut(&mut self) -> [&mut Option<PathBuf>; 13] {
        [
            &mut self.store_v,
            &mut self.store_v2,
            &mut self.manifest,
            &mut self.vocab,
            &mut self.text,
            &mut self.test_store,
            &mut self.test_store_v2,
            &mut self.test_manifest,
            &mut self.eval_store,
            &mut self.eval_store_v2,
            &mut self.eval_manifest,
            &mut self.eval_vocab,
            &mut self.eval_text,
        ]
    }
}

/// Synthetic dataset recipe for `gen-synth`. With `shared_classes` set, a
/// second domain is generated whose first `shared_classes` classes reuse
/// the first domain's prototypes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub classes: usize,
    pub dim: usize,
    pub clips_per_class: usize,
    pub test_clips_per_class: usize,
    pub frames_per_clip: usize,
    pub noise_sigma: f64,
    pub text_shift: f64,
    pub hand_shift: f64,
    pub seed: u64,
    pub shared_classes: Option<usize>,
    pub classes_b: Option<usize>,
    pub seed_b: Option<u64>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let s = SyntheticSpec::default();
        Self {
            classes: s.classes,
            dim: s.dim,
            clips_per_class: s.clips_per_class,
            test_clips_per_class: 0,
            frames_per_clip: s.frames_per_clip,
            noise_sigma: s.noise_sigma,
            text_shift: s.text_shift,
            hand_shift: s.hand_shift,
            seed: s.seed,
            shared_classes: None,
            classes_b: None,
            seed_b: None,
        }
    }
}

impl SynthConfig {
    /// Spec of domain A, covering training and test clips.
    pub fn spec_a(&self) -> SyntheticSpec {
        SyntheticSpec {
            classes: self.classes,
            dim: self.dim,
            clips_per_class: self.clips_per_class + self.test_clips_per_class,
            frames_per_clip: self.frames_per_clip,
            noise_sigma: self.noise_sigma,
            text_shift: self.text_shift,
            hand_shift: self.hand_shift,
            seed: self.seed,
        }
    }

    pub fn spec_b(&self) -> SyntheticSpec {
        SyntheticSpec {
            classes: self.classes_b.unwrap_or(self.classes),
            clips_per_class: self.clips_per_class,
            seed: self.seed_b.unwrap_or(self.seed.wrapping_add(1)),
            ..self.spec_a()
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Score shared/novel clips against their own subset of classes only.
    pub restrict_rows: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProfileConfig {
    pub classes: usize,
    pub prompt_len: usize,
    pub dim: usize,
    pub batches: Vec<usize>,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        Self {
            classes: 8,
            prompt_len: 4,
            dim: 32,
            batches: vec![1, 2, 4, 8],
        }
    }
}

/// Everything a command may read, after merging file and flags.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalSection,
    pub synth: SynthConfig,
    pub profile: ProfileConfig,
    pub out: Option<PathBuf>,
    pub ckpt: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| XmicError::io(path, e))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| XmicError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in cfg.data.paths_mut().into_iter().chain([&mut cfg.out, &mut cfg.ckpt]) {
            if let Some(rel) = p.as_mut().filter(|p| p.is_relative()) {
                *rel = base.join(&*rel);
            }
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_paths_follow_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"data": {"store_v": "s.bin", "vocab": "/abs/v.txt"}, "train": {"epochs": 3}}"#).unwrap();
        let c = RunConfig::load(&p).unwrap();
        assert_eq!(c.data.store_v.unwrap(), dir.path().join("s.bin"));
        assert_eq!(c.data.vocab.unwrap(), PathBuf::from("/abs/v.txt"));
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.batch_size, 64);
    }

    #[test]
    fn unknown_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"trian": {}}"#).unwrap();
        assert!(matches!(RunConfig::load(&p), Err(XmicError::Config(_))));
    }
}
