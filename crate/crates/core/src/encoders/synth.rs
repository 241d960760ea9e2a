use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::text::{build_text_classifier, TextClassifier};
use crate::data::{
    write_atomic, write_manifest, write_store, ClassVocabulary, ClipLabels, ClipRecord, Embeddings,
    ManifestEntry, Task,
};
use crate::error::{Result, XmicError};
use crate::tensor::{normalized, Tensor};

/// Parameters of the seeded shift task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub dim: usize,
    pub clips_per_class: usize,
    pub frames_per_clip: usize,
    pub noise_sigma: f64,
    pub text_shift: f64,
    pub hand_shift: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 16,
            dim: 32,
            clips_per_class: 50,
            frames_per_clip: 16,
            noise_sigma: 0.4,
            text_shift: 1.5,
            hand_shift: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(XmicError::BadSpec(m));
        if self.dim < 8 || self.dim % 8 != 0 {
            return bad(format!("dim {} must be a positive multiple of 8", self.dim));
        }
        if self.classes == 0 || self.clips_per_class == 0 || self.frames_per_clip == 0 {
            return bad("class, clip and frame counts must be positive".into());
        }
        for (name, v) in [
            ("noise_sigma", self.noise_sigma),
            ("text_shift", self.text_shift),
            ("hand_shift", self.hand_shift),
        ] {
            if !v.is_finite() || v < 0.0 {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        Ok(())
    }
}

/// Hidden generator state, kept so that tests can compute oracle accuracies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub prototypes: Vec<Vec<f64>>,
    pub text_shift_dir: Vec<f64>,
    pub hand_dirs: Vec<Vec<f64>>,
    /// Per class: whether the prototype is shared with the sibling domain.
    pub shared: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub spec: SyntheticSpec,
    pub dataset: String,
    pub records: Vec<ClipRecord>,
    pub manifest: Vec<ManifestEntry>,
    pub vocab: ClassVocabulary,
    pub classifier: TextClassifier,
    pub truth: GroundTruth,
}

#[derive(Serialize)]
struct Sidecar<'a> {
    spec: &'a SyntheticSpec,
    dataset: &'a str,
    text_shift: f64,
    hand_shift: f64,
    ground_truth: &'a GroundTruth,
}

/// File names used by [`SyntheticDataset::write_to`].
pub const STORE_FILE: &str = "store.bin";
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const TEXT_FILE: &str = "text.bin";
pub const SIDECAR_FILE: &str = "truth.json";

impl SyntheticDataset {
    /// Writes store, manifest, vocabulary, text embeddings and the ground
    /// truth sidecar into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| XmicError::io(dir, e))?;
        write_store(&dir.join(STORE_FILE), &self.records)?;
        write_manifest(&dir.join(MANIFEST_FILE), &self.manifest)?;
        self.vocab.write(&dir.join(VOCAB_FILE))?;
        self.classifier.write(&dir.join(TEXT_FILE))?;
        let sidecar = Sidecar {
            spec: &self.spec,
            dataset: &self.dataset,
            text_shift: self.spec.text_shift,
            hand_shift: self.spec.hand_shift,
            ground_truth: &self.truth,
        };
        let mut json = serde_json::to_vec_pretty(&sidecar)?;
        json.push(b'\n');
        write_atomic(&dir.join(SIDECAR_FILE), &json)
    }

    /// Class index of every record, in record order.
    pub fn labels(&self) -> Vec<usize> {
        let per = self.spec.clips_per_class;
        (0..self.records.len()).map(|i| i / per).collect()
    }
}

fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Result<Vec<f64>> {
    normalized(&gaussian(rng, d))
}

fn round_f32(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| f64::from(x as f32)).collect()
}

/// `normalize(center + sigma * g)` as 32-bit values.
fn noisy(rng: &mut ChaCha8Rng, center: &[f64], sigma: f64) -> Result<Vec<f32>> {
    let g = gaussian(rng, center.len());
    let v: Vec<f64> = center.iter().zip(&g).map(|(c, n)| c + sigma * n).collect();
    Ok(normalized(&v)?.into_iter().map(|x| x as f32).collect())
}

pub fn synth_generate(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    generate(spec, "synth", "class", None)
}

/// Two domains whose first `shared` classes use the same prototypes and
/// names. Domain B draws everything else from its own seed and names its
/// novel classes `alt_class_XX`.
pub fn synth_generate_domains(
    a: &SyntheticSpec,
    b: &SyntheticSpec,
    shared: usize,
) -> Result<(SyntheticDataset, SyntheticDataset)> {
    if a.dim != b.dim {
        return Err(XmicError::BadSpec(format!("domain dims differ: {} vs {}", a.dim, b.dim)));
    }
    if shared > a.classes.min(b.classes) {
        return Err(XmicError::BadSpec(format!(
            "{shared} shared classes exceed the smaller domain"
        )));
    }
    let mut da = generate(a, "synth_a", "class", None)?;
    da.truth.shared = (0..a.classes).map(|c| c < shared).collect();
    let donor = &da.truth.prototypes[..shared];
    let db = generate(b, "synth_b", "alt_class", Some(donor))?;
    Ok((da, db))
}

fn generate(
    spec: &SyntheticSpec,
    dataset: &str,
    novel_prefix: &str,
    donor: Option<&[Vec<f64>]>,
) -> Result<SyntheticDataset> {
    spec.validate()?;
    let (c_count, d) = (spec.classes, spec.dim);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut prototypes = (0..c_count).map(|_| unit(&mut rng, d)).collect::<Result<Vec<_>>>()?;
    let donor = donor.unwrap_or(&[]);
    for (p, shared) in prototypes.iter_mut().zip(donor) {
        p.clone_from(shared);
    }
    let shift = unit(&mut rng, d)?;
    let hand_dirs = (0..c_count).map(|_| unit(&mut rng, d)).collect::<Result<Vec<_>>>()?;

    let names: Vec<String> = (0..c_count)
        .map(|c| {
            let prefix = if c < donor.len() { "class" } else { novel_prefix };
            format!("{prefix}_{c:02}")
        })
        .collect();

    let mut records = Vec::with_capacity(c_count * spec.clips_per_class);
    let mut manifest = Vec::with_capacity(records.capacity());
    for (c, u) in prototypes.iter().enumerate() {
        let hand_center: Vec<f64> = u
            .iter()
            .zip(&hand_dirs[c])
            .map(|(a, h)| a + spec.hand_shift * h)
            .collect();
        for k in 0..spec.clips_per_class {
            let id = format!("c{c:03}_{k:04}");
            let mut full = Vec::with_capacity(spec.frames_per_clip * d);
            for _ in 0..spec.frames_per_clip {
                full.extend(noisy(&mut rng, u, spec.noise_sigma)?);
            }
            let mut hand = Vec::with_capacity(full.len());
            for _ in 0..spec.frames_per_clip {
                hand.extend(noisy(&mut rng, &hand_center, spec.noise_sigma)?);
            }
            let labels = ClipLabels {
                noun: names[c].clone(),
                verb: names[c].clone(),
                dataset: dataset.to_string(),
            };
            manifest.push(ManifestEntry {
                id: id.clone(),
                noun: names[c].clone(),
                verb: names[c].clone(),
                dataset: dataset.to_string(),
                frames: spec.frames_per_clip,
            });
            records.push(ClipRecord {
                id,
                full: Embeddings::new(spec.frames_per_clip, d, full)?,
                hand: Some(Embeddings::new(spec.frames_per_clip, d, hand)?),
                labels: Some(labels),
            });
        }
    }

    let text_rows: Vec<Vec<f64>> = prototypes
        .iter()
        .map(|u| {
            let shifted: Vec<f64> = u.iter().zip(&shift).map(|(a, s)| a + spec.text_shift * s).collect();
            Ok(round_f32(&normalized(&shifted)?))
        })
        .collect::<Result<_>>()?;
    let vocab = ClassVocabulary::new(Task::Noun, &names)?;
    let classifier = build_text_classifier(Tensor::from_rows(&text_rows), vocab.clone())?;
    let shared = (0..c_count).map(|c| c < donor.len()).collect();

    Ok(SyntheticDataset {
        spec: spec.clone(),
        dataset: dataset.to_string(),
        records,
        manifest,
        vocab,
        classifier,
        truth: GroundTruth {
            prototypes,
            text_shift_dir: shift,
            hand_dirs,
            shared,
        },
    })
}
