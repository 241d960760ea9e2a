//! Stand-ins for the frozen encoders: a seeded synthetic embedding generator
//! for the visual side and a small frozen transformer text encoder.

mod synth;
mod text;

pub use synth::{
    MANIFEST_FILE, SIDECAR_FILE, STORE_FILE, TEXT_FILE, VOCAB_FILE,
    synth_generate, synth_generate_domains, GroundTruth, SyntheticDataset, SyntheticSpec,
};
pub use text::{build_text_classifier, EncodeCost, TextClassifier, ToyTextEncoder};
