mod common;

use common::{mat, rand_adapter_weights, synth_set};
use proptest::prelude::*;
use xmic::adapters::{Model, ModelConfig, TextSide};
use xmic::data::{partition_shared_novel, ClassVocabulary, ClipSet, FrameSampling, Task};
use xmic::encoders::{build_text_classifier, synth_generate_domains, SyntheticDataset, SyntheticSpec};
use xmic::eval::{
    classify_clip, evaluate_cross_dataset, harmonic_mean, predict_set, top1_accuracy, EvalOptions, EvalReport,
};
use xmic::XmicError;

fn model(strategy: &str, dim: usize, seed: u64) -> Model {
    let mut m = Model::new(ModelConfig { dim, strategy: strategy.parse().unwrap(), zero_init: false, seed, ..ModelConfig::default() })
        .unwrap();
    if let Some(a) = &mut m.xmic {
        rand_adapter_weights(a, 0.1, seed + 1);
    }
    m
}

struct Domains {
    a: SyntheticDataset,
    b: SyntheticDataset,
    set_a: ClipSet,
    set_b: ClipSet,
    text_a: TextSide,
    text_b: TextSide,
}

fn domains(spec: SyntheticSpec, shared: usize) -> Domains {
    let b_spec = SyntheticSpec { seed: spec.seed + 100, ..spec.clone() };
    let (a, b) = synth_generate_domains(&spec, &b_spec, shared).unwrap();
    let set_a = ClipSet::new(a.records.clone(), None, &a.vocab).unwrap();
    let set_b = ClipSet::new(b.records.clone(), None, &b.vocab).unwrap();
    let text_a = TextSide::new(a.classifier.clone(), None).unwrap();
    let text_b = TextSide::new(b.classifier.clone(), None).unwrap();
    Domains { a, b, set_a, set_b, text_a, text_b }
}

fn two_domain_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec { classes: 16, dim: 32, clips_per_class: 6, frames_per_clip: 2, seed, ..SyntheticSpec::default() }
}

fn report(m: &Model, d: &Domains, restrict_rows: bool) -> EvalReport {
    let p = partition_shared_novel(&d.a.vocab, &d.b.vocab).unwrap();
    let opts = EvalOptions { frames: 2, restrict_rows };
    evaluate_cross_dataset(m, (&d.set_a, &d.text_a), Some((&d.set_b, &d.text_b)), Some(&p), &opts).unwrap()
}

#[test]
fn metric_examples() {
    assert_eq!(top1_accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 100.0);
    assert_eq!(top1_accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
    assert_eq!(top1_accuracy(&[0, 1, 1, 1], &[0, 0, 0, 0]).unwrap(), 25.0);
    assert!(matches!(top1_accuracy(&[], &[]), Err(XmicError::Empty(_))));
    assert!(top1_accuracy(&[0], &[0, 1]).is_err());

    for (a, b, want) in [(5.89, 8.74, 7.03), (33.54, 15.35, 21.06), (28.93, 26.48, 27.65)] {
        let got = harmonic_mean(a, b).unwrap();
        assert!((got - want).abs() <= 0.01, "hm({a}, {b}) = {got}");
    }
    assert_eq!(harmonic_mean(42.5, 42.5).unwrap(), 42.5);
    assert_eq!(harmonic_mean(0.0, 17.0).unwrap(), 0.0);
    assert_eq!(harmonic_mean(0.0, 0.0).unwrap(), 0.0);
    assert!(matches!(harmonic_mean(-1.0, 3.0), Err(XmicError::NegativeInput(_))));
}

proptest! {
    #[test]
    fn hm_symmetric_and_bounded(a in 0.0f64..100.0, b in 0.0f64..100.0) {
        let h = harmonic_mean(a, b).unwrap();
        prop_assert_eq!(h, harmonic_mean(b, a).unwrap());
        prop_assert!(h >= a.min(b) - 1e-12 && h <= a.max(b) + 1e-12);
    }
}

#[test]
fn predictions_match_flat_loop() {
    let spec = SyntheticSpec { classes: 5, dim: 16, clips_per_class: 4, frames_per_clip: 6, seed: 11, ..SyntheticSpec::default() };
    let (ds, set) = synth_set(&spec);
    let text = TextSide::new(ds.classifier.clone(), None).unwrap();
    let m = model("xmic", 16, 12);
    let preds = predict_set(&m, &text, &set, 3).unwrap();
    assert_eq!(preds.len(), 20);
    let rows = mat(ds.classifier.raw());
    for (i, p) in preds.iter().enumerate() {
        let c = set.tensors(i, 3, FrameSampling::Uniform).unwrap();
        let (class, scores) = common::predict(&rows, &mat(&c.video), &mat(&c.frames2), &mat(&c.hands2), m.xmic.as_ref());
        assert_eq!(p.class, class, "clip {i}");
        for (x, y) in p.scores.iter().zip(&scores) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn single_class_always_predicts_zero() {
    let spec = SyntheticSpec { classes: 1, dim: 16, clips_per_class: 5, frames_per_clip: 2, ..SyntheticSpec::default() };
    let (ds, set) = synth_set(&spec);
    let text = TextSide::new(ds.classifier.clone(), None).unwrap();
    for s in ["zero-shot", "xmic"] {
        assert!(predict_set(&model(s, 16, 1), &text, &set, 2).unwrap().iter().all(|p| p.class == 0));
    }
}

#[test]
fn classify_rejects_dimension_mismatch() {
    let (ds, set) = synth_set(&common::small_spec(3));
    let text = TextSide::new(ds.classifier.clone(), None).unwrap();
    let clip = set.tensors(0, 2, FrameSampling::Uniform).unwrap();
    let wide = model("xmic", 32, 1);
    assert!(matches!(classify_clip(&wide, &text, &clip, None), Err(XmicError::DimMismatch(_))));
}

#[test]
fn two_domain_counts_match_generator() {
    let d = domains(two_domain_spec(20), 8);
    let r = report(&model("zero-shot", 32, 0), &d, false);
    let cross = r.cross.as_ref().unwrap();
    let labels = d.b.labels();
    let shared = labels.iter().filter(|&&l| d.b.truth.shared[l]).count();
    assert_eq!(shared, 8 * 6);
    assert_eq!(cross.shared.unwrap().clips, shared);
    assert_eq!(cross.novel.unwrap().clips, labels.len() - shared);
    assert_eq!(cross.all.clips, labels.len());
    assert_eq!(r.within.clips, d.a.records.len());
}

#[test]
fn report_cells_are_consistent() {
    let d = domains(two_domain_spec(21), 8);
    for restrict in [false, true] {
        let r = report(&model("xmic", 32, 22), &d, restrict);
        let c = r.cross.as_ref().unwrap();
        let (s, n) = (c.shared.unwrap(), c.novel.unwrap());
        assert_eq!(c.hm_shared_novel.unwrap(), harmonic_mean(s.accuracy, n.accuracy).unwrap());
        assert_eq!(r.hm_within_cross.unwrap(), harmonic_mean(r.within.accuracy, c.all.accuracy).unwrap());
        assert_eq!(s.clips + n.clips, c.all.clips);
        if !restrict {
            let hits = s.accuracy * s.clips as f64 + n.accuracy * n.clips as f64;
            assert!((hits / c.all.clips as f64 - c.all.accuracy).abs() < 1e-9);
        }
        for v in r.values().into_iter().flatten() {
            assert!((0.0..=100.0).contains(&v));
        }
    }
}

#[test]
fn restricting_rows_never_hurts() {
    let d = domains(SyntheticSpec { noise_sigma: 0.8, ..two_domain_spec(23) }, 8);
    let m = model("xmic", 32, 24);
    let free = report(&m, &d, false);
    let restricted = report(&m, &d, true);
    let (f, r) = (free.cross.unwrap(), restricted.cross.unwrap());
    assert!(r.shared.unwrap().accuracy >= f.shared.unwrap().accuracy);
    assert!(r.novel.unwrap().accuracy >= f.novel.unwrap().accuracy);
    assert_eq!(r.all, f.all);
}

#[test]
fn perfect_predictor_scores_one_hundred() {
    let clean = SyntheticSpec { noise_sigma: 0.0, text_shift: 0.0, hand_shift: 0.0, ..two_domain_spec(25) };
    let d = domains(clean, 8);
    let r = report(&model("zero-shot", 32, 0), &d, false);
    assert!(r.values().iter().all(|v| *v == Some(100.0)), "{:?}", r.values());
}

#[test]
fn zero_adapter_reproduces_zero_shot_report() {
    let d = domains(two_domain_spec(26), 8);
    let zs = report(&model("zero-shot", 32, 0), &d, false);
    let zero = Model::new(ModelConfig::default()).unwrap();
    let got = report(&zero, &d, false);
    assert_eq!(got.values(), zs.values());
    assert_eq!(got.within, zs.within);
    assert_eq!(got.cross, zs.cross);
}

#[test]
fn reports_are_deterministic() {
    let d = domains(two_domain_spec(27), 8);
    let m = model("xmic", 32, 28);
    let a = report(&m, &d, false).to_json().unwrap();
    assert_eq!(a, report(&m, &d, false).to_json().unwrap());
    let rows = vec![("xmic".to_string(), report(&m, &d, false))];
    let table = EvalReport::table(&rows);
    assert!(table.starts_with("variant"));
    assert_eq!(table.lines().count(), 2);
    let csv = EvalReport::csv(&rows);
    assert_eq!(csv.lines().next().unwrap(), "variant,within,cross,hm,shared,novel,hm_sn");
}

#[test]
fn mismatched_vocabulary_rejected() {
    let (ds, set) = synth_set(&common::small_spec(4));
    let other = ClassVocabulary::new(Task::Noun, &["a", "b", "c", "d", "e", "f"]).unwrap();
    let text = TextSide::new(build_text_classifier(ds.classifier.raw().clone(), other).unwrap(), None).unwrap();
    let opts = EvalOptions { frames: 2, restrict_rows: false };
    let r = evaluate_cross_dataset(&model("zero-shot", 16, 0), (&set, &text), None, None, &opts);
    assert!(matches!(r, Err(XmicError::VocabularyMismatch(_))));
}
