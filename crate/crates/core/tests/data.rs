mod common;

use std::path::PathBuf;

use xmic::data::{
    attach_labels, partition_shared_novel, read_manifest, read_store, sample_frames, write_store, ClassVocabulary,
    ClipSet, Embeddings, FrameSampling, Task,
};
use xmic::encoders::{synth_generate, MANIFEST_FILE, STORE_FILE, VOCAB_FILE};
use xmic::XmicError;

fn vocab_file(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/vocab").join(name)
}

#[test]
fn partition_fixture_counts() {
    let read = |f, t| ClassVocabulary::read(&vocab_file(f), t).unwrap();
    let nouns = partition_shared_novel(&read("ego4d_nouns.txt", Task::Noun), &read("epic_kitchens_nouns.txt", Task::Noun)).unwrap();
    assert_eq!(nouns.counts(), (163, 358, 137));
    let verbs = partition_shared_novel(&read("ego4d_verbs.txt", Task::Verb), &read("epic_kitchens_verbs.txt", Task::Verb)).unwrap();
    assert_eq!(verbs.counts(), (51, 66, 46));
}

#[test]
fn partition_is_a_disjoint_cover() {
    let a = ClassVocabulary::read(&vocab_file("ego4d_nouns.txt"), Task::Noun).unwrap();
    let b = ClassVocabulary::read(&vocab_file("epic_kitchens_nouns.txt"), Task::Noun).unwrap();
    let p = partition_shared_novel(&a, &b).unwrap();
    assert_eq!(p.shared.len() + p.novel_a.len(), a.len());
    assert_eq!(p.shared.len() + p.novel_b.len(), b.len());
    assert!(p.novel_a.iter().all(|n| !b.contains(n)));
    assert!(p.novel_b.iter().all(|n| !a.contains(n)));
}

#[test]
fn partition_rejects_mixed_tasks() {
    let a = ClassVocabulary::new(Task::Noun, &["pan"]).unwrap();
    let b = ClassVocabulary::new(Task::Verb, &["cut"]).unwrap();
    assert!(matches!(partition_shared_novel(&a, &b), Err(XmicError::TaskMismatch(..))));
}

#[test]
fn synthetic_files_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synth_generate(&common::small_spec(4)).unwrap();
    ds.write_to(dir.path()).unwrap();
    let mut back = read_store(&dir.path().join(STORE_FILE)).unwrap();
    assert_eq!(back.len(), ds.records.len());
    for (a, b) in back.iter().zip(&ds.records) {
        assert_eq!(a.full, b.full);
        assert_eq!(a.hand, b.hand);
    }
    let manifest = read_manifest(&dir.path().join(MANIFEST_FILE)).unwrap();
    attach_labels(&mut back, &manifest).unwrap();
    let vocab = ClassVocabulary::read(&dir.path().join(VOCAB_FILE), Task::Noun).unwrap();
    let set = ClipSet::new(back, None, &vocab).unwrap();
    assert_eq!(set.labels(), ds.labels().as_slice());
}

#[test]
fn same_seed_gives_identical_store_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.bin"), dir.path().join("b.bin"));
    write_store(&a, &synth_generate(&common::small_spec(7)).unwrap().records).unwrap();
    write_store(&b, &synth_generate(&common::small_spec(7)).unwrap().records).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    write_store(&b, &synth_generate(&common::small_spec(8)).unwrap().records).unwrap();
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn corrupted_store_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("s.bin");
    write_store(&p, &synth_generate(&common::small_spec(1)).unwrap().records).unwrap();
    let bytes = std::fs::read(&p).unwrap();
    std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(read_store(&p), Err(XmicError::Format(_))));
    let mut bad = bytes.clone();
    bad[0] = b'Y';
    std::fs::write(&p, &bad).unwrap();
    assert!(matches!(read_store(&p), Err(XmicError::Format(_))));
}

#[test]
fn second_stream_must_match_width() {
    let ds = synth_generate(&common::small_spec(2)).unwrap();
    let mut v2 = ds.records.clone();
    for r in &mut v2 {
        r.full = Embeddings::new(r.frames(), 8, vec![0.5; r.frames() * 8]).unwrap();
        r.hand = None;
    }
    assert!(matches!(
        ClipSet::new(ds.records.clone(), Some(v2), &ds.vocab),
        Err(XmicError::DimMismatch(_))
    ));
}

#[test]
fn unknown_label_is_rejected() {
    let ds = synth_generate(&common::small_spec(2)).unwrap();
    let vocab = ClassVocabulary::new(Task::Noun, &ds.vocab.names()[1..]).unwrap();
    assert!(matches!(ClipSet::new(ds.records, None, &vocab), Err(XmicError::UnknownLabel { .. })));
}

#[test]
fn frame_sampling_stays_in_range() {
    for total in 1..20 {
        for n in 1..40 {
            let u = sample_frames(total, n, FrameSampling::Uniform);
            let r = sample_frames(total, n, FrameSampling::Random { seed: (total * n) as u64 });
            assert_eq!(u.len(), n);
            assert_eq!(r.len(), n);
            assert!(u.iter().chain(&r).all(|&i| i < total));
            assert!(u.windows(2).all(|w| w[0] <= w[1]));
            if n <= total {
                assert!(r.windows(2).all(|w| w[0] < w[1]), "draws without replacement");
            }
        }
    }
}
