use proptest::prelude::*;

use super::*;
use crate::datagen::{generate_split, CorpusSpec, Split};
use crate::model::ModelConfig;

fn oracle(a: &[u8], b: &[u8]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let sub = oracle(&a[1..], &b[1..]) + usize::from(a[0] != b[0]);
    sub.min(oracle(&a[1..], b) + 1).min(oracle(a, &b[1..]) + 1)
}

#[test]
fn kitten_sitting() {
    let e = edit_distance(b"kitten", b"sitting");
    assert_eq!(e.distance, 3);
    assert_eq!((e.substitutions, e.insertions, e.deletions), (2, 1, 0));
}

#[test]
fn identical_and_empty() {
    assert_eq!(edit_distance(&[1, 2, 3], &[1, 2, 3]), EditCounts::default());
    let e = edit_distance::<u8>(&[], &[4, 5, 6]);
    assert_eq!((e.distance, e.insertions), (3, 3));
    let e = edit_distance::<u8>(&[4, 5], &[]);
    assert_eq!((e.distance, e.deletions), (2, 2));
}

#[test]
fn substitution_wins_ties() {
    let e = edit_distance(&[1, 2], &[3]);
    assert_eq!((e.substitutions, e.deletions, e.insertions), (1, 1, 0));
    let e = edit_distance(&[1, 2, 3], &[4, 5, 6]);
    assert_eq!(e.substitutions, 3);
}

proptest! {
    #[test]
    fn matches_recursive_oracle(a in prop::collection::vec(0u8..3, 0..7), b in prop::collection::vec(0u8..3, 0..7)) {
        let e = edit_distance(&a, &b);
        prop_assert_eq!(e.distance, oracle(&a, &b));
        prop_assert_eq!(e.substitutions + e.insertions + e.deletions, e.distance);
        prop_assert_eq!(b.len() + e.deletions, a.len() + e.insertions);
    }
}

fn small() -> (Model, Corpus) {
    let spec = CorpusSpec {
        num_languages: 2,
        symbols_per_language: 3,
        min_symbols: 1,
        max_symbols: 3,
        min_frames_per_symbol: 2,
        max_frames_per_symbol: 3,
        feature_dim: 4,
        train_size: 0,
        dev_size: 6,
        test_size: 0,
        ..CorpusSpec::default()
    };
    let c = generate_split(&spec, Split::Dev).unwrap();
    let config = ModelConfig {
        num_layers: 3,
        d_model: 8,
        heads: 2,
        inter_layers: vec![1, 2],
        num_asr_only: 1,
        injection_layers: vec![3],
        prompt_layers: 1,
        prompt_dim: 4,
        prompt_heads: 2,
        prompt_ffn: 8,
        frontend_channels: 8,
        feature_dim: 4,
        cg_hidden: 8,
        conv_kernel: 3,
        ..ModelConfig::default()
    };
    (Model::new(config, c.vocabulary.clone(), 5).unwrap(), c)
}

#[test]
fn untrained_report_is_complete_and_reproducible() {
    let (model, corpus) = small();
    let opts = EvalOptions::default();
    let a = evaluate_corpus(&model, &corpus, &opts).unwrap();
    let b = evaluate_corpus(&model, &corpus, &opts).unwrap();
    assert_eq!(a.utterances, b.utterances);
    assert_eq!(a.per_task, b.per_task);
    assert_eq!(a.asr.utterances, 6);
    assert_eq!(a.translation.utterances, 6);
    assert!(a.asr.token_error_rate >= 0.0);
    assert!(a.lid_accuracy.is_some());
    let total: usize = a.utterances.iter().map(|u| u.edits.distance).sum();
    assert_eq!(total, a.asr.edits.distance + a.translation.edits.distance);
}

#[test]
fn vocabulary_mismatch_is_rejected() {
    let (model, mut corpus) = small();
    corpus.vocabulary = crate::datagen::Vocabulary::new(3, 3).unwrap();
    assert!(matches!(
        evaluate_corpus(&model, &corpus, &EvalOptions::default()),
        Err(Error::VocabularyMismatch)
    ));
}

#[test]
fn throughput_rows_and_empty_input() {
    let (model, corpus) = small();
    assert!(measure_throughput(&model, &[], &[1, 8]).unwrap().is_empty());
    let rows = measure_throughput(&model, &corpus.records, &[1, 4]).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.utterances == 6 && r.utterances_per_sec > 0.0));
}

#[test]
fn mean_losses_are_finite() {
    let (model, corpus) = small();
    let m = mean_losses(&model, &corpus.records, true).unwrap();
    assert!(m.total.is_finite() && m.final_loss > 0.0);
    assert_eq!(m.intermediate.len(), 2);
}

#[test]
fn longform_report_covers_all_utterances() {
    let (model, corpus) = small();
    let r = longform_parity(&model, &corpus.records, 10, 2, 4).unwrap();
    let frames: usize = corpus.records.iter().map(|u| u.frames).sum();
    assert_eq!(r.frames, frames);
    assert_eq!(r.reference.len(), corpus.records.iter().map(|u| u.transcript.len()).sum::<usize>());
    assert!(r.chunks > 1);
    assert_eq!(r.hypothesis, longform_parity(&model, &corpus.records, 10, 2, 1).unwrap().hypothesis);
}

#[test]
fn concatenation_selection_avoids_seam_repeats() {
    let (_, corpus) = small();
    for lang in 0..2 {
        let picked = select_for_concatenation(&corpus.records, lang, 20);
        assert!(picked.iter().all(|u| u.language == lang));
        for w in picked.windows(2) {
            assert_ne!(w[0].transcript.last(), w[1].transcript.first());
        }
    }
    assert_eq!(select_for_concatenation(&corpus.records, corpus.records[0].language, 1).len(), 1);
}
