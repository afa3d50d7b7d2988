use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn small_spec() -> CorpusSpec {
    CorpusSpec {
        num_languages: 3,
        symbols_per_language: 6,
        min_symbols: 2,
        max_symbols: 7,
        train_size: 40,
        dev_size: 10,
        test_size: 10,
        ..CorpusSpec::default()
    }
}

fn record(lang: usize, transcript: Vec<usize>, translations: Vec<(usize, Vec<usize>)>) -> UtteranceRecord {
    UtteranceRecord {
        id: 9,
        language: lang,
        frames: 2,
        feature_dim: 1,
        features: vec![0.5, -0.5],
        transcript,
        translations: translations.into_iter().collect(),
        previous: None,
    }
}

#[test]
fn frames_are_sum_of_repeats() {
    let spec = CorpusSpec {
        min_symbols: 5,
        max_symbols: 5,
        min_frames_per_symbol: 3,
        max_frames_per_symbol: 3,
        ..small_spec()
    };
    let c = generate_split(&spec, Split::Train).unwrap();
    for r in &c.records {
        assert_eq!(r.transcript.len(), 5);
        assert_eq!(r.frames, 15);
        assert_eq!(r.features.len(), 15 * spec.feature_dim);
    }
}

#[test]
fn same_seed_gives_identical_bytes() {
    let spec = small_spec();
    let a = write_corpus_bytes(&generate_split(&spec, Split::Dev).unwrap()).unwrap();
    let b = write_corpus_bytes(&generate_split(&spec, Split::Dev).unwrap()).unwrap();
    assert_eq!(a, b);
    let other = CorpusSpec { seed: 2, ..spec };
    let c = write_corpus_bytes(&generate_split(&other, Split::Dev).unwrap()).unwrap();
    assert_ne!(a, c);
}

#[test]
fn generated_files_are_deterministic() {
    let spec = small_spec();
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let p1 = generate_corpus(&spec, d1.path()).unwrap();
    let p2 = generate_corpus(&spec, d2.path()).unwrap();
    assert_eq!(p1.len(), 3);
    for (a, b) in p1.iter().zip(&p2) {
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }
    let train = read_corpus(&p1[0]).unwrap();
    assert_eq!(train.records.len(), spec.train_size);
}

#[test]
fn swap_rule_on_four_symbols() {
    assert_eq!(swap_adjacent_pairs(&[1, 2, 3, 4]), vec![2, 1, 4, 3]);
    assert_eq!(swap_adjacent_pairs(&[1, 2, 3]), vec![2, 1, 3]);
    assert_eq!(swap_adjacent_pairs(&[]), Vec::<usize>::new());
}

#[test]
fn translation_is_bijection_then_swap() {
    let spec = small_spec();
    let v = spec.vocabulary().unwrap();
    let t = TranslationTable::new(&spec);
    let src: Vec<usize> = (0..4).map(|i| v.symbol(0, i)).collect();
    let m: Vec<usize> = src.iter().map(|&s| t.map_symbol(&v, 0, 2, s)).collect();
    assert_eq!(t.translate(&v, 0, 2, &src), vec![m[1], m[0], m[3], m[2]]);
    let mut image: Vec<usize> = v.symbol_range(0).map(|s| t.map_symbol(&v, 0, 2, s)).collect();
    image.sort_unstable();
    assert_eq!(image, v.symbol_range(2).collect::<Vec<_>>());
}

#[test]
fn records_satisfy_invariants_and_are_feasible() {
    let spec = small_spec();
    let c = generate_split(&spec, Split::Train).unwrap();
    let t = TranslationTable::new(&spec);
    for r in &c.records {
        r.check_invariants(&c.vocabulary).unwrap();
        assert_eq!(r.translations.len(), spec.num_languages - 1);
        for (&k, tr) in &r.translations {
            assert_eq!(tr, &t.translate(&c.vocabulary, r.language, k, &r.transcript));
        }
        for factor in [1, 2] {
            check_feasible(&c.vocabulary, r, factor).unwrap();
        }
    }
}

#[test]
fn worst_case_frames_per_symbol_is_still_feasible() {
    let spec = CorpusSpec {
        min_frames_per_symbol: 2,
        max_frames_per_symbol: 2,
        ..small_spec()
    };
    let c = generate_split(&spec, Split::Train).unwrap();
    for r in &c.records {
        check_feasible(&c.vocabulary, r, 2).unwrap();
    }
}

#[test]
fn recordings_chain_previous_transcripts() {
    let c = generate_split(&small_spec(), Split::Train).unwrap();
    let mut linked = 0;
    for w in c.records.windows(2) {
        if let Some(p) = &w[1].previous {
            assert_eq!(p, &w[0].transcript);
            assert_eq!(w[1].language, w[0].language);
            linked += 1;
        }
    }
    assert!(c.records[0].previous.is_none());
    assert!(linked > 0);
    assert!(c.records.iter().any(|r| r.previous.is_none()));
}

#[test]
fn spec_validation() {
    assert!(CorpusSpec { min_frames_per_symbol: 1, ..small_spec() }.validate().is_err());
    assert!(CorpusSpec { num_languages: 1, ..small_spec() }.validate().is_err());
    assert!(CorpusSpec { symbols_per_language: 0, ..small_spec() }.validate().is_err());
    assert!(CorpusSpec { min_symbols: 0, ..small_spec() }.validate().is_err());
    assert!(CorpusSpec::default().validate().is_ok());
}

#[test]
fn asr_reference_prepends_language_and_task() {
    let v = Vocabulary::new(2, 5).unwrap();
    let (a, b) = (v.symbol(0, 0), v.symbol(0, 1));
    let r = record(0, vec![a, b], vec![(1, vec![v.symbol(1, 3), v.symbol(1, 2)])]);
    for role in [LayerRole::AsrOnly, LayerRole::TaskDependent] {
        assert_eq!(
            build_augmented_reference(&v, &r, Task::Asr, role).unwrap(),
            vec![v.lang_token(0), v.asr(), a, b]
        );
    }
}

#[test]
fn translation_references_by_layer_role() {
    let v = Vocabulary::new(2, 5).unwrap();
    let (a, b) = (v.symbol(0, 0), v.symbol(0, 1));
    let tr = vec![v.symbol(1, 3), v.symbol(1, 2)];
    let r = record(0, vec![a, b], vec![(1, tr.clone())]);
    let st = Task::Translate(1);
    assert_eq!(
        build_augmented_reference(&v, &r, st, LayerRole::AsrOnly).unwrap(),
        vec![v.lang_token(0), v.st_token(1), a, b]
    );
    assert_eq!(
        build_augmented_reference_with(&v, &r, st, LayerRole::AsrOnly, AsrOnlyTaskToken::ForceAsr)
            .unwrap(),
        vec![v.lang_token(0), v.asr(), a, b]
    );
    let mut expected = vec![v.lang_token(0), v.st_token(1)];
    expected.extend(&tr);
    assert_eq!(build_augmented_reference(&v, &r, st, LayerRole::TaskDependent).unwrap(), expected);
}

#[test]
fn missing_translation_is_an_error() {
    let v = Vocabulary::new(3, 5).unwrap();
    let r = record(0, vec![v.symbol(0, 0)], vec![(1, vec![v.symbol(1, 0)])]);
    for role in [LayerRole::AsrOnly, LayerRole::TaskDependent] {
        let e = build_augmented_reference(&v, &r, Task::Translate(2), role).unwrap_err();
        assert!(matches!(e, Error::MissingTranslation { utt: 9, lang: 2 }));
    }
}

#[test]
fn per_layer_references_follow_roles() {
    let c = generate_split(&small_spec(), Split::Dev).unwrap();
    let v = &c.vocabulary;
    let r = &c.records[0];
    let k = *r.translations.keys().next().unwrap();
    let refs = build_references(v, r, Task::Translate(k), 2, 1, AsrOnlyTaskToken::Echo).unwrap();
    assert_eq!(refs.layers.len(), 3);
    assert_eq!(&refs.layers[0][2..], &r.transcript[..]);
    assert_eq!(&refs.layers[1][2..], r.translation(k).unwrap());
    assert_eq!(&refs.final_layer()[2..], r.translation(k).unwrap());
    for layer in &refs.layers {
        assert_eq!(v.language_of_token(layer[0]), Some(r.language));
        assert!(v.task_of_token(layer[1]).is_some());
    }
    assert!(build_references(v, r, Task::Asr, 1, 2, AsrOnlyTaskToken::Echo).is_err());
}

#[test]
fn no_previous_sentence_always_gives_na() {
    let v = Vocabulary::new(2, 5).unwrap();
    let r = record(1, vec![v.symbol(1, 0)], vec![]);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        assert_eq!(sample_conditioning(&v, &r, &mut rng).prompt, vec![v.na()]);
    }
}

#[test]
fn conditioning_frequencies() {
    let v = Vocabulary::new(2, 5).unwrap();
    let mut r = record(1, vec![v.symbol(1, 0)], vec![]);
    r.previous = Some(vec![v.symbol(1, 4), v.symbol(1, 2)]);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 10_000;
    let (mut nolang, mut prev) = (0, 0);
    for _ in 0..n {
        let c = sample_conditioning(&v, &r, &mut rng);
        if c.lang_input == v.nolang() {
            nolang += 1;
        } else {
            assert_eq!(c.lang_input, v.lang_token(1));
        }
        if c.prompt != vec![v.na()] {
            assert_eq!(Some(&c.prompt), r.previous.as_ref());
            prev += 1;
        }
    }
    assert!((nolang as f64 / n as f64 - 0.5).abs() <= 0.02, "{nolang}");
    assert!((prev as f64 / n as f64 - 0.5).abs() <= 0.02, "{prev}");
}

#[test]
fn conditioning_is_reproducible() {
    let c = generate_split(&small_spec(), Split::Train).unwrap();
    let draw = || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        c.records
            .iter()
            .map(|r| sample_conditioning(&c.vocabulary, r, &mut rng))
            .collect::<Vec<_>>()
    };
    assert_eq!(draw(), draw());
}

#[test]
fn round_trip_preserves_records() {
    let c = generate_split(&small_spec(), Split::Test).unwrap();
    let bytes = write_corpus_bytes(&c).unwrap();
    assert_eq!(read_corpus_bytes(&bytes).unwrap(), c);
}

#[test]
fn empty_corpus_round_trips() {
    let spec = small_spec();
    let c = Corpus {
        vocabulary: spec.vocabulary().unwrap(),
        spec,
        records: vec![],
    };
    let back = read_corpus_bytes(&write_corpus_bytes(&c).unwrap()).unwrap();
    assert!(back.records.is_empty());
}

#[test]
fn truncation_reports_offset() {
    let c = generate_split(&small_spec(), Split::Test).unwrap();
    let bytes = write_corpus_bytes(&c).unwrap();
    let cut = bytes.len() - 7;
    match read_corpus_bytes(&bytes[..cut]) {
        Err(Error::Format { offset, msg }) => {
            assert!(offset as usize <= cut, "{offset} {msg}");
            assert!(offset > 0);
            assert!(msg.contains("truncated"), "{msg}");
        }
        other => panic!("expected format error, got {other:?}"),
    }
}

#[test]
fn bad_magic_and_version() {
    let c = generate_split(&small_spec(), Split::Test).unwrap();
    let mut bytes = write_corpus_bytes(&c).unwrap();
    bytes[4] = 9;
    assert!(matches!(read_corpus_bytes(&bytes), Err(Error::Version { found: 9, .. })));
    bytes[0] = b'X';
    assert!(matches!(read_corpus_bytes(&bytes), Err(Error::Format { offset: 0, .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn generated_references_are_well_formed(seed in 0u64..1000, factor in 1usize..=2) {
        let spec = CorpusSpec { seed, train_size: 12, ..small_spec() };
        let c = generate_split(&spec, Split::Train).unwrap();
        let v = &c.vocabulary;
        for r in &c.records {
            prop_assert!(check_feasible(v, r, factor).is_ok());
            for task in r.available_tasks() {
                let refs = build_references(v, r, task, 2, 1, AsrOnlyTaskToken::Echo).unwrap();
                for layer in &refs.layers {
                    prop_assert_eq!(v.language_of_token(layer[0]), Some(r.language));
                    prop_assert_eq!(v.task_of_token(layer[1]), Some(task));
                }
            }
        }
    }
}

#[test]
fn unsatisfiable_sequences_are_an_error() {
    let spec = CorpusSpec {
        num_languages: 2,
        symbols_per_language: 2,
        min_symbols: 3,
        max_symbols: 3,
        train_size: 1,
        ..CorpusSpec::default()
    };
    assert!(matches!(generate_split(&spec, Split::Train), Err(Error::Config(_))));
}
