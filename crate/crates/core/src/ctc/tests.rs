use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::{finite_difference_check, log_softmax_lastdim, sample_coordinates, ParamId, ParamStore};

const BLANK: usize = 0;

fn random_log_probs(rng: &mut ChaCha8Rng, frames: usize, vocab: usize) -> Tensor {
    let logits = Tensor::from_fn(frames, vocab, |_, _| rng.random_range(-3.0..3.0));
    log_softmax_lastdim(&logits).unwrap()
}

fn target(tokens: &[usize]) -> CtcTarget {
    CtcTarget::new(tokens.to_vec(), BLANK).unwrap()
}

/// Every string over `1..vocab` with length `<= max_len`.
fn all_strings(vocab: usize, max_len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    let mut frontier = vec![vec![]];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for k in 1..vocab {
                let mut t: Vec<usize> = s.clone();
                t.push(k);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Highest-probability frame path that collapses to `tokens`, by enumeration.
fn best_valid_path(probs: &Tensor, tokens: &[usize]) -> f64 {
    let (frames, vocab) = (probs.rows(), probs.cols());
    let mut best = 0.0f64;
    let mut path = vec![0; frames];
    for code in 0..vocab.pow(frames as u32) {
        let mut c = code;
        let mut p = 1.0;
        for (t, slot) in path.iter_mut().enumerate() {
            *slot = c % vocab;
            c /= vocab;
            p *= probs.get(t, *slot);
        }
        if collapse(&path, BLANK) == tokens {
            best = best.max(p);
        }
    }
    best
}

#[test]
fn two_frame_uniform_single_token() {
    // Paths a·∅, ∅·a, a·a each have probability 1/4.
    let lp = Tensor::matrix(2, 2, vec![0.5f64.ln(); 4]).unwrap();
    let loss = ctc_neg_log_likelihood(&lp, &target(&[1]), 2, BLANK).unwrap();
    assert!((loss - (-(0.75f64).ln())).abs() < 1e-12);
    assert!((loss - 0.287_682).abs() < 1e-6);
}

#[test]
fn one_hot_path_has_zero_loss() {
    // Expanded path ∅ a a ∅ b over 5 frames.
    let path = [0usize, 1, 1, 0, 2];
    let lp = Tensor::from_fn(5, 3, |t, k| if path[t] == k { 0.0 } else { f64::NEG_INFINITY });
    let loss = ctc_neg_log_likelihood(&lp, &target(&[1, 2]), 5, BLANK).unwrap();
    assert!(loss.abs() < 1e-9);

    let soft = log_softmax_lastdim(&Tensor::from_fn(5, 3, |t, k| if path[t] == k { 60.0 } else { 0.0 })).unwrap();
    let path_nll: f64 = -(0..5).map(|t| soft.get(t, path[t])).sum::<f64>();
    let loss = ctc_neg_log_likelihood(&soft, &target(&[1, 2]), 5, BLANK).unwrap();
    assert!((loss - path_nll).abs() < 1e-9);
}

#[test]
fn infeasible_target_is_an_error() {
    let lp = Tensor::matrix(2, 2, vec![0.5f64.ln(); 4]).unwrap();
    let err = ctc_neg_log_likelihood(&lp, &target(&[1, 1]), 2, BLANK).unwrap_err();
    assert!(matches!(err, Error::Infeasible { needed: 3, available: 2 }));
    assert!(forced_align(&lp, &target(&[1, 1]), 2, BLANK).is_err());
}

#[test]
fn blank_in_target_is_rejected() {
    assert!(CtcTarget::new(vec![1, 0], BLANK).is_err());
}

#[test]
fn min_frames_counts_repeats() {
    assert_eq!(target(&[1, 1, 2]).min_frames(), 4);
    assert_eq!(target(&[1, 2, 1]).min_frames(), 3);
    assert_eq!(target(&[]).min_frames(), 0);
}

#[test]
fn oracle_matches_forward_recursion() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for frames in 1..=5 {
        for vocab in 2..=3 {
            let lp = random_log_probs(&mut rng, frames, vocab);
            let probs = lp.map(f64::exp);
            for tokens in all_strings(vocab, 3) {
                let tgt = target(&tokens);
                let oracle = ctc_oracle(&probs, &tokens, BLANK).unwrap();
                match ctc_neg_log_likelihood(&lp, &tgt, frames, BLANK) {
                    Ok(nll) => assert!((oracle - (-nll).exp()).abs() <= 1e-9),
                    Err(Error::Infeasible { .. }) => assert_eq!(oracle, 0.0),
                    Err(e) => panic!("{e}"),
                }
            }
        }
    }
}

#[test]
fn oracle_empty_target_is_all_blank_path() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let probs = random_log_probs(&mut rng, 4, 3).map(f64::exp);
    let all_blank: f64 = (0..4).map(|t| probs.get(t, BLANK)).product();
    assert!((ctc_oracle(&probs, &[], BLANK).unwrap() - all_blank).abs() < 1e-15);
}

#[test]
fn oracle_sums_to_one_over_all_outputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for frames in 1..=4 {
        for vocab in 2..=3 {
            let probs = random_log_probs(&mut rng, frames, vocab).map(f64::exp);
            let total: f64 = all_strings(vocab, frames)
                .iter()
                .map(|s| ctc_oracle(&probs, s, BLANK).unwrap())
                .sum();
            assert!((total - 1.0).abs() <= 1e-9, "T={frames} V={vocab}: {total}");
        }
    }
}

#[test]
fn oracle_rejects_large_instances() {
    let probs = Tensor::zeros(&[9, 2]);
    assert!(matches!(ctc_oracle(&probs, &[1], BLANK), Err(Error::EnumerationBound { .. })));
    let probs = Tensor::zeros(&[2, 6]);
    assert!(ctc_oracle(&probs, &[1], BLANK).is_err());
}

#[test]
fn loss_is_invariant_to_per_frame_logit_shift() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let logits = Tensor::from_fn(6, 4, |_, _| rng.random_range(-2.0..2.0));
    let shifts: Vec<f64> = (0..6).map(|_| rng.random_range(-50.0..50.0)).collect();
    let shifted = Tensor::from_fn(6, 4, |t, k| logits.get(t, k) + shifts[t]);
    let tgt = target(&[2, 3, 2]);
    let a = ctc_neg_log_likelihood(&log_softmax_lastdim(&logits).unwrap(), &tgt, 6, BLANK).unwrap();
    let b = ctc_neg_log_likelihood(&log_softmax_lastdim(&shifted).unwrap(), &tgt, 6, BLANK).unwrap();
    assert!((a - b).abs() <= 1e-10);
}

#[test]
fn gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for (frames, tokens) in [(5usize, vec![1usize, 2]), (6, vec![1, 1, 3]), (4, vec![]), (7, vec![2, 3, 2, 1])] {
        let lp = random_log_probs(&mut rng, frames, 4);
        let mut params = ParamStore::new();
        params.insert("lp", lp).unwrap();
        let tgt = target(&tokens);
        let coords = sample_coordinates(&params, usize::MAX, 0);
        let report = finite_difference_check(
            |t| {
                let x = t.param(ParamId(0))?;
                ctc_loss(t, x, &tgt, frames, BLANK)
            },
            &params,
            1e-5,
            &coords,
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-6, "{report:?}");
    }
}

#[test]
fn gradient_through_log_softmax_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut params = ParamStore::new();
    params
        .insert("logits", Tensor::from_fn(6, 4, |_, _| rng.random_range(-2.0..2.0)))
        .unwrap();
    let tgt = target(&[3, 1, 3]);
    let coords = sample_coordinates(&params, usize::MAX, 0);
    let report = finite_difference_check(
        |t| {
            let x = t.param(ParamId(0))?;
            let lp = t.log_softmax(x)?;
            ctc_loss(t, lp, &tgt, 6, BLANK)
        },
        &params,
        1e-5,
        &coords,
    )
    .unwrap();
    assert!(report.max_rel_error <= 1e-6, "{report:?}");
}

#[test]
fn padding_frames_change_neither_loss_nor_decode() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let lp = random_log_probs(&mut rng, 5, 4);
    let junk = random_log_probs(&mut rng, 3, 4);
    let mut data = lp.data().to_vec();
    data.extend_from_slice(junk.data());
    let padded = Tensor::matrix(8, 4, data).unwrap();
    let tgt = target(&[1, 3]);
    assert_eq!(
        ctc_neg_log_likelihood(&lp, &tgt, 5, BLANK).unwrap(),
        ctc_neg_log_likelihood(&padded, &tgt, 5, BLANK).unwrap()
    );
    assert_eq!(greedy_decode(&lp, 5, BLANK), greedy_decode(&padded, 5, BLANK));
    assert_eq!(
        forced_align(&lp, &tgt, 5, BLANK).unwrap(),
        forced_align(&padded, &tgt, 5, BLANK).unwrap()
    );
}

#[test]
fn tape_loss_matches_plain_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let lp = random_log_probs(&mut rng, 7, 4);
    let tgt = target(&[2, 2, 1]);
    let mut tape = Tape::new();
    let x = tape.constant(lp.clone());
    let loss = ctc_loss(&mut tape, x, &tgt, 6, BLANK).unwrap();
    let plain = ctc_neg_log_likelihood(&lp, &tgt, 6, BLANK).unwrap();
    assert_eq!(tape.value(loss).item(), plain);
}

#[test]
fn greedy_collapse_rule() {
    let a = 1;
    let path = [a, a, BLANK, a];
    let lp = Tensor::from_fn(4, 2, |t, k| if path[t] == k { 0.0 } else { -5.0 });
    let out = greedy_decode(&lp, 4, BLANK);
    assert_eq!(out.tokens, vec![a, a]);
    assert_eq!(out.frame_path, path.to_vec());
    assert_eq!(out.token_frames, vec![0, 3]);

    let blanks = Tensor::from_fn(3, 2, |_, k| if k == BLANK { 0.0 } else { -1.0 });
    assert!(greedy_decode(&blanks, 3, BLANK).tokens.is_empty());
}

#[test]
fn greedy_ties_break_toward_lowest_id() {
    let lp = Tensor::matrix(2, 3, vec![0.0, 0.0, 0.0, -1.0, 0.5, 0.5]).unwrap();
    assert_eq!(greedy_decode(&lp, 2, BLANK).frame_path, vec![0, 1]);
}

#[test]
fn greedy_reconstructs_target_from_expanded_one_hot() {
    let tgt = target(&[3, 1, 1, 2]);
    let ext = tgt.expanded(BLANK);
    let lp = Tensor::from_fn(ext.len(), 4, |t, k| if ext[t] == k { 0.0 } else { -9.0 });
    assert_eq!(greedy_decode(&lp, ext.len(), BLANK).tokens, tgt.tokens());
}

#[test]
fn forced_align_prefers_blank_then_token() {
    let lp = Tensor::matrix(2, 2, vec![0.9f64.ln(), 0.1f64.ln(), 0.2f64.ln(), 0.8f64.ln()]).unwrap();
    let a = forced_align(&lp, &target(&[1]), 2, BLANK).unwrap();
    assert_eq!(a.path, vec![BLANK, 1]);
    assert!((a.log_prob - (0.9f64 * 0.8).ln()).abs() < 1e-12);
}

#[test]
fn forced_align_tight_instance_has_unique_path() {
    let tgt = target(&[1, 1, 2]);
    let frames = tgt.min_frames();
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let lp = random_log_probs(&mut rng, frames, 3);
    let a = forced_align(&lp, &tgt, frames, BLANK).unwrap();
    assert_eq!(a.path, vec![1, 0, 1, 2]);
}

#[test]
fn forced_align_matches_enumerated_best_path() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for frames in 1..=5 {
        for vocab in 2..=3 {
            let lp = random_log_probs(&mut rng, frames, vocab);
            let probs = lp.map(f64::exp);
            for tokens in all_strings(vocab, 3) {
                let tgt = target(&tokens);
                let Ok(a) = forced_align(&lp, &tgt, frames, BLANK) else {
                    assert!(tgt.min_frames() > frames);
                    continue;
                };
                assert_eq!(collapse(&a.path, BLANK), tokens);
                let best = best_valid_path(&probs, &tokens);
                assert!((a.log_prob.exp() - best).abs() <= 1e-12);
                let nll = ctc_neg_log_likelihood(&lp, &tgt, frames, BLANK).unwrap();
                assert!(a.log_prob.exp() <= (-nll).exp() + 1e-12);
            }
        }
    }
}

proptest! {
    #[test]
    fn greedy_reduction_is_stable(path in prop::collection::vec(0usize..4, 0..20)) {
        let once = collapse(&path, BLANK);
        // Re-reducing only merges tokens that were separated by a blank.
        let has_adjacent_repeat = once.windows(2).any(|w| w[0] == w[1]);
        if !has_adjacent_repeat {
            prop_assert_eq!(collapse(&once, BLANK), once.clone());
        }
        // Repeat-collapse alone and blank removal alone are idempotent.
        let mut dedup = path.clone();
        dedup.dedup();
        let mut twice = dedup.clone();
        twice.dedup();
        prop_assert_eq!(&twice, &dedup);
        let no_blank: Vec<usize> = dedup.iter().copied().filter(|&p| p != BLANK).collect();
        prop_assert_eq!(no_blank, once);
    }

    #[test]
    fn forced_alignment_always_collapses_to_target(
        seed in 0u64..1000,
        tokens in prop::collection::vec(1usize..4, 0..4),
        extra in 0usize..4,
    ) {
        let tgt = target(&tokens);
        let frames = tgt.min_frames().max(1) + extra;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lp = random_log_probs(&mut rng, frames, 4);
        let a = forced_align(&lp, &tgt, frames, BLANK).unwrap();
        prop_assert_eq!(collapse(&a.path, BLANK), tokens);
    }
}
