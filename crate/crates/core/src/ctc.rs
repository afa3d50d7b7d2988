//! Log-space connectionist temporal classification.
//!
//! Every routine works on a `T × V` grid of per-frame log-probabilities and
//! only looks at the first `valid_len` rows, so padded frames never matter.
//! Targets are expanded to the blank-interleaved form
//! `∅ y₁ ∅ y₂ … ∅ y_L ∅` of length `2L + 1`.

use crate::error::{Error, Result};
use crate::numerics::{log_add, CustomOp, Tape, Tensor, Var};

/// Token sequence a CTC head is trained to emit. Never contains the blank.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CtcTarget {
    tokens: Vec<usize>,
}

impl CtcTarget {
    pub fn new(tokens: Vec<usize>, blank: usize) -> Result<Self> {
        if tokens.contains(&blank) {
            return Err(Error::BlankInTarget(blank));
        }
        Ok(CtcTarget { tokens })
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn expanded(&self, blank: usize) -> Vec<usize> {
        let mut ext = Vec::with_capacity(2 * self.tokens.len() + 1);
        ext.push(blank);
        for &t in &self.tokens {
            ext.push(t);
            ext.push(blank);
        }
        ext
    }

    /// Fewest frames any alignment needs: one per token plus one blank
    /// between each pair of equal neighbours.
    pub fn min_frames(&self) -> usize {
        let repeats = self.tokens.windows(2).filter(|w| w[0] == w[1]).count();
        self.tokens.len() + repeats
    }

    pub fn check_feasible(&self, frames: usize) -> Result<()> {
        let needed = self.min_frames();
        if needed > frames {
            return Err(Error::Infeasible {
                needed,
                available: frames,
            });
        }
        Ok(())
    }
}

fn check_grid(log_probs: &Tensor, valid_len: usize, blank: usize) -> Result<(usize, usize)> {
    if log_probs.shape().len() != 2 {
        return Err(Error::shape(format!(
            "CTC expects a T×V grid, got {:?}",
            log_probs.shape()
        )));
    }
    let (t, v) = (log_probs.rows(), log_probs.cols());
    if valid_len == 0 || valid_len > t {
        return Err(Error::shape(format!("valid_len {valid_len} outside 1..={t}")));
    }
    if blank >= v {
        return Err(Error::InvalidToken(blank));
    }
    Ok((valid_len, v))
}

/// Can state `s` be entered from `s − 2` (skipping the blank between two
/// different labels)?
fn can_skip(ext: &[usize], s: usize, blank: usize) -> bool {
    s >= 2 && ext[s] != blank && ext[s] != ext[s - 2]
}

/// Forward variables `log α_t(s)`, row-major `T × S`.
fn forward_alpha(lp: &[f64], frames: usize, vocab: usize, ext: &[usize], blank: usize) -> Vec<f64> {
    let s_len = ext.len();
    let mut alpha = vec![f64::NEG_INFINITY; frames * s_len];
    alpha[0] = lp[ext[0]];
    if s_len > 1 {
        alpha[1] = lp[ext[1]];
    }
    for t in 1..frames {
        let (prev, cur) = alpha.split_at_mut(t * s_len);
        let prev = &prev[(t - 1) * s_len..];
        let row = &lp[t * vocab..(t + 1) * vocab];
        for s in 0..s_len {
            let mut acc = prev[s];
            if s >= 1 {
                acc = log_add(acc, prev[s - 1]);
            }
            if can_skip(ext, s, blank) {
                acc = log_add(acc, prev[s - 2]);
            }
            cur[s] = acc + row[ext[s]];
        }
    }
    alpha
}

/// Backward variables `log β_t(s)` (including the emission at `t`).
fn backward_beta(lp: &[f64], frames: usize, vocab: usize, ext: &[usize], blank: usize) -> Vec<f64> {
    let s_len = ext.len();
    let mut beta = vec![f64::NEG_INFINITY; frames * s_len];
    let last = (frames - 1) * s_len;
    let row = &lp[(frames - 1) * vocab..frames * vocab];
    beta[last + s_len - 1] = row[ext[s_len - 1]];
    if s_len > 1 {
        beta[last + s_len - 2] = row[ext[s_len - 2]];
    }
    for t in (0..frames - 1).rev() {
        let (cur, next) = beta.split_at_mut((t + 1) * s_len);
        let cur = &mut cur[t * s_len..];
        let next = &next[..s_len];
        let row = &lp[t * vocab..(t + 1) * vocab];
        for s in 0..s_len {
            let mut acc = next[s];
            if s + 1 < s_len {
                acc = log_add(acc, next[s + 1]);
            }
            if s + 2 < s_len && can_skip(ext, s + 2, blank) {
                acc = log_add(acc, next[s + 2]);
            }
            cur[s] = acc + row[ext[s]];
        }
    }
    beta
}

fn total_log_prob(alpha: &[f64], frames: usize, s_len: usize) -> f64 {
    let last = &alpha[(frames - 1) * s_len..frames * s_len];
    if s_len > 1 {
        log_add(last[s_len - 1], last[s_len - 2])
    } else {
        last[0]
    }
}

struct CtcLossOp {
    ext: Vec<usize>,
    blank: usize,
    alpha: Vec<f64>,
    log_prob: f64,
}

impl CustomOp for CtcLossOp {
    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_output: &[f64]) -> Vec<Option<Vec<f64>>> {
        let lp = inputs[0];
        let (frames, vocab) = (lp.rows(), lp.cols());
        let s_len = self.ext.len();
        let alpha = &self.alpha;
        let beta = backward_beta(lp.data(), frames, vocab, &self.ext, self.blank);
        let mut grad = vec![0.0; frames * vocab];
        let mut occupancy = vec![f64::NEG_INFINITY; vocab];
        for t in 0..frames {
            occupancy.iter_mut().for_each(|v| *v = f64::NEG_INFINITY);
            for s in 0..s_len {
                let k = self.ext[s];
                occupancy[k] = log_add(occupancy[k], alpha[t * s_len + s] + beta[t * s_len + s]);
            }
            for k in 0..vocab {
                if occupancy[k] == f64::NEG_INFINITY {
                    continue;
                }
                // d(−log P)/d lp[t,k] = −Σ_{s: ext[s]=k} α β / (y P)
                let post = (occupancy[k] - lp.data()[t * vocab + k] - self.log_prob).exp();
                grad[t * vocab + k] = -post * grad_output[0];
            }
        }
        vec![Some(grad)]
    }
}

/// `−log P_CTC(target | log_probs[0..valid_len))` recorded on the tape.
pub fn ctc_loss(tape: &mut Tape, log_probs: Var, target: &CtcTarget, valid_len: usize, blank: usize) -> Result<Var> {
    check_grid(tape.value(log_probs), valid_len, blank)?;
    target.check_feasible(valid_len)?;
    let rows = if valid_len == tape.value(log_probs).rows() {
        log_probs
    } else {
        tape.rows(log_probs, 0, valid_len)?
    };
    let lp = tape.value(rows);
    let ext = target.expanded(blank);
    let alpha = forward_alpha(lp.data(), valid_len, lp.cols(), &ext, blank);
    let log_prob = total_log_prob(&alpha, valid_len, ext.len());
    let op = CtcLossOp {
        ext,
        blank,
        alpha,
        log_prob,
    };
    Ok(tape.custom(&[rows], Tensor::scalar(-log_prob), Box::new(op)))
}

/// Tape-free negative log-likelihood.
pub fn ctc_neg_log_likelihood(log_probs: &Tensor, target: &CtcTarget, valid_len: usize, blank: usize) -> Result<f64> {
    let (frames, vocab) = check_grid(log_probs, valid_len, blank)?;
    target.check_feasible(frames)?;
    let ext = target.expanded(blank);
    let alpha = forward_alpha(log_probs.data(), frames, vocab, &ext, blank);
    Ok(-total_log_prob(&alpha, frames, ext.len()))
}

/// Repeat-collapse followed by blank removal.
pub fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &p in path {
        if Some(p) != prev && p != blank {
            out.push(p);
        }
        prev = Some(p);
    }
    out
}

/// Brute-force `P(target)`: sums the probability of every one of the `Vᵀ`
/// frame paths that collapses to `target`. Limited to `T ≤ 8`, `V ≤ 5`.
pub fn ctc_oracle(probs: &Tensor, target: &[usize], blank: usize) -> Result<f64> {
    let (frames, vocab) = (probs.rows(), probs.cols());
    if frames > 8 || vocab > 5 {
        return Err(Error::EnumerationBound { frames, vocab });
    }
    let mut total = 0.0;
    let mut path = vec![0usize; frames];
    let count = vocab.pow(frames as u32);
    for code in 0..count {
        let mut c = code;
        let mut p = 1.0;
        for (t, slot) in path.iter_mut().enumerate() {
            *slot = c % vocab;
            c /= vocab;
            p *= probs.get(t, *slot);
        }
        if collapse(&path, blank) == target {
            total += p;
        }
    }
    Ok(total)
}

/// Output of [`greedy_decode`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GreedyDecode {
    pub tokens: Vec<usize>,
    /// Per-frame argmax over the valid frames.
    pub frame_path: Vec<usize>,
    /// Frame at which each emitted token's run starts.
    pub token_frames: Vec<usize>,
}

/// Best-path decoding; ties go to the lowest token id.
pub fn greedy_decode(log_probs: &Tensor, valid_len: usize, blank: usize) -> GreedyDecode {
    let frames = valid_len.min(log_probs.rows());
    let frame_path: Vec<usize> = (0..frames)
        .map(|t| {
            let row = log_probs.row(t);
            let mut best = 0;
            for (k, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect();
    let mut tokens = Vec::new();
    let mut token_frames = Vec::new();
    let mut prev = None;
    for (t, &p) in frame_path.iter().enumerate() {
        if Some(p) != prev && p != blank {
            tokens.push(p);
            token_frames.push(t);
        }
        prev = Some(p);
    }
    GreedyDecode {
        tokens,
        frame_path,
        token_frames,
    }
}

/// Viterbi path through the blank-interleaved lattice.
#[derive(Clone, Debug, PartialEq)]
pub struct Alignment {
    pub path: Vec<usize>,
    pub log_prob: f64,
}

/// Most probable frame path that collapses to `target`.
pub fn forced_align(log_probs: &Tensor, target: &CtcTarget, valid_len: usize, blank: usize) -> Result<Alignment> {
    let (frames, vocab) = check_grid(log_probs, valid_len, blank)?;
    target.check_feasible(frames)?;
    let ext = target.expanded(blank);
    let s_len = ext.len();
    let lp = log_probs.data();
    let mut score = vec![f64::NEG_INFINITY; frames * s_len];
    let mut back = vec![0usize; frames * s_len];
    score[0] = lp[ext[0]];
    if s_len > 1 {
        score[1] = lp[ext[1]];
    }
    for t in 1..frames {
        for s in 0..s_len {
            let prev = (t - 1) * s_len;
            let mut best = score[prev + s];
            let mut from = s;
            if s >= 1 && score[prev + s - 1] > best {
                best = score[prev + s - 1];
                from = s - 1;
            }
            if can_skip(&ext, s, blank) && score[prev + s - 2] > best {
                best = score[prev + s - 2];
                from = s - 2;
            }
            score[t * s_len + s] = best + lp[t * vocab + ext[s]];
            back[t * s_len + s] = from;
        }
    }
    let last = (frames - 1) * s_len;
    let mut state = s_len - 1;
    if s_len > 1 && score[last + s_len - 2] > score[last + s_len - 1] {
        state = s_len - 2;
    }
    let log_prob = score[last + state];
    let mut path = vec![0usize; frames];
    for t in (0..frames).rev() {
        path[t] = ext[state];
        if t > 0 {
            state = back[t * s_len + state];
        }
    }
    Ok(Alignment { path, log_prob })
}

#[cfg(test)]
mod tests;
