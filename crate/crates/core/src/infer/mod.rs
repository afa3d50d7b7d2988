//! Greedy recognition, language identification and chunked long-form decoding.

mod longform;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ctc::{forced_align, greedy_decode, Alignment, CtcTarget};
use crate::datagen::{Task, UtteranceRecord, Vocabulary};
use crate::error::Result;
use crate::model::{CtcLayer, EncoderInput, ForwardTrace, Model};
use crate::numerics::Tensor;

pub use longform::{longform_decode, plan_chunks, Chunk, ChunkPlan, LongformOutput, LongformRequest};

/// Decoded output of one utterance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// `<lang-k>` token, if the first emission was one.
    pub language: Option<usize>,
    /// Posterior of the language token at its emission frame.
    pub language_posterior: Option<f64>,
    /// Text symbols; no blanks and no special tokens.
    pub tokens: Vec<usize>,
    /// Encoder row of each text symbol, counting the two prepended rows.
    pub token_frames: Vec<usize>,
    /// Final-layer argmax per valid encoder row.
    pub frame_path: Vec<usize>,
    /// Text symbols decoded from each intermediate CTC layer.
    pub per_layer: Vec<(usize, Vec<usize>)>,
}

/// Turns a final-layer grid into a hypothesis.
pub(crate) fn read_out(vocab: &Vocabulary, log_probs: &Tensor, valid: usize) -> Hypothesis {
    let g = greedy_decode(log_probs, valid, vocab.blank());
    let mut language = None;
    let mut language_posterior = None;
    if let (Some(&first), Some(&frame)) = (g.tokens.first(), g.token_frames.first()) {
        if vocab.language_of_token(first).is_some() {
            language = Some(first);
            language_posterior = Some(log_probs.get(frame, first).exp());
        }
    }
    let (tokens, token_frames) = g
        .tokens
        .iter()
        .zip(&g.token_frames)
        .filter(|(&t, _)| vocab.is_symbol(t))
        .map(|(&t, &f)| (t, f))
        .unzip();
    Hypothesis {
        language,
        language_posterior,
        tokens,
        token_frames,
        frame_path: g.frame_path,
        per_layer: Vec::new(),
    }
}

fn text_only(vocab: &Vocabulary, lp: &Tensor, valid: usize) -> Vec<usize> {
    greedy_decode(lp, valid, vocab.blank())
        .tokens
        .into_iter()
        .filter(|&t| vocab.is_symbol(t))
        .collect()
}

pub(crate) fn hypothesis_from_trace(vocab: &Vocabulary, trace: &ForwardTrace) -> Hypothesis {
    let mut h = read_out(vocab, trace.final_log_probs(), trace.valid);
    h.per_layer = trace
        .log_probs
        .iter()
        .filter_map(|(layer, lp)| match layer {
            CtcLayer::Intermediate(l) => Some((*l, text_only(vocab, lp, trace.valid))),
            CtcLayer::Final => None,
        })
        .collect();
    h
}

/// What to decode and how to condition the encoder.
#[derive(Clone, Debug)]
pub struct Request<'a> {
    pub features: &'a Tensor,
    pub valid_frames: usize,
    pub task: Task,
    /// `<lang-k>` or `<nolang>`.
    pub lang_hint: usize,
    pub prompt: Vec<usize>,
}

impl<'a> Request<'a> {
    /// ASR with unknown language and no prompt.
    pub fn asr(model: &Model, features: &'a Tensor, valid_frames: usize) -> Self {
        Request {
            features,
            valid_frames,
            task: Task::Asr,
            lang_hint: model.vocab.nolang(),
            prompt: vec![model.vocab.na()],
        }
    }
}

/// Greedy decoding of the final layer, recording intermediate-layer decodes.
pub fn recognize(model: &Model, req: &Request<'_>) -> Result<Hypothesis> {
    let trace = model.encode_speech(&EncoderInput {
        features: req.features,
        valid_frames: req.valid_frames,
        lang: req.lang_hint,
        task: model.vocab.task_token(req.task),
        prompt: &req.prompt,
    })?;
    Ok(hypothesis_from_trace(&model.vocab, &trace))
}

/// Decodes `requests` in consecutive batches whose members run concurrently.
/// Output order and values do not depend on `batch_size`.
pub fn recognize_batch(model: &Model, requests: &[Request<'_>], batch_size: usize) -> Vec<Result<Hypothesis>> {
    let mut out = Vec::with_capacity(requests.len());
    for batch in requests.chunks(batch_size.max(1)) {
        let part: Vec<_> = batch.par_iter().map(|r| recognize(model, r)).collect();
        out.extend(part);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LanguageId {
    Detected { language: usize, token: usize, posterior: f64 },
    NoLanguage,
}

/// Language of the speech, from the language slot of an ASR decode with
/// `<nolang>` input.
pub fn identify_language(model: &Model, features: &Tensor, valid_frames: usize) -> Result<LanguageId> {
    let h = recognize(model, &Request::asr(model, features, valid_frames))?;
    Ok(match (h.language, h.language_posterior) {
        (Some(token), Some(posterior)) => LanguageId::Detected {
            language: model.vocab.language_of_token(token).expect("language token"),
            token,
            posterior,
        },
        _ => LanguageId::NoLanguage,
    })
}

/// Viterbi alignment of the final layer against the augmented reference.
pub fn align_utterance(model: &Model, utt: &UtteranceRecord, task: Task, lang_hint: usize, prompt: &[usize]) -> Result<(Vec<usize>, Alignment)> {
    let features = utt.features_tensor();
    let trace = model.encode_speech(&EncoderInput {
        features: &features,
        valid_frames: utt.frames,
        lang: lang_hint,
        task: model.vocab.task_token(task),
        prompt,
    })?;
    let refs = model.references(utt, task)?;
    let reference = refs.final_layer().to_vec();
    let target = CtcTarget::new(reference.clone(), model.vocab.blank())?;
    let alignment = forced_align(trace.final_log_probs(), &target, trace.valid, model.vocab.blank())?;
    Ok((reference, alignment))
}
