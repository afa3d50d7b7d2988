//! Token error rates, language-identification accuracy and throughput.

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{Corpus, Task, UtteranceRecord};
use crate::error::{Error, Result};
use crate::infer::{longform_decode, recognize_batch, Hypothesis, LongformRequest, Request};
use crate::numerics::Tensor;
use crate::model::{compute_losses_from_trace, EncoderInput, LossBreakdown, Model};

/// Levenshtein distance with its substitution / insertion / deletion split.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub distance: usize,
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

impl EditCounts {
    fn add(&mut self, other: &EditCounts) {
        self.distance += other.distance;
        self.substitutions += other.substitutions;
        self.insertions += other.insertions;
        self.deletions += other.deletions;
    }
}

/// Unit-cost edit distance. The backtrace prefers a substitution, then a
/// deletion, then an insertion among equally short paths.
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> EditCounts {
    let (n, m) = (reference.len(), hypothesis.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for (j, v) in d[..w].iter_mut().enumerate() {
        *v = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            let del = d[(i - 1) * w + j] + 1;
            let ins = d[i * w + j - 1] + 1;
            d[i * w + j] = sub.min(del).min(ins);
        }
    }
    let mut counts = EditCounts {
        distance: d[n * w + m],
        ..EditCounts::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hypothesis[j - 1];
            if d[(i - 1) * w + j - 1] + usize::from(!same) == here {
                if !same {
                    counts.substitutions += 1;
                }
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[(i - 1) * w + j] + 1 == here {
            counts.deletions += 1;
            i -= 1;
        } else {
            counts.insertions += 1;
            j -= 1;
        }
    }
    counts
}

/// How held-out utterances are conditioned during evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub asr: bool,
    pub translation: bool,
    /// Give the true language token for translation instead of `<nolang>`.
    pub translation_true_language: bool,
    /// Use the previous sentence as prompt where one exists.
    pub previous_prompt: bool,
    pub batch_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            asr: true,
            translation: true,
            translation_true_language: true,
            previous_prompt: false,
            batch_size: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceResult {
    pub id: u32,
    pub task: Task,
    pub reference: Vec<usize>,
    pub hypothesis: Vec<usize>,
    pub edits: EditCounts,
    /// Language read from the decode, for ASR with `<nolang>` input.
    pub detected_language: Option<usize>,
    pub true_language: usize,
    pub per_layer: Vec<(usize, Vec<usize>)>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub utterances: usize,
    pub reference_tokens: usize,
    pub edits: EditCounts,
    pub token_error_rate: f64,
}

impl TaskMetrics {
    fn push(&mut self, r: &UtteranceResult) {
        self.utterances += 1;
        self.reference_tokens += r.reference.len();
        self.edits.add(&r.edits);
        self.token_error_rate = self.edits.distance as f64 / self.reference_tokens.max(1) as f64;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub asr: TaskMetrics,
    pub translation: TaskMetrics,
    /// Keyed by task name (`asr`, `st-0`, ...).
    pub per_task: BTreeMap<String, TaskMetrics>,
    pub lid_accuracy: Option<f64>,
    pub lid_no_language: usize,
    pub utterances_per_sec: f64,
    pub wall_seconds: f64,
    pub utterances: Vec<UtteranceResult>,
}

pub fn task_name(task: Task) -> String {
    match task {
        Task::Asr => "asr".to_string(),
        Task::Translate(k) => format!("st-{k}"),
    }
}

fn prompt_for(model: &Model, utt: &UtteranceRecord, previous: bool) -> Vec<usize> {
    match &utt.previous {
        Some(p) if previous && !p.is_empty() => p.clone(),
        _ => vec![model.vocab.na()],
    }
}

/// Decodes every utterance under each requested task and scores it.
pub fn evaluate_corpus(model: &Model, corpus: &Corpus, opts: &EvalOptions) -> Result<MetricsReport> {
    if corpus.vocabulary != model.vocab {
        return Err(Error::VocabularyMismatch);
    }
    evaluate_records(model, &corpus.records, opts)
}

pub fn evaluate_records(model: &Model, records: &[UtteranceRecord], opts: &EvalOptions) -> Result<MetricsReport> {
    let vocab = &model.vocab;
    let started = Instant::now();
    let mut jobs = Vec::new();
    for utt in records {
        for task in utt.available_tasks() {
            let wanted = match task {
                Task::Asr => opts.asr,
                Task::Translate(_) => opts.translation,
            };
            if wanted {
                jobs.push((utt, task));
            }
        }
    }
    let features: Vec<_> = jobs.iter().map(|(u, _)| u.features_tensor()).collect();
    let requests: Vec<Request<'_>> = jobs
        .iter()
        .zip(&features)
        .map(|(&(utt, task), f)| Request {
            features: f,
            valid_frames: utt.frames,
            task,
            lang_hint: match task {
                Task::Translate(_) if opts.translation_true_language => vocab.lang_token(utt.language),
                _ => vocab.nolang(),
            },
            prompt: prompt_for(model, utt, opts.previous_prompt),
        })
        .collect();
    let hyps = recognize_batch(model, &requests, opts.batch_size);

    let mut report = MetricsReport {
        asr: TaskMetrics::default(),
        translation: TaskMetrics::default(),
        per_task: BTreeMap::new(),
        lid_accuracy: None,
        lid_no_language: 0,
        utterances_per_sec: 0.0,
        wall_seconds: 0.0,
        utterances: Vec::with_capacity(jobs.len()),
    };
    let (mut lid_total, mut lid_correct) = (0usize, 0usize);
    for (&(utt, task), hyp) in jobs.iter().zip(hyps) {
        let hyp: Hypothesis = hyp?;
        let reference = utt.target_text(task)?.to_vec();
        let detected_language = hyp.language.and_then(|t| vocab.language_of_token(t));
        if task == Task::Asr {
            lid_total += 1;
            match detected_language {
                Some(l) if l == utt.language => lid_correct += 1,
                Some(_) => {}
                None => report.lid_no_language += 1,
            }
        }
        let r = UtteranceResult {
            id: utt.id,
            task,
            edits: edit_distance(&reference, &hyp.tokens),
            reference,
            hypothesis: hyp.tokens,
            detected_language,
            true_language: utt.language,
            per_layer: hyp.per_layer,
        };
        match task {
            Task::Asr => report.asr.push(&r),
            Task::Translate(_) => report.translation.push(&r),
        }
        report.per_task.entry(task_name(task)).or_default().push(&r);
        report.utterances.push(r);
    }
    if lid_total > 0 {
        report.lid_accuracy = Some(lid_correct as f64 / lid_total as f64);
    }
    report.wall_seconds = started.elapsed().as_secs_f64();
    report.utterances_per_sec = jobs.len() as f64 / report.wall_seconds.max(1e-9);
    Ok(report)
}

/// Fraction of tokens decoded by ASR-only intermediate layers on translation
/// utterances that are symbols of the source language.
pub fn source_language_fraction(model: &Model, report: &MetricsReport) -> Option<f64> {
    let asr_layers: Vec<usize> = model
        .config
        .inter_layers
        .iter()
        .take(model.config.num_asr_only)
        .copied()
        .collect();
    let (mut inside, mut total) = (0usize, 0usize);
    for r in report.utterances.iter().filter(|r| matches!(r.task, Task::Translate(_))) {
        for (layer, tokens) in &r.per_layer {
            if !asr_layers.contains(layer) {
                continue;
            }
            for &t in tokens {
                total += 1;
                if model.vocab.language_of_symbol(t) == Some(r.true_language) {
                    inside += 1;
                }
            }
        }
    }
    (total > 0).then(|| inside as f64 / total as f64)
}

/// Mean per-layer CTC losses over the given tasks with true language input
/// and `<na>` prompt.
pub fn mean_losses(model: &Model, records: &[UtteranceRecord], translation_only: bool) -> Result<LossBreakdown> {
    let jobs: Vec<(&UtteranceRecord, Task)> = records
        .iter()
        .flat_map(|u| u.available_tasks().into_iter().map(move |t| (u, t)))
        .filter(|(_, t)| !translation_only || matches!(t, Task::Translate(_)))
        .collect();
    if jobs.is_empty() {
        return Err(Error::config("no utterances to score"));
    }
    let losses: Vec<Result<LossBreakdown>> = jobs
        .par_iter()
        .map(|&(utt, task)| {
            let features = utt.features_tensor();
            let trace = model.encode_speech(&EncoderInput {
                features: &features,
                valid_frames: utt.frames,
                lang: model.vocab.lang_token(utt.language),
                task: model.vocab.task_token(task),
                prompt: &[model.vocab.na()],
            })?;
            compute_losses_from_trace(&trace, &model.references(utt, task)?, model.vocab.blank())
        })
        .collect();
    let n = jobs.len() as f64;
    let mut mean: Option<LossBreakdown> = None;
    for l in losses {
        let l = l?;
        match &mut mean {
            None => mean = Some(l),
            Some(m) => {
                m.final_loss += l.final_loss;
                m.total += l.total;
                for (a, b) in m.intermediate.iter_mut().zip(&l.intermediate) {
                    a.1 += b.1;
                }
            }
        }
    }
    let mut m = mean.expect("non-empty");
    m.final_loss /= n;
    m.total /= n;
    for a in &mut m.intermediate {
        a.1 /= n;
    }
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThroughputRow {
    pub batch_size: usize,
    pub utterances: usize,
    pub wall_seconds: f64,
    pub utterances_per_sec: f64,
}

/// ASR decoding speed per batch size. Fails if any batch size changes a
/// decoded token sequence.
pub fn measure_throughput(model: &Model, records: &[UtteranceRecord], batch_sizes: &[usize]) -> Result<Vec<ThroughputRow>> {
    if records.is_empty() {
        return Ok(Vec::new());
    }
    let features: Vec<_> = records.iter().map(|u| u.features_tensor()).collect();
    let requests: Vec<Request<'_>> = records
        .iter()
        .zip(&features)
        .map(|(u, f)| Request::asr(model, f, u.frames))
        .collect();
    let mut reference: Option<Vec<Vec<usize>>> = None;
    let mut rows = Vec::with_capacity(batch_sizes.len());
    for &b in batch_sizes {
        let started = Instant::now();
        let hyps = recognize_batch(model, &requests, b)
            .into_iter()
            .map(|h| h.map(|h| h.tokens))
            .collect::<Result<Vec<_>>>()?;
        let wall = started.elapsed().as_secs_f64();
        match &reference {
            None => reference = Some(hyps),
            Some(r) if *r != hyps => {
                return Err(Error::config(format!("batch size {b} changed the decoded tokens")));
            }
            Some(_) => {}
        }
        rows.push(ThroughputRow {
            batch_size: b,
            utterances: records.len(),
            wall_seconds: wall,
            utterances_per_sec: records.len() as f64 / wall.max(1e-9),
        });
    }
    Ok(rows)
}

/// Up to `count` utterances of `language` in corpus order, skipping any
/// whose first symbol repeats the last symbol of the previous pick: with no
/// pause between them such a pair sounds like one long symbol.
pub fn select_for_concatenation(records: &[UtteranceRecord], language: usize, count: usize) -> Vec<UtteranceRecord> {
    let mut picked: Vec<UtteranceRecord> = Vec::with_capacity(count);
    for u in records.iter().filter(|u| u.language == language) {
        if picked.len() == count {
            break;
        }
        let joins_repeat = picked
            .last()
            .is_some_and(|p| p.transcript.last() == u.transcript.first());
        if !joins_repeat {
            picked.push(u.clone());
        }
    }
    picked
}

/// Features of consecutive utterances joined along time, with the joined
/// transcripts.
pub fn concatenate(records: &[UtteranceRecord]) -> Result<(Tensor, Vec<usize>)> {
    let first = records.first().ok_or_else(|| Error::config("nothing to concatenate"))?;
    let dim = first.feature_dim;
    let mut data = Vec::new();
    let mut reference = Vec::new();
    for u in records {
        if u.feature_dim != dim {
            return Err(Error::shape(format!("feature dim {} vs {dim}", u.feature_dim)));
        }
        data.extend(u.features.iter().map(|&v| v as f64));
        reference.extend_from_slice(&u.transcript);
    }
    let frames = data.len() / dim;
    Ok((Tensor::matrix(frames, dim, data)?, reference))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LongformReport {
    pub utterances: usize,
    pub frames: usize,
    pub window: usize,
    pub context: usize,
    pub batch_size: usize,
    pub chunks: usize,
    pub merged: usize,
    pub reference: Vec<usize>,
    pub hypothesis: Vec<usize>,
    pub edits: EditCounts,
    pub token_error_rate: f64,
    /// ASR error rate of decoding the same utterances one by one.
    pub per_utterance_error_rate: f64,
}

/// ASR of the concatenated utterances through chunked decoding, next to the
/// error rate of decoding them separately.
pub fn longform_parity(
    model: &Model,
    records: &[UtteranceRecord],
    window: usize,
    context: usize,
    batch_size: usize,
) -> Result<LongformReport> {
    let (features, reference) = concatenate(records)?;
    let out = longform_decode(
        model,
        &LongformRequest {
            features: &features,
            valid_frames: features.rows(),
            window,
            context,
            batch_size,
            task: Task::Asr,
            lang_hint: model.vocab.nolang(),
            prompt: vec![model.vocab.na()],
        },
    )?;
    let per_utt = evaluate_records(
        model,
        records,
        &EvalOptions {
            translation: false,
            batch_size,
            ..EvalOptions::default()
        },
    )?;
    let edits = edit_distance(&reference, &out.tokens);
    Ok(LongformReport {
        utterances: records.len(),
        frames: features.rows(),
        window,
        context,
        batch_size,
        chunks: out.plan.chunks.len(),
        merged: out.merged,
        token_error_rate: edits.distance as f64 / reference.len().max(1) as f64,
        reference,
        hypothesis: out.tokens,
        edits,
        per_utterance_error_rate: per_utt.asr.token_error_rate,
    })
}

#[cfg(test)]
mod tests;
