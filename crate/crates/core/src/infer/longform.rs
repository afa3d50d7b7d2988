use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::Task;
use crate::error::{Error, Result};
use crate::model::{EncoderInput, Model};
use crate::numerics::Tensor;

use super::read_out;

/// One window of a chunk plan, in encoder frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub start: usize,
    pub end: usize,
    pub keep_start: usize,
    pub keep_end: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkPlan {
    pub total: usize,
    pub window: usize,
    pub context: usize,
    pub chunks: Vec<Chunk>,
}

impl ChunkPlan {
    pub fn stride(&self) -> usize {
        self.window - 2 * self.context
    }
}

/// Splits `total` frames into windows of `window` frames overlapping by
/// `2 * context`. Chunk `i` starts at `i * stride` and keeps the centre
/// `[start + context, start + window - context)`, except that the first
/// chunk keeps from 0 and the last keeps to `total`.
pub fn plan_chunks(total: usize, window: usize, context: usize) -> Result<ChunkPlan> {
    if window <= 2 * context {
        return Err(Error::config(format!(
            "chunk window {window} must exceed twice the context {context}"
        )));
    }
    let stride = window - 2 * context;
    let mut chunks = Vec::new();
    if total <= window {
        chunks.push(Chunk {
            start: 0,
            end: total,
            keep_start: 0,
            keep_end: total,
        });
    } else {
        let mut i = 0;
        loop {
            let start = i * stride;
            let last = start + window >= total;
            chunks.push(Chunk {
                start,
                end: (start + window).min(total),
                keep_start: if i == 0 { 0 } else { start + context },
                keep_end: if last { total } else { start + window - context },
            });
            if last {
                break;
            }
            i += 1;
        }
    }
    Ok(ChunkPlan {
        total,
        window,
        context,
        chunks,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LongformOutput {
    pub language: Option<usize>,
    pub tokens: Vec<usize>,
    /// Absolute encoder frame of each token.
    pub token_frames: Vec<usize>,
    pub plan: ChunkPlan,
    /// Seam duplicates that were merged.
    pub merged: usize,
}

/// Settings for [`longform_decode`].
#[derive(Clone, Debug)]
pub struct LongformRequest<'a> {
    pub features: &'a Tensor,
    pub valid_frames: usize,
    /// Window and context in encoder frames.
    pub window: usize,
    pub context: usize,
    pub batch_size: usize,
    pub task: Task,
    pub lang_hint: usize,
    pub prompt: Vec<usize>,
}

struct ChunkResult {
    language: Option<usize>,
    tokens: Vec<(usize, usize)>,
}

fn decode_chunk(model: &Model, req: &LongformRequest<'_>, chunk: &Chunk) -> Result<ChunkResult> {
    let factor = model.config.downsample;
    let dim = req.features.cols();
    let raw_start = chunk.start * factor;
    let raw_rows = req.window.min(req.valid_frames.div_ceil(factor)) * factor;
    let raw_valid = (chunk.end * factor).min(req.valid_frames) - raw_start;
    let mut data = vec![0.0; raw_rows * dim];
    let src = &req.features.data()[raw_start * dim..(raw_start + raw_valid) * dim];
    data[..src.len()].copy_from_slice(src);
    let features = Tensor::matrix(raw_rows, dim, data)?;

    let trace = model.encode_speech(&EncoderInput {
        features: &features,
        valid_frames: raw_valid,
        lang: req.lang_hint,
        task: model.vocab.task_token(req.task),
        prompt: &req.prompt,
    })?;
    let h = read_out(&model.vocab, trace.final_log_probs(), trace.valid);
    let tokens = h
        .tokens
        .iter()
        .zip(&h.token_frames)
        .map(|(&tok, &row)| (tok, chunk.start + row.saturating_sub(2)))
        .filter(|&(_, frame)| frame >= chunk.keep_start && frame < chunk.keep_end)
        .collect();
    Ok(ChunkResult {
        language: h.language,
        tokens,
    })
}

/// Concatenates kept `(token, frame)` emissions, dropping the first token
/// of a chunk when it repeats the previous chunk's last token and both lie
/// within the context width of their shared boundary.
pub(crate) fn stitch(plan: &ChunkPlan, chunks: &[&[(usize, usize)]]) -> (Vec<(usize, usize)>, usize) {
    let mut tokens: Vec<(usize, usize)> = Vec::new();
    let mut merged = 0;
    for (i, &chunk) in chunks.iter().enumerate() {
        let mut incoming = chunk;
        if i > 0 {
            let boundary = plan.chunks[i].keep_start;
            if let (Some(&(prev, pf)), Some(&(next, nf))) = (tokens.last(), incoming.first()) {
                if prev == next && pf + plan.context >= boundary && nf <= boundary + plan.context {
                    incoming = &incoming[1..];
                    merged += 1;
                }
            }
        }
        tokens.extend_from_slice(incoming);
    }
    (tokens, merged)
}

/// Decodes a long input by chunking the encoder frame axis, decoding chunks
/// in concurrent batches and stitching the kept emissions.
pub fn longform_decode(model: &Model, req: &LongformRequest<'_>) -> Result<LongformOutput> {
    let factor = model.config.downsample;
    if req.valid_frames == 0 || req.valid_frames > req.features.rows() {
        return Err(Error::InputTooShort {
            frames: req.valid_frames,
            factor,
        });
    }
    let plan = plan_chunks(req.valid_frames.div_ceil(factor), req.window, req.context)?;
    let mut results = Vec::with_capacity(plan.chunks.len());
    for batch in plan.chunks.chunks(req.batch_size.max(1)) {
        let part: Vec<Result<ChunkResult>> = batch.par_iter().map(|c| decode_chunk(model, req, c)).collect();
        for r in part {
            results.push(r?);
        }
    }

    let kept: Vec<&[(usize, usize)]> = results.iter().map(|r| r.tokens.as_slice()).collect();
    let (tokens, merged) = stitch(&plan, &kept);
    let (tokens, token_frames) = tokens.into_iter().unzip();
    Ok(LongformOutput {
        language: results.first().and_then(|r| r.language),
        tokens,
        token_frames,
        plan,
        merged,
    })
}
