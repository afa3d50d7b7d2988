use serde::{Deserialize, Serialize};

use super::layers::{branch_layer, layer_norm, linear, mha, param, prompt_layer, sinusoid};
use super::Model;
use crate::ctc::{ctc_loss, ctc_neg_log_likelihood, CtcTarget};
use crate::datagen::{build_references, AugmentedReference, Task, UtteranceRecord};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// One encoder input: raw features (possibly padded) and conditioning tokens.
#[derive(Clone, Copy, Debug)]
pub struct EncoderInput<'a> {
    pub features: &'a Tensor,
    /// Leading rows of `features` that hold real frames.
    pub valid_frames: usize,
    pub lang: usize,
    pub task: usize,
    pub prompt: &'a [usize],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CtcLayer {
    Intermediate(usize),
    Final,
}

impl std::fmt::Display for CtcLayer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CtcLayer::Intermediate(l) => write!(f, "intermediate layer {l}"),
            CtcLayer::Final => write!(f, "final layer"),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SelfCondVars {
    pub layer: usize,
    pub a: Var,
    pub b: Var,
    pub log_probs: Var,
}

/// Tape handles for every named intermediate of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    /// `X⁽⁰⁾ … X⁽ᴺ⁾`.
    pub layers: Vec<Var>,
    pub self_cond: Vec<SelfCondVars>,
    /// Layer output before prompt injection, per injection layer.
    pub injections: Vec<(usize, Var)>,
    pub prompt: Var,
    pub final_log_probs: Var,
    /// Encoder rows, including the two prepended rows and any padding.
    pub rows: usize,
    /// Leading encoder rows derived from real frames, including the two prepended rows.
    pub valid: usize,
    pub attention_activations: usize,
}

impl ForwardVars {
    /// CTC grids in reference order: intermediate layers, then final.
    pub fn ctc_grids(&self) -> Vec<(CtcLayer, Var)> {
        self.self_cond
            .iter()
            .map(|s| (CtcLayer::Intermediate(s.layer), s.log_probs))
            .chain(std::iter::once((CtcLayer::Final, self.final_log_probs)))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelfCondTrace {
    pub layer: usize,
    pub a: Tensor,
    pub b: Tensor,
}

/// Concrete values of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub layers: Vec<Tensor>,
    pub self_cond: Vec<SelfCondTrace>,
    pub injections: Vec<(usize, Tensor)>,
    pub prompt: Tensor,
    pub log_probs: Vec<(CtcLayer, Tensor)>,
    pub rows: usize,
    pub valid: usize,
    pub attention_activations: usize,
}

impl ForwardTrace {
    pub fn final_log_probs(&self) -> &Tensor {
        &self.log_probs.last().expect("final grid").1
    }
}

#[derive(Clone, Debug)]
pub struct LossVars {
    pub final_loss: Var,
    pub intermediate: Vec<(usize, Var)>,
    pub total: Var,
}

impl LossVars {
    pub fn values(&self, tape: &Tape) -> LossBreakdown {
        LossBreakdown {
            final_loss: tape.value(self.final_loss).item(),
            intermediate: self
                .intermediate
                .iter()
                .map(|&(l, v)| (l, tape.value(v).item()))
                .collect(),
            total: tape.value(self.total).item(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub final_loss: f64,
    pub intermediate: Vec<(usize, f64)>,
    pub total: f64,
}

impl LossBreakdown {
    /// Intermediate losses in layer order followed by the final loss.
    pub fn per_layer(&self) -> Vec<f64> {
        self.intermediate
            .iter()
            .map(|&(_, v)| v)
            .chain(std::iter::once(self.final_loss))
            .collect()
    }
}

fn layer_error(layer: CtcLayer, e: Error) -> Error {
    Error::LayerLoss {
        layer: layer.to_string(),
        source: Box::new(e),
    }
}

fn check_refs(refs: &AugmentedReference, grids: usize) -> Result<()> {
    if refs.layers.len() != grids {
        return Err(Error::config(format!(
            "{} references for {grids} CTC layers",
            refs.layers.len()
        )));
    }
    Ok(())
}

/// Per-layer CTC losses over the valid encoder rows and their average.
pub fn compute_losses(
    tape: &mut Tape,
    vars: &ForwardVars,
    refs: &AugmentedReference,
    blank: usize,
) -> Result<LossVars> {
    let grids = vars.ctc_grids();
    check_refs(refs, grids.len())?;
    let mut losses = Vec::with_capacity(grids.len());
    for ((layer, lp), tokens) in grids.iter().zip(&refs.layers) {
        let target = CtcTarget::new(tokens.clone(), blank).map_err(|e| layer_error(*layer, e))?;
        let loss = ctc_loss(tape, *lp, &target, vars.valid, blank).map_err(|e| layer_error(*layer, e))?;
        losses.push(loss);
    }
    let final_loss = *losses.last().expect("final loss");
    let mut sum = final_loss;
    for &l in &losses[..losses.len() - 1] {
        sum = tape.add(sum, l)?;
    }
    let total = tape.scale(sum, 1.0 / losses.len() as f64);
    let intermediate = vars
        .self_cond
        .iter()
        .zip(&losses)
        .map(|(s, &l)| (s.layer, l))
        .collect();
    Ok(LossVars {
        final_loss,
        intermediate,
        total,
    })
}

/// Same as [`compute_losses`] but evaluated directly on a trace.
pub fn compute_losses_from_trace(trace: &ForwardTrace, refs: &AugmentedReference, blank: usize) -> Result<LossBreakdown> {
    check_refs(refs, trace.log_probs.len())?;
    let mut values = Vec::with_capacity(refs.layers.len());
    for ((layer, lp), tokens) in trace.log_probs.iter().zip(&refs.layers) {
        let target = CtcTarget::new(tokens.clone(), blank).map_err(|e| layer_error(*layer, e))?;
        let nll = ctc_neg_log_likelihood(lp, &target, trace.valid, blank).map_err(|e| layer_error(*layer, e))?;
        values.push((*layer, nll));
    }
    let final_loss = values.last().expect("final loss").1;
    let mut sum = final_loss;
    for &(_, v) in &values[..values.len() - 1] {
        sum += v;
    }
    let intermediate = values[..values.len() - 1]
        .iter()
        .map(|&(l, v)| match l {
            CtcLayer::Intermediate(i) => (i, v),
            CtcLayer::Final => unreachable!(),
        })
        .collect();
    Ok(LossBreakdown {
        final_loss,
        intermediate,
        total: sum / values.len() as f64,
    })
}

impl Model {
    fn check_input(&self, input: &EncoderInput<'_>) -> Result<()> {
        let c = &self.config;
        let f = input.features;
        if f.shape().len() != 2 || f.cols() != c.feature_dim {
            return Err(Error::shape(format!(
                "features of shape {:?}, expected (T, {})",
                f.shape(),
                c.feature_dim
            )));
        }
        if f.rows() < c.downsample || input.valid_frames == 0 {
            return Err(Error::InputTooShort {
                frames: f.rows().min(input.valid_frames),
                factor: c.downsample,
            });
        }
        if input.valid_frames > f.rows() {
            return Err(Error::shape(format!(
                "valid_frames {} exceeds {} rows",
                input.valid_frames,
                f.rows()
            )));
        }
        if !self.vocab.is_lang_input(input.lang) {
            return Err(Error::InvalidToken(input.lang));
        }
        if self.vocab.task_of_token(input.task).is_none() {
            return Err(Error::InvalidToken(input.task));
        }
        if input.prompt.is_empty() {
            return Err(Error::shape("prompt must hold at least one token"));
        }
        if let Some(&bad) = input.prompt.iter().find(|&&p| p >= self.vocab.size()) {
            return Err(Error::InvalidToken(bad));
        }
        Ok(())
    }

    /// Downsampled speech frames `T × d` and their valid count.
    pub(crate) fn frontend(&self, t: &mut Tape, input: &EncoderInput<'_>) -> Result<(Var, usize)> {
        let mut x = t.constant(input.features.clone());
        let mut valid = input.valid_frames;
        for i in 0..self.config.num_stages() {
            let masked = t.mask_rows(x, valid);
            let stacked = t.frame_stack(masked, 3, 2, 1)?;
            let h = linear(t, stacked, &format!("frontend.{i}"))?;
            x = t.gelu(h);
            valid = valid.div_ceil(2);
        }
        Ok((linear(t, x, "frontend.proj")?, valid))
    }

    pub(crate) fn prompt_encoder(&self, t: &mut Tape, prompt: &[usize], counter: &mut usize) -> Result<Var> {
        let table = param(t, "prompt.embed")?;
        let e = t.gather_rows(table, prompt)?;
        let pos = t.constant(sinusoid(prompt.len(), self.config.prompt_dim));
        let mut x = t.add(e, pos)?;
        for l in 1..=self.config.prompt_layers {
            x = prompt_layer(t, x, &format!("prompt.{l}"), self.config.prompt_heads, counter)?;
        }
        layer_norm(t, x, "prompt.final_ln")
    }

    /// Records the full encoder on `t`.
    pub fn forward(&self, t: &mut Tape, input: &EncoderInput<'_>) -> Result<ForwardVars> {
        self.check_input(input)?;
        let c = &self.config;
        let mut counter = 0;
        let (speech, speech_valid) = self.frontend(t, input)?;

        let table = param(t, "embed.special")?;
        let ids = [self.special_row(input.lang)?, self.special_row(input.task)?];
        let specials = t.gather_rows(table, &ids)?;
        let x = t.concat_rows(&[specials, speech])?;
        let rows = t.value(x).rows();
        let pos = t.constant(sinusoid(rows, c.d_model));
        let mut x = t.add(x, pos)?;
        let valid = speech_valid + 2;

        let prompt = self.prompt_encoder(t, input.prompt, &mut counter)?;
        let prompt_len = input.prompt.len();
        let w1 = param(t, "ctc.w1")?;
        let w2 = param(t, "selfcond.w2")?;

        let mut layers = vec![x];
        let mut self_cond = Vec::new();
        let mut injections = Vec::new();
        for l in 1..=c.num_layers {
            x = branch_layer(t, x, &format!("enc.{l}"), c.heads, c.cg_hidden, valid, &mut counter)?;
            if c.injection_layers.contains(&l) {
                let p = format!("xatt.{l}");
                let h = layer_norm(t, x, &format!("{p}.ln"))?;
                let ca = mha(t, h, prompt, &p, &format!("{p}.o"), c.heads, prompt_len, &mut counter)?;
                injections.push((l, x));
                x = t.add(x, ca)?;
            }
            if c.inter_layers.contains(&l) {
                let a = x;
                let logits = t.matmul(a, w1)?;
                let b = t.softmax(logits)?;
                let log_probs = t.log_softmax(logits)?;
                if c.self_conditioning {
                    let back = t.matmul(b, w2)?;
                    x = t.add(a, back)?;
                }
                self_cond.push(SelfCondVars {
                    layer: l,
                    a,
                    b,
                    log_probs,
                });
            }
            layers.push(x);
        }
        let logits = t.matmul(x, w1)?;
        let final_log_probs = t.log_softmax(logits)?;
        Ok(ForwardVars {
            layers,
            self_cond,
            injections,
            prompt,
            final_log_probs,
            rows,
            valid,
            attention_activations: counter,
        })
    }

    /// Runs the encoder and returns every named intermediate.
    pub fn encode_speech(&self, input: &EncoderInput<'_>) -> Result<ForwardTrace> {
        let mut t = Tape::with_params(&self.params);
        let v = self.forward(&mut t, input)?;
        let val = |x: Var| t.value(x).clone();
        Ok(ForwardTrace {
            layers: v.layers.iter().map(|&x| val(x)).collect(),
            self_cond: v
                .self_cond
                .iter()
                .map(|s| SelfCondTrace {
                    layer: s.layer,
                    a: val(s.a),
                    b: val(s.b),
                })
                .collect(),
            injections: v.injections.iter().map(|&(l, x)| (l, val(x))).collect(),
            prompt: val(v.prompt),
            log_probs: v.ctc_grids().into_iter().map(|(l, x)| (l, val(x))).collect(),
            rows: v.rows,
            valid: v.valid,
            attention_activations: v.attention_activations,
        })
    }

    pub fn references(&self, utt: &UtteranceRecord, task: Task) -> Result<AugmentedReference> {
        build_references(
            &self.vocab,
            utt,
            task,
            self.config.inter_layers.len(),
            self.config.num_asr_only,
            self.config.asr_only_task_token,
        )
    }

    /// Forward pass plus all CTC losses on one tape.
    pub fn loss(
        &self,
        t: &mut Tape,
        input: &EncoderInput<'_>,
        refs: &AugmentedReference,
    ) -> Result<(ForwardVars, LossVars)> {
        let vars = self.forward(t, input)?;
        let losses = compute_losses(t, &vars, refs, self.vocab.blank())?;
        Ok((vars, losses))
    }
}
