use rand::Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{Task, Vocabulary};
use super::UtteranceRecord;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerRole {
    AsrOnly,
    TaskDependent,
}

/// Task token written into the references of ASR-only layers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AsrOnlyTaskToken {
    /// Repeat the input task token.
    #[default]
    Echo,
    /// Always write `<asr>`.
    ForceAsr,
}

pub fn build_augmented_reference(
    vocab: &Vocabulary,
    utt: &UtteranceRecord,
    task: Task,
    role: LayerRole,
) -> Result<Vec<usize>> {
    build_augmented_reference_with(vocab, utt, task, role, AsrOnlyTaskToken::Echo)
}

/// `[<lang>, <task>] ++ text`, where the text is the transcript for ASR-only
/// layers and ASR, and the translation otherwise.
pub fn build_augmented_reference_with(
    vocab: &Vocabulary,
    utt: &UtteranceRecord,
    task: Task,
    role: LayerRole,
    policy: AsrOnlyTaskToken,
) -> Result<Vec<usize>> {
    if let Task::Translate(k) = task {
        if k >= vocab.num_languages() {
            return Err(Error::InvalidToken(vocab.st_token(k)));
        }
    }
    let (task_token, text) = match role {
        LayerRole::AsrOnly => {
            // Still fail on a missing translation: the task itself is invalid.
            utt.target_text(task)?;
            let tok = match policy {
                AsrOnlyTaskToken::Echo => vocab.task_token(task),
                AsrOnlyTaskToken::ForceAsr => vocab.asr(),
            };
            (tok, utt.transcript.as_slice())
        }
        LayerRole::TaskDependent => (vocab.task_token(task), utt.target_text(task)?),
    };
    let mut out = Vec::with_capacity(text.len() + 2);
    out.push(vocab.lang_token(utt.language));
    out.push(task_token);
    out.extend_from_slice(text);
    Ok(out)
}

/// References for every CTC layer: the intermediate layers in order, then the final layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AugmentedReference {
    pub layers: Vec<Vec<usize>>,
}

impl AugmentedReference {
    pub fn final_layer(&self) -> &[usize] {
        self.layers.last().expect("at least the final layer")
    }

    pub fn intermediate(&self) -> &[Vec<usize>] {
        &self.layers[..self.layers.len() - 1]
    }
}

/// The first `num_asr_only` intermediate layers are ASR-only; the rest and
/// the final layer follow the task.
pub fn build_references(
    vocab: &Vocabulary,
    utt: &UtteranceRecord,
    task: Task,
    num_intermediate: usize,
    num_asr_only: usize,
    policy: AsrOnlyTaskToken,
) -> Result<AugmentedReference> {
    if num_asr_only > num_intermediate {
        return Err(Error::config("more ASR-only layers than intermediate layers"));
    }
    let mut layers = Vec::with_capacity(num_intermediate + 1);
    for i in 0..=num_intermediate {
        let role = if i < num_asr_only {
            LayerRole::AsrOnly
        } else {
            LayerRole::TaskDependent
        };
        layers.push(build_augmented_reference_with(vocab, utt, task, role, policy)?);
    }
    Ok(AugmentedReference { layers })
}

/// Encoder-side conditioning for one training example.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Conditioning {
    pub lang_input: usize,
    pub prompt: Vec<usize>,
}

/// Replaces the language with `<nolang>` half the time and uses the previous
/// sentence as prompt half the time, falling back to `[<na>]`.
pub fn sample_conditioning<R: Rng + ?Sized>(
    vocab: &Vocabulary,
    utt: &UtteranceRecord,
    rng: &mut R,
) -> Conditioning {
    let lang_input = if rng.random_bool(0.5) {
        vocab.nolang()
    } else {
        vocab.lang_token(utt.language)
    };
    let use_prev = rng.random_bool(0.5);
    let prompt = match (&utt.previous, use_prev) {
        (Some(p), true) if !p.is_empty() => p.clone(),
        _ => vec![vocab.na()],
    };
    Conditioning { lang_input, prompt }
}
