//! Optimization: schedule, Adam, batch sampling and the training loop.

mod adam;
mod checkpoint;

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{sample_conditioning, Conditioning, Task, UtteranceRecord};
use crate::error::{Error, Result};
use crate::model::{EncoderInput, LossBreakdown, Model};
use crate::numerics::{Gradients, Tape};

pub use adam::{adam_step, lr_at_step, AdamHyper, AdamState};
pub use checkpoint::{
    checkpoint_bytes, checkpoint_from_bytes, load_checkpoint, save_checkpoint, Checkpoint, RngState,
    CHECKPOINT_VERSION,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub peak_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip: f64,
    pub seed: u64,
    /// Save every this many steps; 0 disables periodic checkpoints.
    pub checkpoint_interval: usize,
    pub divergence_factor: f64,
    pub divergence_patience: usize,
    pub train_corpus: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let h = AdamHyper::default();
        TrainConfig {
            batch_size: 16,
            total_steps: 20_000,
            warmup_steps: 1_000,
            peak_lr: 1e-3,
            beta1: h.beta1,
            beta2: h.beta2,
            eps: h.eps,
            grad_clip: 1.0,
            seed: 0,
            checkpoint_interval: 0,
            divergence_factor: 10.0,
            divergence_patience: 100,
            train_corpus: None,
            output_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps >= self.total_steps {
            return Err(Error::config("warmup_steps must be below total_steps"));
        }
        if self.peak_lr.is_nan() || self.peak_lr <= 0.0 {
            return Err(Error::config("peak_lr must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::config("Adam hyperparameters out of range"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// Everything besides the parameters needed to continue a run.
#[derive(Clone, Debug)]
pub struct TrainState {
    /// Completed optimizer steps.
    pub step: usize,
    pub adam: AdamState,
    pub rng: ChaCha8Rng,
    /// `L_total` of the first step, the divergence reference.
    pub initial_loss: Option<f64>,
    /// Consecutive steps that looked divergent.
    pub bad_steps: usize,
    pub diverged: bool,
}

impl TrainState {
    pub fn new(model: &Model, seed: u64) -> Self {
        TrainState {
            step: 0,
            adam: AdamState::new(&model.params),
            rng: ChaCha8Rng::seed_from_u64(seed),
            initial_loss: None,
            bad_steps: 0,
            diverged: false,
        }
    }
}

/// One sampled training example.
#[derive(Clone, Debug)]
pub struct Example<'a> {
    pub record: &'a UtteranceRecord,
    pub task: Task,
    pub conditioning: Conditioning,
}

pub fn sample_batch<'a, R: Rng>(
    model: &Model,
    records: &'a [UtteranceRecord],
    batch_size: usize,
    rng: &mut R,
) -> Vec<Example<'a>> {
    (0..batch_size)
        .map(|_| {
            let record = &records[rng.random_range(0..records.len())];
            let tasks = record.available_tasks();
            let task = tasks[rng.random_range(0..tasks.len())];
            let conditioning = sample_conditioning(&model.vocab, record, rng);
            Example {
                record,
                task,
                conditioning,
            }
        })
        .collect()
}

/// Losses and parameter gradients of one example.
pub fn example_gradients(model: &Model, ex: &Example<'_>) -> Result<(LossBreakdown, Gradients)> {
    let features = ex.record.features_tensor();
    let input = EncoderInput {
        features: &features,
        valid_frames: ex.record.frames,
        lang: ex.conditioning.lang_input,
        task: model.vocab.task_token(ex.task),
        prompt: &ex.conditioning.prompt,
    };
    let refs = model.references(ex.record, ex.task)?;
    let mut tape = Tape::with_params(&model.params);
    let (_, losses) = model.loss(&mut tape, &input, &refs)?;
    let grads = tape.backward(losses.total)?;
    Ok((losses.values(&tape), grads))
}

/// Batch-mean losses and gradients; examples run in parallel, reduction is in batch order.
pub fn batch_gradients(model: &Model, batch: &[Example<'_>]) -> Result<(f64, Vec<f64>, Gradients)> {
    let results: Vec<Result<(LossBreakdown, Gradients)>> =
        batch.par_iter().map(|ex| example_gradients(model, ex)).collect();
    let mut grads = model.params.zeros_like();
    let mut total = 0.0;
    let mut per_layer: Vec<f64> = Vec::new();
    for r in results {
        let (l, g) = r?;
        grads.accumulate(&g);
        total += l.total;
        let pl = l.per_layer();
        if per_layer.is_empty() {
            per_layer = vec![0.0; pl.len()];
        }
        for (a, b) in per_layer.iter_mut().zip(pl) {
            *a += b;
        }
    }
    let n = batch.len() as f64;
    grads.scale(1.0 / n);
    per_layer.iter_mut().for_each(|v| *v /= n);
    Ok((total / n, per_layer, grads))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub lr: f64,
    pub total_loss: f64,
    pub per_layer_losses: Vec<f64>,
    pub wall_ms: f64,
}

pub struct Trainer<'a> {
    pub model: Model,
    pub config: TrainConfig,
    pub state: TrainState,
    records: &'a [UtteranceRecord],
}

impl<'a> Trainer<'a> {
    pub fn new(model: Model, config: TrainConfig, records: &'a [UtteranceRecord]) -> Result<Self> {
        let state = TrainState::new(&model, config.seed);
        Self::resume(model, config, state, records)
    }

    pub fn resume(model: Model, config: TrainConfig, state: TrainState, records: &'a [UtteranceRecord]) -> Result<Self> {
        config.validate()?;
        if records.is_empty() {
            return Err(Error::config("training corpus is empty"));
        }
        if state.adam.m.len() != model.params.len() {
            return Err(Error::config("optimizer state does not match the model"));
        }
        Ok(Trainer {
            model,
            config,
            state,
            records,
        })
    }

    pub fn finished(&self) -> bool {
        self.state.diverged || self.state.step >= self.config.total_steps
    }

    fn looks_divergent(&self, loss: f64) -> bool {
        match self.state.initial_loss {
            _ if !loss.is_finite() => true,
            Some(init) => loss > self.config.divergence_factor * init,
            None => false,
        }
    }

    /// One optimizer step. Non-finite steps are not applied but count
    /// towards the divergence detector.
    pub fn step(&mut self) -> Result<StepMetrics> {
        let started = Instant::now();
        let k = self.state.step + 1;
        let c = &self.config;
        let lr = lr_at_step(k, c.warmup_steps, c.total_steps, c.peak_lr)?;
        let batch = sample_batch(&self.model, self.records, c.batch_size, &mut self.state.rng);
        let (total, per_layer, mut grads) = batch_gradients(&self.model, &batch)?;

        if self.state.initial_loss.is_none() && total.is_finite() {
            self.state.initial_loss = Some(total);
        }
        let finite = total.is_finite() && grads.iter().all(|(_, g)| g.is_finite());
        if self.looks_divergent(total) || !finite {
            self.state.bad_steps += 1;
            if self.state.bad_steps >= c.divergence_patience {
                self.state.diverged = true;
            }
        } else {
            self.state.bad_steps = 0;
        }
        if finite {
            let norm = grads.global_norm();
            if c.grad_clip > 0.0 && norm > c.grad_clip {
                grads.scale(c.grad_clip / norm);
            }
            adam_step(&mut self.model.params, &grads, &mut self.state.adam, lr, &c.adam())?;
        }
        self.state.step = k;
        Ok(StepMetrics {
            step: k,
            lr,
            total_loss: total,
            per_layer_losses: per_layer,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Steps until `until` (capped at the schedule end) or divergence,
    /// writing one JSON line per step to `log` and periodic checkpoints to
    /// the configured output directory.
    pub fn run(&mut self, until: usize, mut log: Option<&mut dyn Write>) -> Result<Vec<StepMetrics>> {
        let until = until.min(self.config.total_steps);
        let mut history = Vec::new();
        while self.state.step < until && !self.state.diverged {
            let m = self.step()?;
            if let Some(w) = log.as_deref_mut() {
                serde_json::to_writer(&mut *w, &m)?;
                w.write_all(b"\n")?;
            }
            history.push(m);
            if let (Some(dir), n) = (&self.config.output_dir, self.config.checkpoint_interval) {
                if n > 0 && self.state.step.is_multiple_of(n) {
                    std::fs::create_dir_all(dir)?;
                    let path = dir.join(format!("step-{}.ockp", self.state.step));
                    save_checkpoint(&path, &self.model, Some(&self.state))?;
                }
            }
        }
        Ok(history)
    }
}
