//! Encoder-only multi-task CTC network.
//!
//! A strided front-end downsamples the features, language and task
//! embeddings are prepended, and a stack of two-branch encoder layers runs
//! over the result. Selected intermediate layers emit CTC posteriors that are
//! fed back into the residual stream, and selected layers attend to a
//! separately encoded text prompt.

mod forward;
mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datagen::{AsrOnlyTaskToken, Vocabulary};
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

pub use forward::{
    compute_losses, compute_losses_from_trace, CtcLayer, EncoderInput, ForwardTrace, ForwardVars,
    LossBreakdown, LossVars,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub heads: usize,
    /// 1-based layers carrying an intermediate CTC head, ascending.
    pub inter_layers: Vec<usize>,
    /// How many of the leading intermediate layers are ASR-only.
    pub num_asr_only: usize,
    /// 1-based layers followed by prompt cross-attention.
    pub injection_layers: Vec<usize>,
    pub prompt_layers: usize,
    pub prompt_dim: usize,
    pub prompt_heads: usize,
    pub prompt_ffn: usize,
    /// Power of two; one stride-2 stage per factor of two.
    pub downsample: usize,
    pub frontend_channels: usize,
    pub feature_dim: usize,
    pub cg_hidden: usize,
    pub conv_kernel: usize,
    pub self_conditioning: bool,
    pub asr_only_task_token: AsrOnlyTaskToken,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_layers: 6,
            d_model: 64,
            heads: 4,
            inter_layers: vec![2, 4],
            num_asr_only: 1,
            injection_layers: vec![3, 6],
            prompt_layers: 2,
            prompt_dim: 32,
            prompt_heads: 4,
            prompt_ffn: 64,
            downsample: 2,
            frontend_channels: 64,
            feature_dim: 16,
            cg_hidden: 128,
            conv_kernel: 7,
            self_conditioning: true,
            asr_only_task_token: AsrOnlyTaskToken::Echo,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.num_layers;
        if n == 0 || self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::config("d_model must be a positive multiple of heads"));
        }
        if self.prompt_dim == 0 || self.prompt_heads == 0 || !self.prompt_dim.is_multiple_of(self.prompt_heads) {
            return Err(Error::config("prompt_dim must be a positive multiple of prompt_heads"));
        }
        if !self.inter_layers.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::config("inter_layers must be strictly ascending"));
        }
        if self.inter_layers.iter().any(|&s| s == 0 || s >= n) {
            return Err(Error::config("inter_layers must lie in 1..num_layers-1"));
        }
        if self.num_asr_only > self.inter_layers.len() {
            return Err(Error::config("num_asr_only exceeds the number of intermediate layers"));
        }
        if !self.injection_layers.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::config("injection_layers must be strictly ascending"));
        }
        if self.injection_layers.iter().any(|&t| t == 0 || t > n) {
            return Err(Error::config("injection_layers must lie in 1..num_layers"));
        }
        if !self.downsample.is_power_of_two() {
            return Err(Error::config("downsample must be a power of two"));
        }
        if self.conv_kernel.is_multiple_of(2) {
            return Err(Error::config("conv_kernel must be odd"));
        }
        if self.feature_dim == 0 || self.cg_hidden == 0 || self.frontend_channels == 0 || self.prompt_ffn == 0 {
            return Err(Error::config("dimensions must be positive"));
        }
        Ok(())
    }

    pub fn num_stages(&self) -> usize {
        self.downsample.trailing_zeros() as usize
    }

    /// Encoder rows for `raw_frames` input frames, including the two prepended rows.
    pub fn encoder_rows(&self, raw_frames: usize) -> usize {
        let mut t = raw_frames;
        for _ in 0..self.num_stages() {
            t = t.div_ceil(2);
        }
        t + 2
    }

    /// Attention-map entries of one forward pass.
    pub fn attention_activations(&self, raw_frames: usize, prompt_len: usize) -> usize {
        let r = self.encoder_rows(raw_frames);
        self.num_layers * self.heads * r * r
            + self.injection_layers.len() * self.heads * r * prompt_len
            + self.prompt_layers * self.prompt_heads * prompt_len * prompt_len
    }
}

/// Parameters together with the configuration and vocabulary they belong to.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore,
}

struct Init {
    rng: ChaCha8Rng,
    store: ParamStore,
}

impl Init {
    fn normal(&mut self, name: &str, rows: usize, cols: usize, std: f64) -> Result<()> {
        let dist = Normal::new(0.0, std).map_err(|e| Error::config(e.to_string()))?;
        let rng = &mut self.rng;
        let t = Tensor::from_fn(rows, cols, |_, _| dist.sample(rng));
        self.store.insert(name, t)?;
        Ok(())
    }

    /// Weight scaled by fan-in plus a zero bias.
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        self.normal(&format!("{name}.w"), fan_in, fan_out, (fan_in as f64).powf(-0.5))?;
        self.store.insert(format!("{name}.b"), Tensor::zeros(&[1, fan_out]))?;
        Ok(())
    }

    fn zeros(&mut self, name: &str, rows: usize, cols: usize) -> Result<()> {
        self.store.insert(name, Tensor::zeros(&[rows, cols]))?;
        Ok(())
    }

    fn layer_norm(&mut self, name: &str, dim: usize) -> Result<()> {
        self.store
            .insert(format!("{name}.g"), Tensor::matrix(1, dim, vec![1.0; dim])?)?;
        self.store.insert(format!("{name}.b"), Tensor::zeros(&[1, dim]))?;
        Ok(())
    }

    fn attention(&mut self, name: &str, q_in: usize, kv_in: usize, d: usize) -> Result<()> {
        self.linear(&format!("{name}.q"), q_in, d)?;
        // Key bias only shifts each score row by a constant, which softmax ignores.
        self.normal(&format!("{name}.k.w"), kv_in, d, (kv_in as f64).powf(-0.5))?;
        self.linear(&format!("{name}.v"), kv_in, d)?;
        Ok(())
    }
}

/// Number of special tokens with an input embedding row.
fn num_specials(vocab: &Vocabulary) -> usize {
    vocab.size() - vocab.lang_token(0)
}

impl Model {
    pub fn new(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let (d, v) = (c.d_model, vocab.size());
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
            store: ParamStore::new(),
        };
        let mut width = c.feature_dim;
        for i in 0..c.num_stages() {
            init.linear(&format!("frontend.{i}"), 3 * width, c.frontend_channels)?;
            width = c.frontend_channels;
        }
        init.linear("frontend.proj", width, d)?;
        init.normal("embed.special", num_specials(&vocab), d, 1.0)?;
        for l in 1..=c.num_layers {
            let p = format!("enc.{l}");
            init.layer_norm(&format!("{p}.att_ln"), d)?;
            init.attention(&format!("{p}.att"), d, d, d)?;
            init.linear(&format!("{p}.att.o"), d, d)?;
            init.layer_norm(&format!("{p}.cg_ln"), d)?;
            init.linear(&format!("{p}.cg.up"), d, 2 * c.cg_hidden)?;
            init.layer_norm(&format!("{p}.cg.gate_ln"), c.cg_hidden)?;
            init.normal(
                &format!("{p}.cg.conv"),
                c.conv_kernel,
                c.cg_hidden,
                (c.conv_kernel as f64).powf(-0.5),
            )?;
            init.linear(&format!("{p}.cg.down"), c.cg_hidden, d)?;
            init.linear(&format!("{p}.merge"), 2 * d, d)?;
        }
        init.normal("ctc.w1", d, v, (d as f64).powf(-0.5))?;
        init.normal("selfcond.w2", v, d, (v as f64).powf(-0.5))?;
        for &t in &c.injection_layers {
            let p = format!("xatt.{t}");
            init.layer_norm(&format!("{p}.ln"), d)?;
            init.attention(&p, d, c.prompt_dim, d)?;
            init.zeros(&format!("{p}.o.w"), d, d)?;
            init.zeros(&format!("{p}.o.b"), 1, d)?;
        }
        let dp = c.prompt_dim;
        init.normal("prompt.embed", v, dp, 1.0)?;
        for l in 1..=c.prompt_layers {
            let p = format!("prompt.{l}");
            init.layer_norm(&format!("{p}.ln1"), dp)?;
            init.attention(&format!("{p}.att"), dp, dp, dp)?;
            init.linear(&format!("{p}.att.o"), dp, dp)?;
            init.layer_norm(&format!("{p}.ln2"), dp)?;
            init.linear(&format!("{p}.ffn1"), dp, c.prompt_ffn)?;
            init.linear(&format!("{p}.ffn2"), c.prompt_ffn, dp)?;
        }
        init.layer_norm("prompt.final_ln", dp)?;
        Ok(Model {
            config,
            vocab,
            params: init.store,
        })
    }

    /// Rebuilds a model around externally loaded parameters, checking that
    /// every expected tensor is present with the right shape.
    pub fn from_parts(config: ModelConfig, vocab: Vocabulary, params: ParamStore) -> Result<Self> {
        let template = Model::new(config.clone(), vocab.clone(), 0)?;
        if template.params.len() != params.len() {
            return Err(Error::config(format!(
                "expected {} parameter tensors, found {}",
                template.params.len(),
                params.len()
            )));
        }
        for (_, name, t) in template.params.iter() {
            let got = params
                .by_name(name)
                .ok_or_else(|| Error::config(format!("missing parameter `{name}`")))?;
            if got.shape() != t.shape() {
                return Err(Error::shape(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        Ok(Model {
            config,
            vocab,
            params,
        })
    }

    /// Index of `token` in the special embedding table.
    pub(crate) fn special_row(&self, token: usize) -> Result<usize> {
        if self.vocab.is_special(token) {
            Ok(token - self.vocab.lang_token(0))
        } else {
            Err(Error::InvalidToken(token))
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_values()
    }
}
