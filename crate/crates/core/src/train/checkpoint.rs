use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use super::TrainState;
use crate::datagen::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numerics::{ParamStore, Tensor};

const MAGIC: &[u8; 4] = b"OCKP";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: Vec<u8>,
    pub stream: u64,
    /// Decimal, since JSON numbers cannot hold a u128.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed().to_vec(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let seed: [u8; 32] = self
            .seed
            .as_slice()
            .try_into()
            .map_err(|_| Error::config("rng seed must be 32 bytes"))?;
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::config("rng word position is not an integer"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TrainHeader {
    step: usize,
    adam_steps: u64,
    rng: RngState,
    initial_loss: Option<f64>,
    bad_steps: usize,
    diverged: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocabulary: Vocabulary,
    step: usize,
    train: Option<TrainHeader>,
}

/// Parameters plus, for training checkpoints, the optimizer state.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub state: Option<TrainState>,
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) -> Result<()> {
    let n = u16::try_from(name.len()).map_err(|_| Error::config("tensor name too long"))?;
    out.extend_from_slice(&n.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

pub fn checkpoint_bytes(model: &Model, state: Option<&TrainState>) -> Result<Vec<u8>> {
    let header = Header {
        config: model.config.clone(),
        vocabulary: model.vocab.clone(),
        step: state.map_or(0, |s| s.step),
        train: state.map(|s| TrainHeader {
            step: s.step,
            adam_steps: s.adam.steps,
            rng: RngState::capture(&s.rng),
            initial_loss: s.initial_loss,
            bad_steps: s.bad_steps,
            diverged: s.diverged,
        }),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(CHECKPOINT_VERSION);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    let mut count = model.params.len();
    if state.is_some() {
        count *= 3;
    }
    out.extend_from_slice(&(count as u32).to_le_bytes());
    for (_, name, t) in model.params.iter() {
        put_tensor(&mut out, name, t)?;
    }
    if let Some(s) = state {
        for (i, (_, name, _)) in model.params.iter().enumerate() {
            put_tensor(&mut out, &format!("adam.m.{name}"), &s.adam.m[i])?;
            put_tensor(&mut out, &format!("adam.v.{name}"), &s.adam.v[i])?;
        }
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, model: &Model, state: Option<&TrainState>) -> Result<()> {
    let bytes = checkpoint_bytes(model, state)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                msg: format!("truncated {what}"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let n = u16::from_le_bytes(self.take(2, "tensor name length")?.try_into().unwrap()) as usize;
        let at = self.pos;
        let name = std::str::from_utf8(self.take(n, "tensor name")?)
            .map_err(|_| Error::Format {
                offset: at as u64,
                msg: "tensor name is not UTF-8".into(),
            })?
            .to_string();
        let ndim = self.take(1, "tensor rank")?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u32("tensor dim")? as usize);
        }
        let len: usize = shape.iter().product();
        let raw = self.take(len * 8, "tensor data")?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Ok((name, Tensor::new(shape, data)?))
    }
}

pub fn checkpoint_from_bytes(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "bad magic, not a checkpoint".into(),
        });
    }
    let version = r.take(1, "version")?[0];
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let hlen = r.u32("header length")? as usize;
    let at = r.pos;
    let header: Header = serde_json::from_slice(r.take(hlen, "header")?).map_err(|e| Error::Format {
        offset: at as u64,
        msg: format!("header: {e}"),
    })?;
    header.vocabulary.validate()?;
    let count = r.u32("tensor count")? as usize;
    let mut params = ParamStore::new();
    let mut moments = std::collections::BTreeMap::new();
    for _ in 0..count {
        let (name, t) = r.tensor()?;
        if name.starts_with("adam.") {
            moments.insert(name, t);
        } else {
            params.insert(name, t)?;
        }
    }
    if r.pos != buf.len() {
        return Err(Error::Format {
            offset: r.pos as u64,
            msg: "trailing bytes after tensors".into(),
        });
    }
    let model = Model::from_parts(header.config, header.vocabulary, params)?;
    let state = match header.train {
        None => None,
        Some(h) => {
            let mut adam = AdamState::new(&model.params);
            adam.steps = h.adam_steps;
            for (i, (_, name, _)) in model.params.iter().enumerate() {
                for (kind, slot) in [("m", &mut adam.m[i]), ("v", &mut adam.v[i])] {
                    let key = format!("adam.{kind}.{name}");
                    let t = moments
                        .remove(&key)
                        .ok_or_else(|| Error::config(format!("missing optimizer tensor `{key}`")))?;
                    if t.shape() != slot.shape() {
                        return Err(Error::shape(format!("optimizer tensor `{key}`")));
                    }
                    *slot = t;
                }
            }
            Some(TrainState {
                step: h.step,
                adam,
                rng: h.rng.restore()?,
                initial_loss: h.initial_loss,
                bad_steps: h.bad_steps,
                diverged: h.diverged,
            })
        }
    };
    Ok(Checkpoint { model, state })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    checkpoint_from_bytes(&std::fs::read(path)?)
}
