//! Deterministic synthetic multilingual corpus.
//!
//! Each language owns a disjoint block of symbols. An utterance is a symbol
//! sequence rendered as noisy per-symbol feature vectors, each repeated for a
//! random number of frames. Translations map symbols through a fixed
//! per-language-pair bijection and then swap every adjacent pair.

mod io;
mod reference;
mod vocab;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::ctc::CtcTarget;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub use io::{read_corpus, read_corpus_bytes, write_corpus, write_corpus_bytes, CORPUS_VERSION};
pub use reference::{
    build_augmented_reference, build_augmented_reference_with, build_references, sample_conditioning,
    AsrOnlyTaskToken, AugmentedReference, Conditioning, LayerRole,
};
pub use vocab::{Task, Vocabulary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub num_languages: usize,
    pub symbols_per_language: usize,
    /// Inclusive range of symbols per utterance.
    pub min_symbols: usize,
    pub max_symbols: usize,
    /// Inclusive range of raw frames each symbol is repeated for.
    pub min_frames_per_symbol: usize,
    pub max_frames_per_symbol: usize,
    pub feature_dim: usize,
    pub noise_std: f64,
    pub translation_seed: u64,
    pub train_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
    /// Longest run of consecutive same-language utterances sharing context.
    pub max_recording_len: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            num_languages: 3,
            symbols_per_language: 12,
            min_symbols: 3,
            max_symbols: 10,
            min_frames_per_symbol: 4,
            max_frames_per_symbol: 4,
            feature_dim: 16,
            noise_std: 0.4,
            translation_seed: 7,
            train_size: 2000,
            dev_size: 200,
            test_size: 200,
            max_recording_len: 4,
            seed: 1,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        Vocabulary::new(self.num_languages, self.symbols_per_language)?;
        if self.symbols_per_language < 2 {
            return Err(Error::config("need two symbols per language to avoid repeats"));
        }
        if self.min_symbols == 0 || self.min_symbols > self.max_symbols {
            return Err(Error::config("symbol length range must be nonempty and start at 1"));
        }
        if self.min_frames_per_symbol < 2 || self.min_frames_per_symbol > self.max_frames_per_symbol {
            return Err(Error::config("frames per symbol must be at least 2"));
        }
        if self.feature_dim == 0 || self.feature_dim > u16::MAX as usize {
            return Err(Error::config("feature_dim out of range"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::config("noise_std must be finite and non-negative"));
        }
        if self.max_recording_len == 0 {
            return Err(Error::config("max_recording_len must be positive"));
        }
        if self.max_symbols > u16::MAX as usize {
            return Err(Error::config("max_symbols exceeds 16-bit length"));
        }
        Ok(())
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::new(self.num_languages, self.symbols_per_language)
    }

    pub fn split_size(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_size,
            Split::Dev => self.dev_size,
            Split::Test => self.test_size,
        }
    }
}

pub fn build_vocabulary(spec: &CorpusSpec) -> Result<Vocabulary> {
    spec.vocabulary()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.octc", self.name())
    }

    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Dev => 2,
            Split::Test => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceRecord {
    pub id: u32,
    pub language: usize,
    pub frames: usize,
    pub feature_dim: usize,
    /// Row-major `frames × feature_dim`.
    pub features: Vec<f32>,
    pub transcript: Vec<usize>,
    pub translations: BTreeMap<usize, Vec<usize>>,
    pub previous: Option<Vec<usize>>,
}

impl UtteranceRecord {
    pub fn features_tensor(&self) -> Tensor {
        let data = self.features.iter().map(|&v| v as f64).collect();
        Tensor::from_parts(vec![self.frames, self.feature_dim], data)
    }

    /// Features zero-padded (or truncated) to exactly `frames` rows.
    pub fn padded_features(&self, frames: usize) -> Tensor {
        let mut data = vec![0.0; frames * self.feature_dim];
        let n = frames.min(self.frames) * self.feature_dim;
        for (d, s) in data.iter_mut().zip(&self.features[..n]) {
            *d = *s as f64;
        }
        Tensor::from_parts(vec![frames, self.feature_dim], data)
    }

    pub fn translation(&self, lang: usize) -> Result<&[usize]> {
        self.translations
            .get(&lang)
            .map(Vec::as_slice)
            .ok_or(Error::MissingTranslation { utt: self.id, lang })
    }

    /// Tasks with a reference: ASR plus every available translation.
    pub fn available_tasks(&self) -> Vec<Task> {
        std::iter::once(Task::Asr)
            .chain(self.translations.keys().map(|&k| Task::Translate(k)))
            .collect()
    }

    /// Text reference for `task`.
    pub fn target_text(&self, task: Task) -> Result<&[usize]> {
        match task {
            Task::Asr => Ok(&self.transcript),
            Task::Translate(k) => self.translation(k),
        }
    }

    pub fn check_invariants(&self, vocab: &Vocabulary) -> Result<()> {
        let in_lang = |ids: &[usize], lang: usize| {
            ids.iter().all(|&t| vocab.language_of_symbol(t) == Some(lang))
        };
        if self.features.len() != self.frames * self.feature_dim {
            return Err(Error::shape(format!("utterance {} feature size", self.id)));
        }
        if self.language >= vocab.num_languages() || !in_lang(&self.transcript, self.language) {
            return Err(Error::config(format!(
                "utterance {} transcript leaves its language range",
                self.id
            )));
        }
        for (&k, t) in &self.translations {
            if k >= vocab.num_languages() || !in_lang(t, k) {
                return Err(Error::config(format!(
                    "utterance {} translation into {k} leaves the target range",
                    self.id
                )));
            }
        }
        if let Some(p) = &self.previous {
            if !in_lang(p, self.language) {
                return Err(Error::config(format!(
                    "utterance {} previous transcript leaves its language range",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub vocabulary: Vocabulary,
    pub records: Vec<UtteranceRecord>,
}

impl Corpus {
    /// Longest utterance in raw frames, the fixed padding length.
    pub fn max_frames(&self) -> usize {
        self.records.iter().map(|r| r.frames).max().unwrap_or(0)
    }
}

/// Swaps positions (0,1), (2,3), ...; an odd tail stays put.
pub fn swap_adjacent_pairs(seq: &[usize]) -> Vec<usize> {
    let mut out = seq.to_vec();
    for pair in out.chunks_exact_mut(2) {
        pair.swap(0, 1);
    }
    out
}

/// Fixed symbol bijections between every ordered language pair.
#[derive(Clone, Debug)]
pub struct TranslationTable {
    maps: BTreeMap<(usize, usize), Vec<usize>>,
}

impl TranslationTable {
    pub fn new(spec: &CorpusSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.translation_seed);
        let mut maps = BTreeMap::new();
        for a in 0..spec.num_languages {
            for b in 0..spec.num_languages {
                if a != b {
                    let mut perm: Vec<usize> = (0..spec.symbols_per_language).collect();
                    perm.shuffle(&mut rng);
                    maps.insert((a, b), perm);
                }
            }
        }
        TranslationTable { maps }
    }

    pub fn map_symbol(&self, vocab: &Vocabulary, from: usize, to: usize, id: usize) -> usize {
        let idx = vocab.symbol_index(id).expect("symbol id");
        vocab.symbol(to, self.maps[&(from, to)][idx])
    }

    pub fn translate(&self, vocab: &Vocabulary, from: usize, to: usize, seq: &[usize]) -> Vec<usize> {
        let mapped: Vec<usize> = seq.iter().map(|&s| self.map_symbol(vocab, from, to, s)).collect();
        swap_adjacent_pairs(&mapped)
    }
}

fn has_adjacent_repeat(seq: &[usize]) -> bool {
    seq.windows(2).any(|w| w[0] == w[1])
}

struct Generator<'a> {
    spec: &'a CorpusSpec,
    vocab: Vocabulary,
    table: TranslationTable,
    embeddings: Vec<Vec<f64>>,
}

const MAX_SEQUENCE_ATTEMPTS: usize = 10_000;

impl<'a> Generator<'a> {
    fn new(spec: &'a CorpusSpec) -> Result<Self> {
        spec.validate()?;
        let vocab = spec.vocabulary()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(0);
        let n_sym = spec.num_languages * spec.symbols_per_language;
        let embeddings = (0..n_sym)
            .map(|_| {
                (0..spec.feature_dim)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect()
            })
            .collect();
        Ok(Generator {
            spec,
            vocab,
            table: TranslationTable::new(spec),
            embeddings,
        })
    }

    /// Symbol sequence whose own and every translated form is repeat-free,
    /// so augmented references need no extra frames for repeats.
    fn sample_sequence(&self, rng: &mut ChaCha8Rng, lang: usize) -> Result<Vec<usize>> {
        let len = rng.random_range(self.spec.min_symbols..=self.spec.max_symbols);
        let range = self.vocab.symbol_range(lang);
        for _ in 0..MAX_SEQUENCE_ATTEMPTS {
            let mut seq: Vec<usize> = Vec::with_capacity(len);
            while seq.len() < len {
                let s = rng.random_range(range.clone());
                if seq.last() != Some(&s) {
                    seq.push(s);
                }
            }
            let ok = (0..self.spec.num_languages)
                .filter(|&k| k != lang)
                .all(|k| !has_adjacent_repeat(&self.table.translate(&self.vocab, lang, k, &seq)));
            if ok {
                return Ok(seq);
            }
        }
        Err(Error::config(format!(
            "no repeat-free sequence of {len} symbols in language {lang} after {MAX_SEQUENCE_ATTEMPTS} draws"
        )))
    }

    fn render(&self, rng: &mut ChaCha8Rng, seq: &[usize]) -> (usize, Vec<f32>) {
        let mut features = Vec::new();
        let mut frames = 0;
        for &s in seq {
            let reps =
                rng.random_range(self.spec.min_frames_per_symbol..=self.spec.max_frames_per_symbol);
            let emb = &self.embeddings[s - 1];
            for _ in 0..reps {
                for &e in emb {
                    let n: f64 = StandardNormal.sample(rng);
                    features.push((e + self.spec.noise_std * n) as f32);
                }
            }
            frames += reps;
        }
        (frames, features)
    }

    fn split(&self, split: Split) -> Result<Vec<UtteranceRecord>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
        rng.set_stream(split.stream());
        let size = self.spec.split_size(split);
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            let lang = rng.random_range(0..self.spec.num_languages);
            let rec_len = rng.random_range(1..=self.spec.max_recording_len);
            let mut previous: Option<Vec<usize>> = None;
            for _ in 0..rec_len {
                if out.len() == size {
                    break;
                }
                let transcript = self.sample_sequence(&mut rng, lang)?;
                let (frames, features) = self.render(&mut rng, &transcript);
                let translations = (0..self.spec.num_languages)
                    .filter(|&k| k != lang)
                    .map(|k| (k, self.table.translate(&self.vocab, lang, k, &transcript)))
                    .collect();
                out.push(UtteranceRecord {
                    id: out.len() as u32,
                    language: lang,
                    frames,
                    feature_dim: self.spec.feature_dim,
                    features,
                    transcript: transcript.clone(),
                    translations,
                    previous: previous.replace(transcript),
                });
            }
        }
        Ok(out)
    }
}

/// Generates one split in memory.
pub fn generate_split(spec: &CorpusSpec, split: Split) -> Result<Corpus> {
    let g = Generator::new(spec)?;
    Ok(Corpus {
        spec: spec.clone(),
        vocabulary: g.vocab.clone(),
        records: g.split(split)?,
    })
}

/// Writes `train.octc`, `dev.octc` and `test.octc` into `dir`.
pub fn generate_corpus(spec: &CorpusSpec, dir: &Path) -> Result<Vec<PathBuf>> {
    let g = Generator::new(spec)?;
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for split in Split::ALL {
        let corpus = Corpus {
            spec: spec.clone(),
            vocabulary: g.vocab.clone(),
            records: g.split(split)?,
        };
        let path = dir.join(split.file_name());
        write_corpus(&path, &corpus)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Whether every reference for `utt` fits the downsampled frame budget.
pub fn check_feasible(vocab: &Vocabulary, utt: &UtteranceRecord, factor: usize) -> Result<()> {
    let frames = utt.frames.div_ceil(factor.max(1)) + 2;
    for task in utt.available_tasks() {
        let mut tokens = vec![vocab.lang_token(utt.language), vocab.task_token(task)];
        tokens.extend_from_slice(utt.target_text(task)?);
        CtcTarget::new(tokens, vocab.blank())?.check_feasible(frames)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests;
