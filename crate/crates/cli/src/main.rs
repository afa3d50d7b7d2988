//! `mtctc` command-line driver.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use mtctc::datagen::{generate_corpus, read_corpus, Corpus, CorpusSpec, Task, UtteranceRecord, Vocabulary};
use mtctc::eval::{
    evaluate_corpus, longform_parity, measure_throughput, select_for_concatenation, task_name, EvalOptions,
};
use mtctc::infer::{align_utterance, recognize_batch, Request};
use mtctc::model::{Model, ModelConfig};
use mtctc::train::{load_checkpoint, save_checkpoint, Checkpoint, StepMetrics, TrainConfig, Trainer};

#[derive(Parser)]
#[command(name = "mtctc", version, about = "Multi-task self-conditioned CTC on synthetic speech")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/dev/test corpus files.
    GenData(GenDataArgs),
    /// Train or resume a model.
    Train(TrainArgs),
    /// Greedy decoding, one JSON line per utterance.
    Decode(DecodeArgs),
    /// Forced alignment of one utterance against its reference.
    Align(AlignArgs),
    /// Chunked decoding of concatenated utterances.
    Longform(LongformArgs),
    /// Token error rates and language-identification accuracy.
    Eval(EvalArgs),
    /// Decoding speed per batch size.
    Throughput(ThroughputArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// JSON corpus spec; defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

/// Layout of the `train --config` file.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainFile {
    model: ModelConfig,
    train: TrainConfig,
    model_seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training corpus file.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Directory for checkpoints and the step log.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from a checkpoint that carries optimizer state.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this step instead of the end of the schedule.
    #[arg(long)]
    until: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Add wall-clock time to each log line.
    #[arg(long)]
    timing: bool,
}

#[derive(Args)]
struct ModelInput {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
}

#[derive(Args)]
struct DecodeArgs {
    #[command(flatten)]
    input: ModelInput,
    /// `asr` or `st-K`.
    #[arg(long, default_value = "asr")]
    task: String,
    /// Give the true language token instead of `<nolang>`.
    #[arg(long)]
    true_language: bool,
    /// Use the previous sentence as prompt where one exists.
    #[arg(long)]
    previous_prompt: bool,
    #[arg(long)]
    utt: Option<u32>,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
}

#[derive(Args)]
struct AlignArgs {
    #[command(flatten)]
    input: ModelInput,
    #[arg(long)]
    utt: u32,
    #[arg(long, default_value = "asr")]
    task: String,
}

#[derive(Args)]
struct LongformArgs {
    #[command(flatten)]
    input: ModelInput,
    #[arg(long, default_value_t = 20)]
    count: usize,
    /// Only concatenate utterances of this language.
    #[arg(long)]
    language: Option<usize>,
    /// Chunk window in encoder frames.
    #[arg(long, default_value_t = 48)]
    window: usize,
    /// Context on each side in encoder frames.
    #[arg(long, default_value_t = 8)]
    context: usize,
    #[arg(long, default_value_t = 4)]
    batch_size: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    input: ModelInput,
    /// JSON evaluation options.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    previous_prompt: bool,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Write the report here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ThroughputArgs {
    #[command(flatten)]
    input: ModelInput,
    #[arg(long, value_delimiter = ',', default_value = "1,4,8")]
    batch_sizes: Vec<usize>,
    /// Use only the first N utterances.
    #[arg(long)]
    limit: Option<usize>,
}

fn read_json<T: for<'de> Deserialize<'de> + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

struct Loaded {
    checkpoint: Checkpoint,
    corpus: Corpus,
    sha256: String,
}

impl Loaded {
    fn open(input: &ModelInput) -> Result<Self> {
        let checkpoint = load_checkpoint(&input.checkpoint)
            .with_context(|| format!("loading {}", input.checkpoint.display()))?;
        let corpus = read_corpus(&input.corpus).with_context(|| format!("loading {}", input.corpus.display()))?;
        if corpus.vocabulary != checkpoint.model.vocab {
            bail!(mtctc::Error::VocabularyMismatch);
        }
        Ok(Loaded {
            sha256: sha256_file(&input.checkpoint)?,
            checkpoint,
            corpus,
        })
    }

    fn model(&self) -> &Model {
        &self.checkpoint.model
    }

    fn envelope(&self, command: &str, input: &ModelInput, options: Value, result: Value) -> Value {
        json!({
            "command": command,
            "checkpoint": input.checkpoint,
            "checkpoint_sha256": self.sha256,
            "corpus": input.corpus,
            "model_config": self.model().config,
            "options": options,
            "result": result,
        })
    }

    fn utterance(&self, id: u32) -> Result<&UtteranceRecord> {
        self.corpus
            .records
            .iter()
            .find(|u| u.id == id)
            .ok_or_else(|| anyhow!("no utterance with id {id}"))
    }
}

fn parse_task(vocab: &Vocabulary, s: &str) -> Result<Task> {
    if s == "asr" {
        return Ok(Task::Asr);
    }
    let k = s
        .strip_prefix("st-")
        .and_then(|k| k.parse::<usize>().ok())
        .ok_or_else(|| anyhow!("task must be `asr` or `st-K`, got `{s}`"))?;
    if k >= vocab.num_languages() {
        bail!("no language {k}");
    }
    Ok(Task::Translate(k))
}

fn print_json(v: &Value) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, v)?;
    writeln!(out)?;
    Ok(())
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut spec: CorpusSpec = read_json(a.config.as_deref())?;
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let files = generate_corpus(&spec, &a.out)?;
    print_json(&json!({
        "command": "gen-data",
        "spec": spec,
        "vocabulary_size": spec.vocabulary()?.size(),
        "files": files,
    }))
}

#[derive(Serialize)]
struct LogLine<'a> {
    step: usize,
    lr: f64,
    total_loss: f64,
    per_layer_losses: &'a [f64],
    #[serde(skip_serializing_if = "Option::is_none")]
    wall_ms: Option<f64>,
}

fn train(a: TrainArgs) -> Result<()> {
    let file: TrainFile = read_json(a.config.as_deref())?;
    let mut config = file.train;
    if let Some(c) = a.corpus {
        config.train_corpus = Some(c);
    }
    if let Some(o) = a.out {
        config.output_dir = Some(o);
    }
    if let Some(s) = a.steps {
        config.total_steps = s;
    }
    if let Some(s) = a.seed {
        config.seed = s;
    }
    let corpus_path = config.train_corpus.clone().ok_or_else(|| anyhow!("no training corpus given"))?;
    let out_dir = config.output_dir.clone().ok_or_else(|| anyhow!("no output directory given"))?;
    let corpus = read_corpus(&corpus_path).with_context(|| format!("loading {}", corpus_path.display()))?;

    let mut trainer = match &a.resume {
        Some(path) => {
            let ck = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
            let state = ck.state.ok_or_else(|| anyhow!("{} has no optimizer state", path.display()))?;
            if ck.model.vocab != corpus.vocabulary {
                bail!(mtctc::Error::VocabularyMismatch);
            }
            Trainer::resume(ck.model, config.clone(), state, &corpus.records)?
        }
        None => {
            let model = Model::new(file.model.clone(), corpus.vocabulary.clone(), file.model_seed)?;
            Trainer::new(model, config.clone(), &corpus.records)?
        }
    };

    std::fs::create_dir_all(&out_dir)?;
    let log_path = out_dir.join("metrics.jsonl");
    let mut log = BufWriter::new(File::create(&log_path)?);
    let until = a.until.unwrap_or(config.total_steps);
    let start = trainer.state.step;
    let mut last: Option<StepMetrics> = None;
    while trainer.state.step < until.min(config.total_steps) && !trainer.state.diverged {
        let hist = trainer.run(trainer.state.step + 1, None)?;
        for m in hist {
            serde_json::to_writer(
                &mut log,
                &LogLine {
                    step: m.step,
                    lr: m.lr,
                    total_loss: m.total_loss,
                    per_layer_losses: &m.per_layer_losses,
                    wall_ms: a.timing.then_some(m.wall_ms),
                },
            )?;
            log.write_all(b"\n")?;
            last = Some(m);
        }
    }
    log.flush()?;
    let final_path = out_dir.join(format!("step-{}.ockp", trainer.state.step));
    save_checkpoint(&final_path, &trainer.model, Some(&trainer.state))?;
    print_json(&json!({
        "command": "train",
        "config": config,
        "model_config": trainer.model.config,
        "parameters": trainer.model.num_parameters(),
        "resumed_from": a.resume,
        "start_step": start,
        "end_step": trainer.state.step,
        "diverged": trainer.state.diverged,
        "final_loss": last.map(|m| m.total_loss),
        "log": log_path,
        "checkpoint": final_path,
        "checkpoint_sha256": sha256_file(&final_path)?,
    }))
}

fn decode(a: DecodeArgs) -> Result<()> {
    let l = Loaded::open(&a.input)?;
    let model = l.model();
    let vocab = &model.vocab;
    let task = parse_task(vocab, &a.task)?;
    let records: Vec<&UtteranceRecord> = match a.utt {
        Some(id) => vec![l.utterance(id)?],
        None => l.corpus.records.iter().collect(),
    };
    let features: Vec<_> = records.iter().map(|u| u.features_tensor()).collect();
    let requests: Vec<Request<'_>> = records
        .iter()
        .zip(&features)
        .map(|(u, f)| Request {
            features: f,
            valid_frames: u.frames,
            task,
            lang_hint: if a.true_language { vocab.lang_token(u.language) } else { vocab.nolang() },
            prompt: match &u.previous {
                Some(p) if a.previous_prompt && !p.is_empty() => p.clone(),
                _ => vec![vocab.na()],
            },
        })
        .collect();
    let hyps = recognize_batch(model, &requests, a.batch_size);
    let mut out = std::io::stdout().lock();
    for (u, h) in records.iter().zip(hyps) {
        let h = h?;
        let line = json!({
            "utterance_id": u.id,
            "task": task_name(task),
            "language": h.language.and_then(|t| vocab.language_of_token(t)),
            "language_token": h.language.map(|t| vocab.token_name(t)),
            "language_posterior": h.language_posterior,
            "tokens": h.tokens,
            "token_frames": h.token_frames,
            "frame_alignment": h.frame_path,
            "per_layer_decodes": h.per_layer,
            "checkpoint_sha256": l.sha256,
        });
        serde_json::to_writer(&mut out, &line)?;
        writeln!(out)?;
    }
    Ok(())
}

fn align(a: AlignArgs) -> Result<()> {
    let l = Loaded::open(&a.input)?;
    let model = l.model();
    let task = parse_task(&model.vocab, &a.task)?;
    let utt = l.utterance(a.utt)?;
    let (reference, alignment) = align_utterance(model, utt, task, model.vocab.nolang(), &[model.vocab.na()])?;
    let collapsed = mtctc::ctc::collapse(&alignment.path, model.vocab.blank());
    let result = json!({
        "utterance_id": utt.id,
        "task": task_name(task),
        "reference": reference,
        "reference_names": reference.iter().map(|&t| model.vocab.token_name(t)).collect::<Vec<_>>(),
        "frame_path": alignment.path,
        "log_prob": alignment.log_prob,
        "collapse_matches_reference": collapsed == reference,
    });
    print_json(&l.envelope("align", &a.input, json!({ "utt": a.utt, "task": a.task }), result))
}

fn longform(a: LongformArgs) -> Result<()> {
    let l = Loaded::open(&a.input)?;
    let language = a
        .language
        .or_else(|| l.corpus.records.first().map(|u| u.language))
        .ok_or_else(|| anyhow!("corpus is empty"))?;
    let records = select_for_concatenation(&l.corpus.records, language, a.count);
    if records.is_empty() {
        bail!("no utterances in language {language}");
    }
    let report = longform_parity(l.model(), &records, a.window, a.context, a.batch_size)?;
    let options = json!({
        "count": a.count,
        "language": language,
        "window": a.window,
        "context": a.context,
        "batch_size": a.batch_size,
    });
    print_json(&l.envelope("longform", &a.input, options, serde_json::to_value(report)?))
}

fn eval(a: EvalArgs) -> Result<()> {
    let l = Loaded::open(&a.input)?;
    let mut opts: EvalOptions = read_json(a.config.as_deref())?;
    if a.previous_prompt {
        opts.previous_prompt = true;
    }
    if let Some(b) = a.batch_size {
        opts.batch_size = b;
    }
    let report = evaluate_corpus(l.model(), &l.corpus, &opts)?;
    let v = l.envelope("eval", &a.input, serde_json::to_value(&opts)?, serde_json::to_value(report)?);
    match a.out {
        Some(path) => {
            let mut w = BufWriter::new(File::create(&path)?);
            serde_json::to_writer_pretty(&mut w, &v)?;
            w.write_all(b"\n")?;
            w.flush()?;
            Ok(())
        }
        None => print_json(&v),
    }
}

fn throughput(a: ThroughputArgs) -> Result<()> {
    let l = Loaded::open(&a.input)?;
    let n = a.limit.unwrap_or(l.corpus.records.len()).min(l.corpus.records.len());
    let rows = measure_throughput(l.model(), &l.corpus.records[..n], &a.batch_sizes)?;
    let options = json!({ "batch_sizes": a.batch_sizes, "utterances": n });
    print_json(&l.envelope("throughput", &a.input, options, json!({ "rows": rows, "tokens_identical": true })))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Decode(a) => decode(a),
        Command::Align(a) => align(a),
        Command::Longform(a) => longform(a),
        Command::Eval(a) => eval(a),
        Command::Throughput(a) => throughput(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
