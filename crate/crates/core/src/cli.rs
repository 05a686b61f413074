//! Command-line front end: `gen-data`, `train`, `eval`, `lens`, `decode`.
//!
//! Every command writes `run.json` (resolved arguments plus tool version)
//! next to its outputs. Exit codes: 0 success, 2 usage error, 3 data or
//! checkpoint integrity error, 1 anything else.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError, Progress};
use crate::data::{self, DataError, DatasetConfig, SampleRecord};
use crate::decode::{self, DecodeError, Feedback, Strategy, StrategySummary};
use crate::eval;
use crate::lens;
use crate::model::{ModelConfig, ModelError, ModelParams};
use crate::train::{self, EpochEval, OptimizerState, StepMetrics, TrainConfig, TrainError, TrainSink};
use crate::vocab::{VocabError, Vocabulary};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const EVAL_SCHEMA_VERSION: u32 = 1;
pub const CHECKPOINT_DIR: &str = "checkpoint";

/// Invalid flag combinations detected after parsing.
#[derive(Debug, Error)]
#[error("{0}")]
pub struct UsageError(pub String);

#[derive(Debug, Parser)]
#[command(name = "cotlens", version, about = "Filler-token chain-of-thought experiments on Match-3")]
pub struct Cli {
    /// Worker threads (1 gives bitwise-reproducible float logs)
    #[arg(long, global = true, env = "COTLENS_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate train/test JSONL splits and a manifest
    GenData(GenDataArgs),
    /// Train a model on a generated dataset
    Train(TrainArgs),
    /// Teacher-forced answer and token accuracy
    Eval(EvalArgs),
    /// Logit-lens reports over filler test records
    Lens(LensArgs),
    /// Compare greedy, filler-bypass and random-replacement decoding
    Decode(DecodeArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GenDataArgs {
    #[arg(long, env = "COTLENS_OUT")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200_000)]
    pub train_n: usize,
    #[arg(long, default_value_t = 2_000)]
    pub test_n: usize,
    #[arg(long, default_value_t = 3)]
    pub dim: usize,
    #[arg(long, default_value_t = 10)]
    pub modulus: usize,
    #[arg(long, default_value_t = 7)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 0.5)]
    pub true_rate: f64,
    #[arg(long, default_value_t = 0.5)]
    pub cot_rate: f64,
    #[arg(long, default_value_t = 0.0)]
    pub no_filler_rate: f64,
    #[arg(long, default_value_t = 4.0 / 3.0)]
    pub corruption_rate: f64,
    #[arg(long, env = "COTLENS_SEED", default_value_t = 0)]
    pub seed: u64,
}

impl GenDataArgs {
    pub fn dataset_config(&self) -> DatasetConfig {
        DatasetConfig {
            train_n: self.train_n,
            test_n: self.test_n,
            dim: self.dim,
            modulus: self.modulus,
            seq_len: self.seq_len,
            true_rate: self.true_rate,
            cot_rate: self.cot_rate,
            no_filler_rate: self.no_filler_rate,
            corruption_rate: self.corruption_rate,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// 2 layers, width 128, 4 heads
    Desk,
    /// 4 layers, width 384, 6 heads
    Paper,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    /// Dataset directory written by `gen-data`
    #[arg(long, env = "COTLENS_DATA")]
    pub data: PathBuf,
    #[arg(long, env = "COTLENS_OUT")]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    pub preset: Preset,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f32,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 5)]
    pub epochs: usize,
    /// Global gradient-norm clip; 0 disables
    #[arg(long, default_value_t = 1.0)]
    pub clip_norm: f32,
    /// Extra checkpoint every N steps (0 = only at epoch ends)
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
    /// Test records evaluated after each epoch
    #[arg(long, default_value_t = 2_000)]
    pub eval_records: usize,
    /// Train on only the first N records
    #[arg(long)]
    pub max_train: Option<usize>,
    /// Continue from `<out>/checkpoint`
    #[arg(long)]
    pub resume: bool,
    /// Print a progress line every N steps (0 = quiet)
    #[arg(long, default_value_t = 50)]
    pub log_every: usize,
    #[arg(long, env = "COTLENS_SEED", default_value_t = 0)]
    pub seed: u64,
}

impl TrainArgs {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
            clip_norm: (self.clip_norm > 0.0).then_some(self.clip_norm),
            checkpoint_every: self.checkpoint_every,
            eval_records: self.eval_records,
            ..TrainConfig::default()
        }
    }

    pub fn model_config(&self, vocab: &Vocabulary) -> ModelConfig {
        let max_len = data::max_record_len(vocab.dim(), vocab.seq_len());
        match self.preset {
            Preset::Desk => ModelConfig::desk(vocab.len(), max_len),
            Preset::Paper => ModelConfig::paper(vocab.len(), max_len),
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvalArgs {
    /// Checkpoint directory
    #[arg(long, env = "COTLENS_CHECKPOINT")]
    pub checkpoint: PathBuf,
    #[arg(long, env = "COTLENS_DATA")]
    pub data: PathBuf,
    #[arg(long, env = "COTLENS_OUT")]
    pub out: PathBuf,
    /// Evaluate only the first N test records
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct LensArgs {
    #[arg(long, env = "COTLENS_CHECKPOINT")]
    pub checkpoint: PathBuf,
    #[arg(long, env = "COTLENS_DATA")]
    pub data: PathBuf,
    #[arg(long, env = "COTLENS_OUT")]
    pub out: PathBuf,
    /// Project raw hidden states (skip the final RMSNorm)
    #[arg(long)]
    pub raw: bool,
    /// Write layer grids for the first N filler test records
    #[arg(long, default_value_t = 0)]
    pub grids: usize,
    /// Which ranked token the grids show (1 = top)
    #[arg(long, default_value_t = 1)]
    pub grid_rank: usize,
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DecodeArgs {
    #[arg(long, env = "COTLENS_CHECKPOINT")]
    pub checkpoint: PathBuf,
    #[arg(long, env = "COTLENS_DATA")]
    pub data: PathBuf,
    #[arg(long, env = "COTLENS_OUT")]
    pub out: PathBuf,
    /// Strategies to run (default: all three)
    #[arg(long, value_enum)]
    pub mode: Vec<Strategy>,
    /// What a substituted step feeds back into the context
    #[arg(long, value_enum, default_value_t = Feedback::Substitute)]
    pub feedback: Feedback,
    /// Candidates recorded per step in the traces
    #[arg(long, default_value_t = 5)]
    pub top_k: usize,
    /// Decode only the first N filler test records
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, env = "COTLENS_SEED", default_value_t = 0)]
    pub seed: u64,
}

#[derive(Serialize)]
struct RunRecord<'a, T: Serialize> {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    threads: Option<usize>,
    args: &'a T,
}

fn write_run_json<T: Serialize>(out: &Path, command: &'static str, threads: Option<usize>, args: &T) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let record = RunRecord { tool: "cotlens", version: VERSION, command, threads, args };
    let path = out.join("run.json");
    fs::write(&path, serde_json::to_string_pretty(&record)?).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

/// Exit code for an error raised by [`run`].
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<DataError>() {
            return match e {
                DataError::Config(_) => 2,
                DataError::Vocab(VocabError::ZeroDim | VocabError::Modulus(_) | VocabError::SeqLen(_) | VocabError::TooManyValues) => 2,
                DataError::Io { .. } => 1,
                _ => 3,
            };
        }
        if let Some(e) = cause.downcast_ref::<CheckpointError>() {
            return match e {
                CheckpointError::Io { .. } => 1,
                _ => 3,
            };
        }
        if cause.is::<VocabError>() {
            return 2;
        }
        if let Some(TrainError::Config(_)) = cause.downcast_ref::<TrainError>() {
            return 2;
        }
        if let Some(ModelError::Config(_)) = cause.downcast_ref::<ModelError>() {
            return 2;
        }
    }
    1
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(UsageError("--threads must be at least 1".into()).into());
        }
        // ignore the error if a pool already exists (e.g. repeated calls in tests)
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match &cli.command {
        Command::GenData(args) => {
            write_run_json(&args.out, "gen-data", cli.threads, args)?;
            cmd_gen_data(args).map(|_| ())
        }
        Command::Train(args) => {
            write_run_json(&args.out, "train", cli.threads, args)?;
            cmd_train(args).map(|_| ())
        }
        Command::Eval(args) => {
            write_run_json(&args.out, "eval", cli.threads, args)?;
            cmd_eval(args).map(|_| ())
        }
        Command::Lens(args) => {
            write_run_json(&args.out, "lens", cli.threads, args)?;
            cmd_lens(args).map(|_| ())
        }
        Command::Decode(args) => {
            write_run_json(&args.out, "decode", cli.threads, args)?;
            cmd_decode(args).map(|_| ())
        }
    }
}

pub fn cmd_gen_data(args: &GenDataArgs) -> Result<data::Manifest> {
    let config = args.dataset_config();
    config.validate()?;
    let vocab = Vocabulary::build(args.dim, args.modulus, args.seq_len)?;
    let manifest = data::build_dataset(&config, &vocab, &args.out)?;
    fs::write(args.out.join("vocab.json"), serde_json::to_string_pretty(&vocab.spec())?)?;
    eprintln!(
        "wrote {} train / {} test records to {} (vocab {})",
        manifest.train.records,
        manifest.test.records,
        args.out.display(),
        vocab.len()
    );
    Ok(manifest)
}

/// Vocabulary implied by a dataset manifest.
pub fn dataset_vocab(dir: &Path) -> Result<Vocabulary> {
    let manifest = data::read_manifest(dir)?;
    let c = &manifest.config;
    Ok(Vocabulary::build(c.dim, c.modulus, c.seq_len)?)
}

fn load_data(dir: &Path) -> Result<(Vocabulary, Vec<SampleRecord>, Vec<SampleRecord>)> {
    let vocab = dataset_vocab(dir)?;
    let (_, train, test) = data::load_dataset(dir, &vocab).with_context(|| format!("loading dataset {}", dir.display()))?;
    Ok((vocab, train, test))
}

/// Loads a checkpoint and test split and checks that they belong together.
pub fn load_for_analysis(checkpoint_dir: &Path, data_dir: &Path) -> Result<(ModelParams, Vocabulary, Vec<SampleRecord>)> {
    let ckpt = checkpoint::load(checkpoint_dir).with_context(|| format!("loading checkpoint {}", checkpoint_dir.display()))?;
    let vocab = dataset_vocab(data_dir)?;
    if ckpt.vocab != vocab {
        return Err(CheckpointError::Mismatch("checkpoint vocabulary differs from the dataset's".into()).into());
    }
    let manifest = data::read_manifest(data_dir)?;
    let path = data_dir.join(&manifest.test.file);
    if data::file_sha256(&path)? != manifest.test.sha256 {
        return Err(DataError::Checksum(path).into());
    }
    let test = data::load_split(&path, &vocab)?;
    Ok((ckpt.params, vocab, test))
}

/// Streams step metrics to `metrics.csv`, epoch evals to `epochs.jsonl`, and
/// keeps `<out>/checkpoint` current.
pub struct FileSink {
    out: PathBuf,
    vocab: Vocabulary,
    metrics: csv::Writer<File>,
    epochs: BufWriter<File>,
    log_every: usize,
    started: Instant,
    pub last_eval: Option<EpochEval>,
    pub clipped_steps: usize,
}

impl FileSink {
    pub fn create(out: &Path, vocab: Vocabulary, append: bool, log_every: usize) -> Result<Self> {
        let metrics_path = out.join("metrics.csv");
        let write_header = !append || !metrics_path.exists();
        let open = |p: &Path| OpenOptions::new().create(true).append(append).write(true).truncate(!append).open(p);
        let metrics_file = open(&metrics_path).with_context(|| format!("opening {}", metrics_path.display()))?;
        let mut metrics = csv::WriterBuilder::new().has_headers(false).from_writer(metrics_file);
        if write_header {
            metrics.write_record(["step", "epoch", "loss", "lr", "grad_norm", "clip_active"])?;
        }
        let epochs_path = out.join("epochs.jsonl");
        let epochs = BufWriter::new(open(&epochs_path).with_context(|| format!("opening {}", epochs_path.display()))?);
        Ok(Self { out: out.to_path_buf(), vocab, metrics, epochs, log_every, started: Instant::now(), last_eval: None, clipped_steps: 0 })
    }
}

/// Drops log rows written after the checkpoint a run resumes from, so the
/// resumed run does not log those steps twice. Returns the number of clipped
/// steps among the rows kept.
fn trim_logs(out: &Path, step: usize) -> Result<usize> {
    let metrics_path = out.join("metrics.csv");
    let mut clipped = 0;
    if metrics_path.exists() {
        let mut reader = csv::Reader::from_path(&metrics_path).with_context(|| format!("reading {}", metrics_path.display()))?;
        let headers = reader.headers()?.clone();
        let mut kept = Vec::new();
        for row in reader.records() {
            let row = row?;
            if row.get(0).and_then(|s| s.parse::<usize>().ok()).is_some_and(|s| s <= step) {
                clipped += (row.get(5) == Some("1")) as usize;
                kept.push(row);
            }
        }
        let mut writer = csv::Writer::from_path(&metrics_path)?;
        writer.write_record(&headers)?;
        for row in &kept {
            writer.write_record(row)?;
        }
        writer.flush()?;
    }
    let epochs_path = out.join("epochs.jsonl");
    if epochs_path.exists() {
        let text = fs::read_to_string(&epochs_path)?;
        let kept: String = text
            .lines()
            .filter(|line| serde_json::from_str::<serde_json::Value>(line).ok().and_then(|v| v["step"].as_u64()).is_some_and(|s| s as usize <= step))
            .map(|line| format!("{line}\n"))
            .collect();
        fs::write(&epochs_path, kept)?;
    }
    Ok(clipped)
}

fn io_train(e: impl std::fmt::Display) -> TrainError {
    TrainError::Checkpoint(CheckpointError::Mismatch(format!("writing training logs: {e}")))
}

impl TrainSink for FileSink {
    fn on_step(&mut self, m: &StepMetrics) -> Result<(), TrainError> {
        self.metrics
            .write_record([
                m.step.to_string(),
                m.epoch.to_string(),
                format!("{:.6}", m.loss),
                format!("{:e}", m.lr),
                format!("{:.6}", m.grad_norm),
                (m.clip_active as u8).to_string(),
            ])
            .map_err(io_train)?;
        self.clipped_steps += m.clip_active as usize;
        if self.log_every > 0 && m.step.is_multiple_of(self.log_every) {
            self.metrics.flush().map_err(io_train)?;
            eprintln!(
                "step {:>6} epoch {} loss {:.4} grad_norm {:.3}{} [{:.0}s]",
                m.step,
                m.epoch,
                m.loss,
                m.grad_norm,
                if m.clip_active { " (clipped)" } else { "" },
                self.started.elapsed().as_secs_f64()
            );
        }
        Ok(())
    }

    fn on_epoch(&mut self, e: &EpochEval) -> Result<(), TrainError> {
        serde_json::to_writer(&mut self.epochs, e).map_err(io_train)?;
        self.epochs.write_all(b"\n").map_err(io_train)?;
        self.epochs.flush().map_err(io_train)?;
        self.metrics.flush().map_err(io_train)?;
        eprintln!(
            "epoch {} done at step {}: filler answer {:.4}, cot answer {:.4}, cot tokens {:.4}",
            e.epoch,
            e.step,
            e.metrics.filler_answer.accuracy(),
            e.metrics.cot_answer.accuracy(),
            e.metrics.cot_tokens.accuracy()
        );
        self.last_eval = Some(e.clone());
        Ok(())
    }

    fn checkpoint(&mut self, params: &ModelParams, optimizer: &OptimizerState, progress: Progress) -> Result<(), TrainError> {
        let tmp = self.out.join(format!("{CHECKPOINT_DIR}.tmp"));
        let dest = self.out.join(CHECKPOINT_DIR);
        let _ = fs::remove_dir_all(&tmp);
        checkpoint::save(&tmp, params, &self.vocab, Some(optimizer), Some(progress))?;
        let _ = fs::remove_dir_all(&dest);
        fs::rename(&tmp, &dest).map_err(io_train)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub params: usize,
    pub steps: usize,
    pub clipped_steps: usize,
    pub seconds: f64,
    pub final_eval: Option<EpochEval>,
}

pub fn cmd_train(args: &TrainArgs) -> Result<TrainReport> {
    let started = Instant::now();
    let config = args.train_config();
    config.validate()?;
    let (vocab, mut train_set, test) = load_data(&args.data)?;
    if let Some(n) = args.max_train {
        train_set.truncate(n);
    }
    if train_set.is_empty() {
        bail!(UsageError("training split is empty".into()));
    }
    let model_config = args.model_config(&vocab);
    let ckpt_dir = args.out.join(CHECKPOINT_DIR);
    let (mut params, mut optimizer, progress) = if args.resume {
        let ckpt = checkpoint::load(&ckpt_dir).with_context(|| format!("resuming from {}", ckpt_dir.display()))?;
        if ckpt.vocab != vocab || ckpt.params.config != model_config {
            return Err(CheckpointError::Mismatch("checkpoint config differs from the requested run".into()).into());
        }
        let optimizer = ckpt.optimizer.ok_or_else(|| CheckpointError::Mismatch("checkpoint has no optimizer state".into()))?;
        let progress = ckpt.progress.ok_or_else(|| CheckpointError::Mismatch("checkpoint has no progress record".into()))?;
        (ckpt.params, optimizer, progress)
    } else {
        let params = ModelParams::init(&model_config, args.seed)?;
        let optimizer = OptimizerState::new(&params);
        (params, optimizer, Progress { epoch: 0, next_batch: 0, step: 0 })
    };
    eprintln!(
        "training {} params ({} layers, d_model {}, {} heads) on {} records",
        params.num_params(),
        model_config.n_layers,
        model_config.d_model,
        model_config.n_heads,
        train_set.len()
    );
    let earlier_clipped = if args.resume { trim_logs(&args.out, progress.step)? } else { 0 };
    let mut sink = FileSink::create(&args.out, vocab.clone(), args.resume, args.log_every)?;
    sink.clipped_steps = earlier_clipped;
    let end = train::train_loop(&mut params, &mut optimizer, progress, &train_set, &test, &config, &mut sink)?;
    let report = TrainReport {
        params: params.num_params(),
        steps: end.step,
        clipped_steps: sink.clipped_steps,
        seconds: started.elapsed().as_secs_f64(),
        final_eval: sink.last_eval.clone(),
    };
    drop(sink);
    if !ckpt_dir.exists() {
        checkpoint::save(&ckpt_dir, &params, &vocab, Some(&optimizer), Some(end))?;
    }
    write_json(&args.out.join("train_report.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub records: usize,
    pub filler_answer_accuracy: f64,
    pub cot_answer_accuracy: f64,
    pub no_filler_answer_accuracy: f64,
    pub cot_token_accuracy: f64,
    pub counts: eval::EvalMetrics,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<EvalReport> {
    let (params, _, mut test) = load_for_analysis(&args.checkpoint, &args.data)?;
    if let Some(n) = args.limit {
        test.truncate(n);
    }
    let m = eval::evaluate(&params, &test)?;
    let report = EvalReport {
        schema_version: EVAL_SCHEMA_VERSION,
        records: test.len(),
        filler_answer_accuracy: m.filler_answer.accuracy(),
        cot_answer_accuracy: m.cot_answer.accuracy(),
        no_filler_answer_accuracy: m.no_filler_answer.accuracy(),
        cot_token_accuracy: m.cot_tokens.accuracy(),
        counts: m,
    };
    write_json(&args.out.join("eval.json"), &report)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct LensReport {
    pub filler_fraction: Vec<lens::LayerFraction>,
    pub records: usize,
    /// Share of records whose median final-layer reference rank is at most 2.
    pub median_rank_le2_share: f64,
    pub final_layer_median_of_medians: f64,
}

pub fn cmd_lens(args: &LensArgs) -> Result<LensReport> {
    let (params, vocab, test) = load_for_analysis(&args.checkpoint, &args.data)?;
    let mut fillers: Vec<SampleRecord> = test.into_iter().filter(|r| r.body_kind == data::BodyKind::Filler).collect();
    if let Some(n) = args.limit {
        fillers.truncate(n);
    }
    let norm = !args.raw;
    let fractions = lens::filler_fraction_by_layer(&params, &fillers, norm)?;
    lens::write_filler_fraction(&args.out.join("filler_fraction.csv"), &fractions)?;
    let ranks = lens::rank_report(&params, &fillers, norm)?;
    lens::write_rank_hist(&args.out.join("rank_hist.csv"), &ranks)?;
    for (i, r) in fillers.iter().enumerate().take(args.grids) {
        let grid = lens::layer_grid(&params, r, args.grid_rank, norm)?;
        lens::write_grid(&args.out.join(format!("grid_{i}.csv")), &grid, &vocab)?;
    }
    let mut medians = ranks.final_layer_medians.clone();
    let report = LensReport {
        filler_fraction: fractions,
        records: fillers.len(),
        median_rank_le2_share: ranks.share_with_median_at_most(2.0),
        final_layer_median_of_medians: lens::median(&mut medians).unwrap_or(f64::NAN),
    };
    write_json(&args.out.join("lens_summary.json"), &report)?;
    for f in &report.filler_fraction {
        println!("layer {}: filler argmax fraction {:.4} (n = {})", f.layer, f.fraction, f.n);
    }
    println!("records with median final-layer reference rank <= 2: {:.4}", report.median_rank_le2_share);
    Ok(report)
}

pub fn cmd_decode(args: &DecodeArgs) -> Result<Vec<StrategySummary>> {
    let (params, _, test) = load_for_analysis(&args.checkpoint, &args.data)?;
    if args.top_k == 0 {
        bail!(UsageError("--top-k must be at least 1".into()));
    }
    let mut fillers: Vec<SampleRecord> = test.into_iter().filter(|r| r.body_kind == data::BodyKind::Filler).collect();
    if let Some(n) = args.limit {
        fillers.truncate(n);
    }
    if fillers.is_empty() {
        return Err(DecodeError::Empty.into());
    }
    let modes: Vec<Strategy> = if args.mode.is_empty() { Strategy::ALL.to_vec() } else { args.mode.clone() };
    let mut summaries = Vec::new();
    for strategy in modes {
        let decodes = decode::decode_records(&params, &fillers, strategy, args.feedback, args.top_k, args.seed)?;
        decode::write_traces(&args.out.join(format!("traces_{}.jsonl", strategy.name())), &decodes)?;
        let s = decode::summarize(strategy, &fillers, &decodes)?;
        println!(
            "{:<20} answer {:.4}  recovery mean {:.4} median {:.4}  n {}  no-answer {}",
            strategy.name(),
            s.answer_accuracy,
            s.recovery_mean,
            s.recovery_median,
            s.n,
            s.no_answer
        );
        summaries.push(s);
    }
    decode::write_summary(&args.out.join("decode_summary.csv"), &summaries)?;
    Ok(summaries)
}
