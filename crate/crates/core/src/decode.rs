//! Autoregressive decoding from the `:` prompt and recovery scoring.
//!
//! Three strategies share one loop and differ only in what happens when the
//! argmax is `FILLER`: greedy emits it, filler-bypass emits the best
//! non-filler token, random replacement emits a uniform non-filler token.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use clap::ValueEnum;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::SampleRecord;
use crate::lens::{median, sorted_ids};
use crate::model::{argmax, softmax_rows, KvCache, ModelError, ModelParams};
use crate::rng::SplitMix64;
use crate::vocab::{TokenId, ANS, COT_START, EOS, FALSE, FILLER, TRUE};

const RANDOM_STREAM: u64 = 0xDEC0;

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("prompt must be non-empty and end with ':'")]
    Prompt,
    #[error("reference body is empty")]
    EmptyReference,
    #[error("no records to decode")]
    Empty,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Greedy,
    FillerBypass,
    RandomReplacement,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Greedy, Strategy::FillerBypass, Strategy::RandomReplacement];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Greedy => "greedy",
            Strategy::FillerBypass => "filler-bypass",
            Strategy::RandomReplacement => "random-replacement",
        }
    }
}

/// What goes back into the context after a substituted step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Feedback {
    /// The emitted (substituted) token.
    #[default]
    Substitute,
    /// The original `FILLER`; the substitute is only reported.
    Filler,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeOptions {
    pub strategy: Strategy,
    pub feedback: Feedback,
    /// Candidates recorded per step.
    pub top_k: usize,
    /// Total sequence length cap (prompt included).
    pub max_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    /// Top candidates `(id, probability)`, plus the emitted token if it ranked lower.
    pub candidates: Vec<(TokenId, f32)>,
    pub emitted: TokenId,
    pub fed: TokenId,
    /// The argmax was `FILLER` and something else was emitted.
    pub substituted: bool,
    /// Every non-filler token had zero probability when substituting.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeTrace {
    pub strategy: Strategy,
    pub steps: Vec<StepTrace>,
}

impl DecodeTrace {
    /// Emitted tokens in order.
    pub fn emitted(&self) -> Vec<TokenId> {
        self.steps.iter().map(|s| s.emitted).collect()
    }
}

/// Highest-logit token other than `FILLER`; ties go to the lower id.
fn best_non_filler(row: &[f32]) -> TokenId {
    let mut best: Option<usize> = None;
    for (i, &x) in row.iter().enumerate() {
        if i != FILLER as usize && best.is_none_or(|b| x > row[b]) {
            best = Some(i);
        }
    }
    best.expect("vocabulary has a non-filler token") as TokenId
}

fn random_non_filler(vocab_size: usize, rng: &mut SplitMix64) -> TokenId {
    let r = rng.below(vocab_size as u64 - 1) as TokenId;
    if r >= FILLER {
        r + 1
    } else {
        r
    }
}

/// Decodes from `prompt` (ending at `:`) until `EOS` or `max_len` total tokens.
pub fn decode(params: &ModelParams, prompt: &[TokenId], options: &DecodeOptions, rng: &mut SplitMix64) -> Result<DecodeTrace, DecodeError> {
    if prompt.last() != Some(&COT_START) {
        return Err(DecodeError::Prompt);
    }
    let v = params.config.vocab_size;
    let max_len = options.max_len.min(params.config.max_seq_len + 1);
    let mut cache = KvCache::new(params);
    let mut logits = Vec::new();
    for &tok in prompt {
        logits = params.forward_step(&mut cache, tok)?;
    }
    let mut steps = Vec::new();
    let mut len = prompt.len();
    while len < max_len {
        let top = argmax(&logits) as TokenId;
        let (emitted, substituted) = match (options.strategy, top == FILLER) {
            (Strategy::FillerBypass, true) => (best_non_filler(&logits), true),
            (Strategy::RandomReplacement, true) => (random_non_filler(v, rng), true),
            _ => (top, false),
        };
        let probs = softmax_rows(&logits, v);
        let mut candidates: Vec<(TokenId, f32)> = sorted_ids(&probs).into_iter().take(options.top_k).map(|id| (id, probs[id as usize])).collect();
        if !candidates.iter().any(|c| c.0 == emitted) {
            candidates.push((emitted, probs[emitted as usize]));
        }
        let degenerate = substituted && options.strategy == Strategy::FillerBypass && probs[emitted as usize] == 0.0;
        let fed = if substituted && options.feedback == Feedback::Filler { FILLER } else { emitted };
        steps.push(StepTrace { candidates, emitted, fed, substituted, degenerate });
        len += 1;
        if emitted == EOS || len >= max_len || len > params.config.max_seq_len {
            break;
        }
        logits = params.forward_step(&mut cache, fed)?;
    }
    Ok(DecodeTrace { strategy: options.strategy, steps })
}

/// Body and answer read off a decoded continuation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    /// Tokens before the first `ANS` (everything if there is none).
    pub body: Vec<TokenId>,
    /// Token right after `ANS` when it is `True`/`False`.
    pub answer: Option<bool>,
}

impl Outcome {
    pub fn parse(generated: &[TokenId]) -> Self {
        match generated.iter().position(|&t| t == ANS) {
            Some(i) => {
                let answer = match generated.get(i + 1) {
                    Some(&TRUE) => Some(true),
                    Some(&FALSE) => Some(false),
                    _ => None,
                };
                Outcome { body: generated[..i].to_vec(), answer }
            }
            None => Outcome { body: generated.to_vec(), answer: None },
        }
    }
}

/// Share of reference positions reproduced; unmatched tail positions count as wrong.
pub fn recovery_score(decoded: &[TokenId], reference: &[TokenId]) -> Result<f64, DecodeError> {
    if reference.is_empty() {
        return Err(DecodeError::EmptyReference);
    }
    let hits = decoded.iter().zip(reference).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / decoded.len().max(reference.len()) as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AnswerTally {
    pub correct: usize,
    pub total: usize,
    /// Decodes that never produced `ANS` + boolean (counted as wrong).
    pub no_answer: usize,
}

impl AnswerTally {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            f64::NAN
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

pub fn answer_accuracy(records: &[SampleRecord], outcomes: &[Outcome]) -> AnswerTally {
    let mut tally = AnswerTally::default();
    for (r, o) in records.iter().zip(outcomes) {
        tally.total += 1;
        match o.answer {
            Some(a) if a == r.label() => tally.correct += 1,
            Some(_) => {}
            None => tally.no_answer += 1,
        }
    }
    tally
}

/// Default length cap: prompt, reference body, then `ANS`, bool, `EOS` and one slack token.
pub fn default_max_len(record: &SampleRecord) -> usize {
    record.prompt().len() + record.reference_body().len() + 4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordDecode {
    pub record: usize,
    pub label: bool,
    pub strategy: Strategy,
    pub generated: Vec<TokenId>,
    pub outcome: Outcome,
    /// `None` when the reference body is empty.
    pub recovery: Option<f64>,
    pub trace: DecodeTrace,
}

/// Decodes every record's prompt with one strategy, in parallel.
///
/// Random replacement draws from a per-record stream, so results do not
/// depend on thread count.
pub fn decode_records(
    params: &ModelParams,
    records: &[SampleRecord],
    strategy: Strategy,
    feedback: Feedback,
    top_k: usize,
    seed: u64,
) -> Result<Vec<RecordDecode>, DecodeError> {
    records
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            let options = DecodeOptions { strategy, feedback, top_k, max_len: default_max_len(r) };
            let mut rng = SplitMix64::stream(seed, &[RANDOM_STREAM, i as u64]);
            let trace = decode(params, r.prompt(), &options, &mut rng)?;
            let generated = trace.emitted();
            let outcome = Outcome::parse(&generated);
            let recovery = recovery_score(&outcome.body, r.reference_body()).ok();
            Ok(RecordDecode { record: i, label: r.label(), strategy, generated, outcome, recovery, trace })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySummary {
    pub strategy: Strategy,
    pub answer_accuracy: f64,
    pub recovery_mean: f64,
    pub recovery_median: f64,
    pub n: usize,
    pub no_answer: usize,
    /// Records with a non-empty reference body (the recovery denominator).
    pub recovery_n: usize,
    pub recovery_se: f64,
}

pub fn summarize(strategy: Strategy, records: &[SampleRecord], decodes: &[RecordDecode]) -> Result<StrategySummary, DecodeError> {
    if decodes.is_empty() {
        return Err(DecodeError::Empty);
    }
    let outcomes: Vec<Outcome> = decodes.iter().map(|d| d.outcome.clone()).collect();
    let tally = answer_accuracy(records, &outcomes);
    let mut scores: Vec<f64> = decodes.iter().filter_map(|d| d.recovery).collect();
    let n = scores.len();
    let mean = if n == 0 { f64::NAN } else { scores.iter().sum::<f64>() / n as f64 };
    let se = if n < 2 {
        f64::NAN
    } else {
        let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    };
    Ok(StrategySummary {
        strategy,
        answer_accuracy: tally.accuracy(),
        recovery_mean: mean,
        recovery_median: median(&mut scores).unwrap_or(f64::NAN),
        n: tally.total,
        no_answer: tally.no_answer,
        recovery_n: n,
        recovery_se: se,
    })
}

pub fn write_traces(path: &Path, decodes: &[RecordDecode]) -> Result<(), DecodeError> {
    let mut w = BufWriter::new(File::create(path)?);
    for d in decodes {
        serde_json::to_writer(&mut w, d)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary(path: &Path, summaries: &[StrategySummary]) -> Result<(), DecodeError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["strategy", "answer_accuracy", "recovery_mean", "recovery_median", "n", "no_answer", "recovery_n", "recovery_se"])?;
    for s in summaries {
        w.write_record([
            s.strategy.name().to_string(),
            format!("{:.6}", s.answer_accuracy),
            format!("{:.6}", s.recovery_mean),
            format!("{:.6}", s.recovery_median),
            s.n.to_string(),
            s.no_answer.to_string(),
            s.recovery_n.to_string(),
            format!("{:.6}", s.recovery_se),
        ])?;
    }
    w.flush()?;
    Ok(())
}
