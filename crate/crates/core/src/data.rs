//! Match-3 dataset generation.
//!
//! A record is `BOS (letter value)×seq_len : body ANS bool EOS`. The body is
//! either the instance-adaptive chain of thought or the same number of
//! filler tokens. Every record keeps its reference CoT so filler records can
//! be scored for recovery later.

use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::oracle::{triplets, OracleError, TupleInstance};
use crate::rng::SplitMix64;
use crate::vocab::{self, TokenId, VocabError, Vocabulary, ANS, BOS, COT_START, EOS, FILLER};

/// Upper bound on rejection-sampling attempts per instance.
pub const MAX_ATTEMPTS: usize = 1_000_000;

const TRAIN_STREAM: u64 = 0;
const TEST_STREAM: u64 = 1;
const LABEL_STREAM: u64 = 2;
const KIND_STREAM: u64 = 3;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset config: {0}")]
    Config(String),
    #[error("no instance with label {label} after {MAX_ATTEMPTS} attempts; parameters are degenerate")]
    Exhausted { label: bool },
    #[error("malformed chain of thought: {0}")]
    MalformedCot(String),
    #[error("record {line}: {reason}")]
    Record { line: usize, reason: String },
    #[error("checksum mismatch for {0}")]
    Checksum(PathBuf),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub train_n: usize,
    pub test_n: usize,
    pub dim: usize,
    pub modulus: usize,
    pub seq_len: usize,
    pub true_rate: f64,
    pub cot_rate: f64,
    pub no_filler_rate: f64,
    pub corruption_rate: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            train_n: 200_000,
            test_n: 2_000,
            dim: 3,
            modulus: 10,
            seq_len: 7,
            true_rate: 0.5,
            cot_rate: 0.5,
            no_filler_rate: 0.0,
            corruption_rate: 4.0 / 3.0,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        for (name, rate) in [("true_rate", self.true_rate), ("cot_rate", self.cot_rate), ("no_filler_rate", self.no_filler_rate)] {
            if !(0.0..=1.0).contains(&rate) {
                return Err(DataError::Config(format!("{name} = {rate} not in [0, 1]")));
            }
        }
        if !(self.corruption_rate >= 0.0 && self.corruption_rate.is_finite()) {
            return Err(DataError::Config(format!("corruption_rate = {} must be finite and >= 0", self.corruption_rate)));
        }
        Vocabulary::build(self.dim, self.modulus, self.seq_len)?;
        Ok(())
    }

    fn check_vocab(&self, vocab: &Vocabulary) -> Result<(), DataError> {
        if (vocab.dim(), vocab.modulus(), vocab.seq_len()) != (self.dim, self.modulus, self.seq_len) {
            return Err(DataError::Config(format!(
                "vocabulary is ({}, {}, {}) but config asks for ({}, {}, {})",
                vocab.dim(),
                vocab.modulus(),
                vocab.seq_len(),
                self.dim,
                self.modulus,
                self.seq_len
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BodyKind {
    Cot,
    Filler,
    /// Bare answer, only produced when `no_filler_rate > 0`.
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub token_ids: Vec<TokenId>,
    pub body_kind: BodyKind,
    /// Reference CoT from `:` through the answer boolean.
    pub reference_cot_ids: Vec<TokenId>,
    pub instance: TupleInstance,
}

impl SampleRecord {
    /// Index of the `:` token.
    pub fn cot_start(&self) -> usize {
        1 + 2 * self.instance.len()
    }

    /// Prompt ending at `:` inclusive; decoding starts right after it.
    pub fn prompt(&self) -> &[TokenId] {
        &self.token_ids[..=self.cot_start()]
    }

    /// Body tokens strictly between `:` and `ANS`.
    pub fn body(&self) -> &[TokenId] {
        let start = self.cot_start() + 1;
        &self.token_ids[start..self.answer_marker()]
    }

    /// Reference CoT body (what a filler body stands in for).
    pub fn reference_body(&self) -> &[TokenId] {
        &self.reference_cot_ids[1..self.reference_cot_ids.len() - 2]
    }

    /// Index of the `ANS` token.
    pub fn answer_marker(&self) -> usize {
        self.token_ids.len() - 3
    }

    pub fn label(&self) -> bool {
        self.instance.label()
    }
}

#[derive(Serialize, Deserialize)]
struct RecordJson {
    ids: Vec<TokenId>,
    kind: BodyKind,
    ref_cot: Vec<TokenId>,
    tuples: Vec<Vec<u8>>,
    label: bool,
}

/// Draws a uniform instance with the requested label.
///
/// Each candidate is corrupted at `config.corruption_rate` before the label
/// check, so corrupted and untouched instances compete in the same rejection loop.
pub fn sample_instance(config: &DatasetConfig, rng: &mut SplitMix64, want_label: bool) -> Result<TupleInstance, DataError> {
    let n_digits = config.seq_len * config.dim;
    for _ in 0..MAX_ATTEMPTS {
        let digits: Vec<u8> = (0..n_digits).map(|_| rng.below(config.modulus as u64) as u8).collect();
        let candidate = TupleInstance::from_digits(digits, config.dim, config.modulus)?;
        let candidate = corrupt_instance(candidate, config.corruption_rate, rng).instance;
        if candidate.label() == want_label {
            return Ok(candidate);
        }
    }
    Err(DataError::Exhausted { label: want_label })
}

#[derive(Debug, Clone)]
pub struct Corruption {
    pub instance: TupleInstance,
    pub edits: usize,
}

/// Applies `K ~ Poisson(rate)` single-digit edits, each to a different value.
pub fn corrupt_instance(mut instance: TupleInstance, rate: f64, rng: &mut SplitMix64) -> Corruption {
    let edits = rng.poisson(rate) as usize;
    let modulus = instance.modulus() as u64;
    for _ in 0..edits {
        let position = rng.below(instance.len() as u64) as usize;
        let d = rng.below(instance.dim() as u64) as usize;
        let old = instance.digit(position, d) as u64;
        let new = (old + 1 + rng.below(modulus - 1)) % modulus;
        instance.set_digit(position, d, new as u8).expect("digit below modulus");
    }
    Corruption { instance, edits }
}

/// Instance-adaptive chain of thought, from `:` through the answer boolean.
pub fn generate_cot(instance: &TupleInstance) -> Vec<String> {
    let mut out = vec![":".to_string()];
    for (i, j, k) in triplets(instance.len()) {
        if instance.dim_sum(i, j, k, 0) != 0 {
            continue;
        }
        out.extend([i, j, k].map(vocab::letter_token));
        out.extend([i, j, k].map(|p| vocab::value_token(instance.tuple(p))));
        for d in 1..instance.dim() {
            let s = instance.dim_sum(i, j, k, d);
            out.push(vocab::digit_token(s, instance.dim()));
            if s != 0 {
                break;
            }
        }
    }
    out.push("ANS".to_string());
    out.push(if instance.label() { "True" } else { "False" }.to_string());
    out
}

/// Same as [`generate_cot`] but straight to ids.
pub fn generate_cot_ids(instance: &TupleInstance, vocab: &Vocabulary) -> Vec<TokenId> {
    let mut out = vec![COT_START];
    for (i, j, k) in triplets(instance.len()) {
        if instance.dim_sum(i, j, k, 0) != 0 {
            continue;
        }
        out.extend([i, j, k].map(|p| vocab.letter_id(p)));
        out.extend([i, j, k].map(|p| vocab.value_id(instance.tuple(p))));
        for d in 1..instance.dim() {
            let s = instance.dim_sum(i, j, k, d);
            out.push(vocab.digit_id(s));
            if s != 0 {
                break;
            }
        }
    }
    out.push(ANS);
    out.push(Vocabulary::bool_id(instance.label()));
    out
}

/// Replaces every token between `:` and `ANS bool` with the filler token.
pub fn make_filler<S: AsRef<str>>(reference_cot: &[S]) -> Result<Vec<String>, DataError> {
    let n = reference_cot.len();
    let tok = |i: usize| reference_cot[i].as_ref();
    if n < 3 || tok(0) != ":" || tok(n - 2) != "ANS" || !matches!(tok(n - 1), "True" | "False") {
        return Err(DataError::MalformedCot(reference_cot.iter().map(|s| s.as_ref()).collect::<Vec<_>>().join(" ")));
    }
    let mut out = Vec::with_capacity(n);
    out.push(":".to_string());
    out.extend(std::iter::repeat_n(".".to_string(), n - 3));
    out.push("ANS".to_string());
    out.push(tok(n - 1).to_string());
    Ok(out)
}

fn prompt_ids(instance: &TupleInstance, vocab: &Vocabulary) -> Vec<TokenId> {
    let mut ids = Vec::with_capacity(2 + 2 * instance.len());
    ids.push(BOS);
    for p in 0..instance.len() {
        ids.push(vocab.letter_id(p));
        ids.push(vocab.value_id(instance.tuple(p)));
    }
    ids.push(COT_START);
    ids
}

/// Assembles a full record around `instance`.
pub fn make_record(instance: TupleInstance, kind: BodyKind, vocab: &Vocabulary) -> SampleRecord {
    let reference = generate_cot_ids(&instance, vocab);
    let mut ids = prompt_ids(&instance, vocab);
    match kind {
        BodyKind::Cot => ids.extend_from_slice(&reference[1..]),
        BodyKind::Filler => {
            ids.extend(std::iter::repeat_n(FILLER, reference.len() - 3));
            ids.extend_from_slice(&reference[reference.len() - 2..]);
        }
        BodyKind::None => ids.extend_from_slice(&reference[reference.len() - 2..]),
    }
    ids.push(EOS);
    SampleRecord { token_ids: ids, body_kind: kind, reference_cot_ids: reference, instance }
}

/// Re-parses a token sequence and checks every record invariant.
pub fn validate_record(record: &SampleRecord, vocab: &Vocabulary) -> Result<(), String> {
    let ids = &record.token_ids;
    let n = vocab.seq_len();
    if ids.len() < 2 * n + 5 || ids[0] != BOS || ids[2 * n + 1] != COT_START || *ids.last().unwrap() != EOS {
        return Err("bad frame".into());
    }
    let mut digits = Vec::with_capacity(n * vocab.dim());
    for p in 0..n {
        if vocab.letter_position(ids[1 + 2 * p]) != Some(p) {
            return Err(format!("expected letter {p}"));
        }
        digits.extend(vocab.value_digits(ids[2 + 2 * p]).ok_or("expected value token")?);
    }
    let instance = TupleInstance::from_digits(digits, vocab.dim(), vocab.modulus()).map_err(|e| e.to_string())?;
    if instance != record.instance {
        return Err("prompt disagrees with stored tuples".into());
    }
    let answer = ids[ids.len() - 2];
    if ids[ids.len() - 3] != ANS || answer != Vocabulary::bool_id(instance.label()) {
        return Err("answer does not match oracle".into());
    }
    let reference = generate_cot_ids(&instance, vocab);
    if reference != record.reference_cot_ids {
        return Err("stored reference CoT differs from generator".into());
    }
    let body = record.body();
    let ok = match record.body_kind {
        BodyKind::Cot => body == record.reference_body(),
        BodyKind::Filler => body.len() == record.reference_body().len() && body.iter().all(|&t| t == FILLER),
        BodyKind::None => body.is_empty(),
    };
    if !ok {
        return Err(format!("{:?} body does not match its reference", record.body_kind));
    }
    Ok(())
}

fn record_to_json(record: &SampleRecord) -> RecordJson {
    RecordJson {
        ids: record.token_ids.clone(),
        kind: record.body_kind,
        ref_cot: record.reference_cot_ids.clone(),
        tuples: record.instance.tuples(),
        label: record.label(),
    }
}

/// Exact-count flags (`round(rate * n)` trues) in a seeded random order.
fn stratified_flags(n: usize, rate: f64, rng: &mut SplitMix64) -> Vec<bool> {
    let k = (rate * n as f64).round() as usize;
    let mut flags: Vec<bool> = (0..n).map(|i| i < k).collect();
    rng.shuffle(&mut flags);
    flags
}

fn instance_key(instance: &TupleInstance) -> Vec<u8> {
    instance.digits().to_vec()
}

/// Generates one split in record order. Records never collide with `exclude`.
pub fn generate_split(
    config: &DatasetConfig,
    vocab: &Vocabulary,
    split: u64,
    n: usize,
    exclude: Option<&HashSet<Vec<u8>>>,
) -> Result<Vec<SampleRecord>, DataError> {
    config.validate()?;
    config.check_vocab(vocab)?;
    let labels = stratified_flags(n, config.true_rate, &mut SplitMix64::stream(config.seed, &[split, LABEL_STREAM]));
    let cot = stratified_flags(n, config.cot_rate, &mut SplitMix64::stream(config.seed, &[split, KIND_STREAM]));
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = SplitMix64::stream(config.seed, &[split, i as u64]);
            let instance = loop {
                let instance = sample_instance(config, &mut rng, labels[i])?;
                if exclude.is_none_or(|set| !set.contains(&instance_key(&instance))) {
                    break instance;
                }
            };
            let kind = if cot[i] {
                BodyKind::Cot
            } else if config.no_filler_rate > 0.0 && rng.next_f64() < config.no_filler_rate {
                BodyKind::None
            } else {
                BodyKind::Filler
            };
            Ok(make_record(instance, kind, vocab))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub file: String,
    pub records: usize,
    pub true_labels: usize,
    pub cot: usize,
    pub filler: usize,
    pub no_filler: usize,
    pub max_len: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: DatasetConfig,
    pub vocab_size: usize,
    pub train: SplitSummary,
    pub test: SplitSummary,
    /// Test instances whose tuples also occur in train (always 0; test draws skip them).
    pub train_test_overlap: usize,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRAIN_FILE: &str = "train.jsonl";
pub const TEST_FILE: &str = "test.jsonl";

fn write_split(path: &Path, records: &[SampleRecord]) -> Result<SplitSummary, DataError> {
    let mut hasher = Sha256::new();
    let file = File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    for record in records {
        let mut line = serde_json::to_vec(&record_to_json(record))?;
        line.push(b'\n');
        hasher.update(&line);
        out.write_all(&line).map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))?;
    let count = |k: BodyKind| records.iter().filter(|r| r.body_kind == k).count();
    Ok(SplitSummary {
        file: path.file_name().unwrap().to_string_lossy().into_owned(),
        records: records.len(),
        true_labels: records.iter().filter(|r| r.label()).count(),
        cot: count(BodyKind::Cot),
        filler: count(BodyKind::Filler),
        no_filler: count(BodyKind::None),
        max_len: records.iter().map(|r| r.token_ids.len()).max().unwrap_or(0),
        sha256: hex::encode(hasher.finalize()),
    })
}

/// Generates train and test splits under `out_dir` and writes the manifest.
pub fn build_dataset(config: &DatasetConfig, vocab: &Vocabulary, out_dir: &Path) -> Result<Manifest, DataError> {
    config.validate()?;
    config.check_vocab(vocab)?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let train = generate_split(config, vocab, TRAIN_STREAM, config.train_n, None)?;
    let seen: HashSet<Vec<u8>> = train.iter().map(|r| instance_key(&r.instance)).collect();
    let test = generate_split(config, vocab, TEST_STREAM, config.test_n, Some(&seen))?;
    let overlap = test.iter().filter(|r| seen.contains(&instance_key(&r.instance))).count();

    let manifest = Manifest {
        config: config.clone(),
        vocab_size: vocab.len(),
        train: write_split(&out_dir.join(TRAIN_FILE), &train)?,
        test: write_split(&out_dir.join(TEST_FILE), &test)?,
        train_test_overlap: overlap,
    };
    let path = out_dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(io_err(&path))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, DataError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn file_sha256(path: &Path) -> Result<String, DataError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Reads a JSONL split and validates every record against `vocab`.
pub fn load_split(path: &Path, vocab: &Vocabulary) -> Result<Vec<SampleRecord>, DataError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut records = Vec::new();
    for (line_no, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| DataError::Record { line: line_no + 1, reason };
        let json: RecordJson = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        let instance = TupleInstance::from_tuples(&json.tuples, vocab.modulus()).map_err(|e| bad(e.to_string()))?;
        if instance.label() != json.label {
            return Err(bad("label disagrees with oracle".into()));
        }
        let record = SampleRecord { token_ids: json.ids, body_kind: json.kind, reference_cot_ids: json.ref_cot, instance };
        validate_record(&record, vocab).map_err(bad)?;
        records.push(record);
    }
    Ok(records)
}

/// Loads both splits after checking their checksums against the manifest.
pub fn load_dataset(dir: &Path, vocab: &Vocabulary) -> Result<(Manifest, Vec<SampleRecord>, Vec<SampleRecord>), DataError> {
    let manifest = read_manifest(dir)?;
    manifest.config.check_vocab(vocab)?;
    let mut splits = Vec::new();
    for summary in [&manifest.train, &manifest.test] {
        let path = dir.join(&summary.file);
        if file_sha256(&path)? != summary.sha256 {
            return Err(DataError::Checksum(path));
        }
        splits.push(load_split(&path, vocab)?);
    }
    let test = splits.pop().unwrap();
    let train = splits.pop().unwrap();
    Ok((manifest, train, test))
}

/// Longest record any instance of this shape can produce.
pub fn max_record_len(dim: usize, seq_len: usize) -> usize {
    let n_triplets = seq_len * (seq_len - 1) * (seq_len - 2) / 6;
    let per_triplet = 6 + dim.saturating_sub(1);
    // BOS, prompt pairs, ':', body, ANS, bool, EOS
    1 + 2 * seq_len + 1 + n_triplets * per_triplet + 3
}
