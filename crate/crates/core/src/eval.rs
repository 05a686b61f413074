//! Teacher-forced evaluation: the record's own body is fed in and the
//! answer is read at the `ANS` position as `True` vs `False`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{BodyKind, SampleRecord};
use crate::model::{argmax, ModelError, ModelParams, Packed};
use crate::vocab::{FALSE, TRUE};

const CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub correct: usize,
    pub total: usize,
}

impl Tally {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            f64::NAN
        } else {
            self.correct as f64 / self.total as f64
        }
    }

    fn add(&mut self, other: Tally) {
        self.correct += other.correct;
        self.total += other.total;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub filler_answer: Tally,
    pub cot_answer: Tally,
    pub no_filler_answer: Tally,
    /// Next-token argmax accuracy over `:`..`EOS` targets of CoT records.
    pub cot_tokens: Tally,
}

impl EvalMetrics {
    fn merge(mut self, other: EvalMetrics) -> Self {
        self.filler_answer.add(other.filler_answer);
        self.cot_answer.add(other.cot_answer);
        self.no_filler_answer.add(other.no_filler_answer);
        self.cot_tokens.add(other.cot_tokens);
        self
    }
}

/// Answer read off the logits at the `ANS` position.
pub fn answer_from_logits(row: &[f32]) -> bool {
    row[TRUE as usize] > row[FALSE as usize]
}

fn eval_chunk(params: &ModelParams, records: &[&SampleRecord]) -> Result<EvalMetrics, ModelError> {
    let v = params.config.vocab_size;
    let seqs: Vec<&[u32]> = records.iter().map(|r| r.token_ids.as_slice()).collect();
    let batch = Packed::new(&seqs);
    let mut rows = Vec::new();
    for (r, &start) in records.iter().zip(&batch.starts) {
        rows.push(start + r.answer_marker());
        if r.body_kind == BodyKind::Cot {
            rows.extend(start + r.cot_start()..start + r.token_ids.len() - 1);
        }
    }
    let (logits, _) = params.forward_packed(batch, &rows, &params.rope())?;
    let mut m = EvalMetrics::default();
    let mut cursor = 0;
    for r in records {
        let correct = (answer_from_logits(&logits[cursor * v..(cursor + 1) * v]) == r.label()) as usize;
        cursor += 1;
        let tally = match r.body_kind {
            BodyKind::Cot => &mut m.cot_answer,
            BodyKind::Filler => &mut m.filler_answer,
            BodyKind::None => &mut m.no_filler_answer,
        };
        tally.add(Tally { correct, total: 1 });
        if r.body_kind == BodyKind::Cot {
            for p in r.cot_start()..r.token_ids.len() - 1 {
                let hit = argmax(&logits[cursor * v..(cursor + 1) * v]) as u32 == r.token_ids[p + 1];
                m.cot_tokens.add(Tally { correct: hit as usize, total: 1 });
                cursor += 1;
            }
        }
    }
    Ok(m)
}

/// Teacher-forced answer accuracy per body kind and CoT token accuracy.
pub fn evaluate(params: &ModelParams, records: &[SampleRecord]) -> Result<EvalMetrics, ModelError> {
    let refs: Vec<&SampleRecord> = records.iter().collect();
    let parts: Vec<EvalMetrics> = refs.par_chunks(CHUNK).map(|chunk| eval_chunk(params, chunk)).collect::<Result<_, _>>()?;
    Ok(parts.into_iter().fold(EvalMetrics::default(), EvalMetrics::merge))
}

/// Per-record teacher-forced answer correctness.
pub fn forced_answers(params: &ModelParams, records: &[SampleRecord]) -> Result<Vec<bool>, ModelError> {
    let v = params.config.vocab_size;
    let refs: Vec<&SampleRecord> = records.iter().collect();
    let parts: Vec<Vec<bool>> = refs
        .par_chunks(CHUNK)
        .map(|chunk| {
            let seqs: Vec<&[u32]> = chunk.iter().map(|r| r.token_ids.as_slice()).collect();
            let batch = Packed::new(&seqs);
            let rows: Vec<usize> = chunk.iter().zip(&batch.starts).map(|(r, &s)| s + r.answer_marker()).collect();
            let (logits, _) = params.forward_packed(batch, &rows, &params.rope())?;
            Ok(chunk.iter().enumerate().map(|(i, r)| answer_from_logits(&logits[i * v..(i + 1) * v]) == r.label()).collect())
        })
        .collect::<Result<_, ModelError>>()?;
    Ok(parts.concat())
}
