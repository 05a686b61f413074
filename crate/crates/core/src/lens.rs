//! Logit lens: every layer's residual stream read out through `w_out`.
//!
//! Layer 0 is the embedding output and layer `L` the last block's output, so
//! a model with `L` blocks has `L + 1` lens layers. By default the final
//! RMSNorm is applied before projecting; `apply_final_norm = false` gives the
//! raw `h^l · W_out` reading.
//!
//! Statistics over filler records use prediction positions: position `p`
//! reads the lens distribution for token `p + 1`, and only positions whose
//! next token lies in the body are counted.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::data::{BodyKind, SampleRecord};
use crate::model::{argmax, softmax_rows, ModelError, ModelParams, Packed, Tensor};
use crate::vocab::{TokenId, Vocabulary, FILLER};

const CHUNK: usize = 16;

#[derive(Debug, Error)]
pub enum LensError {
    #[error("k = {k} is outside 1..={vocab}")]
    TopK { k: usize, vocab: usize },
    #[error("rank index {index} is outside 1..={vocab}")]
    RankIndex { index: usize, vocab: usize },
    #[error("layer {layer} is outside 0..={max}")]
    Layer { layer: usize, max: usize },
    #[error("no filler records in the slice")]
    NoFiller,
    #[error("record is not a filler record")]
    NotFiller,
    #[error("body has {body} tokens but the reference has {reference}")]
    LengthMismatch { body: usize, reference: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Token ids of `row` from most to least likely; ties go to the lower id.
pub fn sorted_ids(row: &[f32]) -> Vec<TokenId> {
    let mut ids: Vec<TokenId> = (0..row.len() as TokenId).collect();
    ids.sort_by(|&a, &b| row[b as usize].total_cmp(&row[a as usize]).then(a.cmp(&b)));
    ids
}

/// 1-based rank of `id` in `row` under the same ordering as [`sorted_ids`].
pub fn rank_of(row: &[f32], id: TokenId) -> usize {
    let x = row[id as usize];
    1 + row.iter().enumerate().filter(|&(j, &y)| y > x || (y == x && (j as TokenId) < id)).count()
}

/// `k`-th best token (1-based) of `row`.
pub fn kth_token(row: &[f32], k: usize) -> TokenId {
    sorted_ids(row)[k - 1]
}

/// Per-layer lens readout of one sequence.
#[derive(Debug, Clone)]
pub struct LensSnapshot {
    /// Residual streams `h^0..h^L`, each `len × d_model`.
    pub hidden: Vec<Tensor>,
    /// Lens logits `z^0..z^L`, each `len × vocab_size`.
    pub logits: Vec<Tensor>,
    /// `topk[l][t]`: the `k` most likely `(token, probability)` pairs.
    pub topk: Vec<Vec<Vec<(TokenId, f32)>>>,
}

pub fn logit_lens(params: &ModelParams, ids: &[TokenId], k: usize, apply_final_norm: bool) -> Result<LensSnapshot, LensError> {
    let v = params.config.vocab_size;
    if k == 0 || k > v {
        return Err(LensError::TopK { k, vocab: v });
    }
    let out = params.forward(ids, true)?;
    let hidden = out.hidden.expect("hidden states were requested").layers;
    let logits: Vec<Tensor> = hidden
        .iter()
        .map(|h| Tensor { shape: vec![ids.len(), v], data: params.lens_project(&h.data, apply_final_norm) })
        .collect();
    let topk = logits
        .iter()
        .map(|z| {
            let probs = softmax_rows(&z.data, v);
            probs.chunks(v).map(|p| sorted_ids(p).into_iter().take(k).map(|id| (id, p[id as usize])).collect()).collect()
        })
        .collect();
    Ok(LensSnapshot { hidden, logits, topk })
}

/// Lens logits at selected rows of each sequence, per layer.
struct RowLens {
    /// `logits[l]` is `rows × vocab_size` over all selected rows in order.
    logits: Vec<Vec<f32>>,
}

fn lens_at(params: &ModelParams, seqs: &[&[TokenId]], rows_per_seq: &[Vec<usize>], apply_final_norm: bool) -> Result<RowLens, LensError> {
    let d = params.config.d_model;
    let batch = Packed::new(seqs);
    let starts = batch.starts.clone();
    let (_, cache) = params.forward_packed(batch, &[], &params.rope())?;
    let logits = (0..=params.config.n_layers)
        .map(|l| {
            let h = cache.hidden(l);
            let mut gathered = Vec::new();
            for (&start, rows) in starts.iter().zip(rows_per_seq) {
                for &r in rows {
                    gathered.extend_from_slice(&h[(start + r) * d..(start + r + 1) * d]);
                }
            }
            params.lens_project(&gathered, apply_final_norm)
        })
        .collect();
    Ok(RowLens { logits })
}

/// Positions whose next token is a body token: `cot_start .. answer_marker - 1`.
fn body_positions(record: &SampleRecord) -> Vec<usize> {
    (record.cot_start()..record.answer_marker() - 1).collect()
}

fn filler_records(records: &[SampleRecord]) -> Result<Vec<&SampleRecord>, LensError> {
    let fillers: Vec<&SampleRecord> = records.iter().filter(|r| r.body_kind == BodyKind::Filler).collect();
    if fillers.is_empty() {
        Err(LensError::NoFiller)
    } else {
        Ok(fillers)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerFraction {
    pub layer: usize,
    pub fraction: f64,
    pub n: usize,
}

/// Per layer, the share of filler-body positions whose lens argmax is `FILLER`.
pub fn filler_fraction_by_layer(params: &ModelParams, records: &[SampleRecord], apply_final_norm: bool) -> Result<Vec<LayerFraction>, LensError> {
    let fillers = filler_records(records)?;
    let v = params.config.vocab_size;
    let layers = params.config.n_layers + 1;
    let counts: Vec<(Vec<usize>, usize)> = fillers
        .par_chunks(CHUNK)
        .map(|chunk| {
            let seqs: Vec<&[TokenId]> = chunk.iter().map(|r| r.token_ids.as_slice()).collect();
            let rows: Vec<Vec<usize>> = chunk.iter().map(|r| body_positions(r)).collect();
            let lens = lens_at(params, &seqs, &rows, apply_final_norm)?;
            let hits = lens.logits.iter().map(|z| z.chunks(v).filter(|row| argmax(row) == FILLER as usize).count()).collect();
            Ok((hits, rows.iter().map(Vec::len).sum()))
        })
        .collect::<Result<_, LensError>>()?;
    let n: usize = counts.iter().map(|c| c.1).sum();
    Ok((0..layers)
        .map(|l| {
            let hits: usize = counts.iter().map(|c| c.0[l]).sum();
            LayerFraction { layer: l, fraction: if n == 0 { 0.0 } else { hits as f64 / n as f64 }, n }
        })
        .collect())
}

/// Rank of the reference CoT token at every filler-body position of one record.
pub fn rank_of_reference(params: &ModelParams, record: &SampleRecord, layer: usize, apply_final_norm: bool) -> Result<Vec<usize>, LensError> {
    if layer > params.config.n_layers {
        return Err(LensError::Layer { layer, max: params.config.n_layers });
    }
    let ranks = reference_ranks(params, &[record], apply_final_norm)?;
    Ok(ranks.into_iter().next().map(|mut r| r.swap_remove(layer)).unwrap_or_default())
}

/// `ranks[record][layer][position]` for a batch of filler records.
fn reference_ranks(params: &ModelParams, records: &[&SampleRecord], apply_final_norm: bool) -> Result<Vec<Vec<Vec<usize>>>, LensError> {
    let v = params.config.vocab_size;
    for r in records {
        if r.body_kind != BodyKind::Filler {
            return Err(LensError::NotFiller);
        }
        let (body, reference) = (r.body().len(), r.reference_body().len());
        if body != reference {
            return Err(LensError::LengthMismatch { body, reference });
        }
    }
    let seqs: Vec<&[TokenId]> = records.iter().map(|r| r.token_ids.as_slice()).collect();
    let rows: Vec<Vec<usize>> = records.iter().map(|r| body_positions(r)).collect();
    let lens = lens_at(params, &seqs, &rows, apply_final_norm)?;
    let mut out = Vec::with_capacity(records.len());
    let mut offset = 0;
    for r in records {
        let reference = r.reference_body();
        let per_layer = lens
            .logits
            .iter()
            .map(|z| reference.iter().enumerate().map(|(i, &id)| rank_of(&z[(offset + i) * v..(offset + i + 1) * v], id)).collect())
            .collect();
        offset += reference.len();
        out.push(per_layer);
    }
    Ok(out)
}

/// Reference-token ranks over a slice of filler records.
#[derive(Debug, Clone, PartialEq)]
pub struct RankReport {
    /// `histogram[layer]`: rank → count over all body positions.
    pub histogram: Vec<BTreeMap<usize, usize>>,
    /// Median final-layer rank per record with a non-empty body.
    pub final_layer_medians: Vec<f64>,
}

impl RankReport {
    /// Share of records whose median final-layer rank is at most `max_rank`.
    pub fn share_with_median_at_most(&self, max_rank: f64) -> f64 {
        if self.final_layer_medians.is_empty() {
            return 0.0;
        }
        self.final_layer_medians.iter().filter(|&&m| m <= max_rank).count() as f64 / self.final_layer_medians.len() as f64
    }
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 { values[n / 2] } else { (values[n / 2 - 1] + values[n / 2]) / 2.0 })
}

pub fn rank_report(params: &ModelParams, records: &[SampleRecord], apply_final_norm: bool) -> Result<RankReport, LensError> {
    let fillers = filler_records(records)?;
    let layers = params.config.n_layers + 1;
    let per_record: Vec<Vec<Vec<usize>>> = fillers
        .par_chunks(CHUNK)
        .map(|chunk| reference_ranks(params, chunk, apply_final_norm))
        .collect::<Result<Vec<_>, _>>()?
        .concat();
    let mut histogram = vec![BTreeMap::new(); layers];
    let mut final_layer_medians = Vec::new();
    for ranks in &per_record {
        for (l, layer_ranks) in ranks.iter().enumerate() {
            for &r in layer_ranks {
                *histogram[l].entry(r).or_insert(0) += 1;
            }
        }
        let mut last: Vec<f64> = ranks[layers - 1].iter().map(|&r| r as f64).collect();
        if let Some(m) = median(&mut last) {
            final_layer_medians.push(m);
        }
    }
    Ok(RankReport { histogram, final_layer_medians })
}

/// `(L + 1) × body_len` grid of the `rank_index`-th lens token at each body position.
pub fn layer_grid(params: &ModelParams, record: &SampleRecord, rank_index: usize, apply_final_norm: bool) -> Result<Vec<Vec<TokenId>>, LensError> {
    let v = params.config.vocab_size;
    if rank_index == 0 || rank_index > v {
        return Err(LensError::RankIndex { index: rank_index, vocab: v });
    }
    let rows = vec![body_positions(record)];
    let lens = lens_at(params, &[record.token_ids.as_slice()], &rows, apply_final_norm)?;
    Ok(lens.logits.iter().map(|z| z.chunks(v).map(|row| kth_token(row, rank_index)).collect()).collect())
}

pub fn write_filler_fraction(path: &Path, fractions: &[LayerFraction]) -> Result<(), LensError> {
    let mut w = csv::Writer::from_path(path)?;
    for f in fractions {
        w.serialize(f)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_rank_hist(path: &Path, report: &RankReport) -> Result<(), LensError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["layer", "rank", "count"])?;
    for (layer, hist) in report.histogram.iter().enumerate() {
        for (rank, count) in hist {
            w.write_record([layer.to_string(), rank.to_string(), count.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// One row per layer: `layer, tok_0, tok_1, ...`, tokens rendered as strings.
pub fn write_grid(path: &Path, grid: &[Vec<TokenId>], vocab: &Vocabulary) -> Result<(), LensError> {
    let mut w = csv::Writer::from_path(path)?;
    let width = grid.first().map_or(0, Vec::len);
    let mut header = vec!["layer".to_string()];
    header.extend((0..width).map(|t| format!("t{t}")));
    w.write_record(&header)?;
    for (layer, row) in grid.iter().enumerate() {
        let mut cells = vec![layer.to_string()];
        cells.extend(row.iter().map(|&id| vocab.token(id).unwrap_or("?").to_string()));
        w.write_record(&cells)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_split, DatasetConfig};
    use crate::model::ModelConfig;

    fn setup(layers: usize) -> (ModelParams, Vocabulary, Vec<SampleRecord>) {
        let vocab = Vocabulary::build(2, 10, 5).unwrap();
        let data = DatasetConfig { dim: 2, seq_len: 5, seed: 11, ..DatasetConfig::default() };
        let records = generate_split(&data, &vocab, 1, 24, None).unwrap();
        let config = ModelConfig { d_ff: 20, ..ModelConfig::new(layers, 16, 2, vocab.len(), 96) };
        (ModelParams::init(&config, 5).unwrap(), vocab, records)
    }

    #[test]
    fn ranking_orders_and_breaks_ties_low() {
        let row = [0.1, 0.5, 0.5, -1.0, 0.3];
        assert_eq!(sorted_ids(&row), vec![1, 2, 4, 0, 3]);
        assert_eq!(rank_of(&row, 1), 1);
        assert_eq!(rank_of(&row, 2), 2);
        assert_eq!(rank_of(&row, 3), 5);
        assert_eq!(kth_token(&row, 3), 4);
        for (i, &id) in sorted_ids(&row).iter().enumerate() {
            assert_eq!(rank_of(&row, id), i + 1);
        }
    }

    #[test]
    fn final_lens_layer_reproduces_forward() {
        let (params, _, records) = setup(2);
        let ids = &records[0].token_ids;
        let snap = logit_lens(&params, ids, 3, true).unwrap();
        let out = params.forward(ids, false).unwrap();
        assert_eq!(snap.logits.len(), 3);
        assert_eq!(snap.logits[2], out.logits);
        let v = params.config.vocab_size;
        for (t, top) in snap.topk[2].iter().enumerate() {
            assert_eq!(top[0].0 as usize, argmax(out.logits.row(t)));
            assert!(top.windows(2).all(|w| w[0].1 >= w[1].1));
            assert_eq!(top.len(), 3);
        }
        for z in &snap.logits {
            let probs = softmax_rows(&z.data, v);
            for row in probs.chunks(v) {
                assert!((row.iter().map(|&p| p as f64).sum::<f64>() - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn full_topk_is_a_permutation() {
        let (params, _, records) = setup(1);
        let v = params.config.vocab_size;
        let snap = logit_lens(&params, &records[0].token_ids[..6], v, true).unwrap();
        let mut ids: Vec<TokenId> = snap.topk[1][5].iter().map(|p| p.0).collect();
        ids.sort();
        assert_eq!(ids, (0..v as TokenId).collect::<Vec<_>>());
        assert!(matches!(logit_lens(&params, &records[0].token_ids, v + 1, true), Err(LensError::TopK { .. })));
        assert!(matches!(logit_lens(&params, &records[0].token_ids, 0, true), Err(LensError::TopK { .. })));
    }

    #[test]
    fn batched_ranks_match_full_sort() {
        let (params, _, records) = setup(2);
        let v = params.config.vocab_size;
        let record = records.iter().find(|r| r.body_kind == BodyKind::Filler && !r.body().is_empty()).unwrap();
        let ranks = rank_of_reference(&params, record, 2, true).unwrap();
        let snap = logit_lens(&params, &record.token_ids, v, true).unwrap();
        for (i, &id) in record.reference_body().iter().enumerate() {
            let pos = record.cot_start() + i;
            let expected = snap.topk[2][pos].iter().position(|p| p.0 == id).unwrap() + 1;
            assert_eq!(ranks[i], expected);
            assert!((1..=v).contains(&ranks[i]));
        }
        assert!(matches!(rank_of_reference(&params, record, 3, true), Err(LensError::Layer { .. })));
    }

    #[test]
    fn grid_shape_and_top_row() {
        let (params, _, records) = setup(2);
        let record = records.iter().find(|r| r.body_kind == BodyKind::Filler && !r.body().is_empty()).unwrap();
        let grid = layer_grid(&params, record, 1, true).unwrap();
        assert_eq!(grid.len(), 3);
        assert!(grid.iter().all(|row| row.len() == record.body().len()));
        let out = params.forward(&record.token_ids, false).unwrap();
        for (i, &tok) in grid[2].iter().enumerate() {
            assert_eq!(tok as usize, argmax(out.logits.row(record.cot_start() + i)));
        }
        assert!(matches!(layer_grid(&params, record, 0, true), Err(LensError::RankIndex { .. })));
    }

    #[test]
    fn filler_that_never_wins_gives_zero_fraction() {
        let (mut params, _, records) = setup(2);
        // every lens logit is zero, so ties resolve to PAD, never FILLER
        params.w_out.data.iter_mut().for_each(|w| *w = 0.0);
        for norm in [true, false] {
            let fractions = filler_fraction_by_layer(&params, &records, norm).unwrap();
            assert_eq!(fractions.len(), 3);
            assert!(fractions.iter().all(|f| f.fraction == 0.0 && f.n > 0));
        }
        assert!(matches!(filler_fraction_by_layer(&params, &records[..0], true), Err(LensError::NoFiller)));
    }

    #[test]
    fn median_handles_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&mut []), None);
    }

    #[test]
    fn csv_outputs_have_expected_shape() {
        let (params, vocab, records) = setup(1);
        let dir = tempfile::tempdir().unwrap();
        let fractions = filler_fraction_by_layer(&params, &records, true).unwrap();
        write_filler_fraction(&dir.path().join("f.csv"), &fractions).unwrap();
        let text = std::fs::read_to_string(dir.path().join("f.csv")).unwrap();
        assert_eq!(text.lines().next(), Some("layer,fraction,n"));
        assert_eq!(text.lines().count(), 3);

        let report = rank_report(&params, &records, true).unwrap();
        write_rank_hist(&dir.path().join("r.csv"), &report).unwrap();
        let total: usize = report.histogram[1].values().sum();
        let expected: usize = records.iter().filter(|r| r.body_kind == BodyKind::Filler).map(|r| r.body().len()).sum();
        assert_eq!(total, expected);

        let record = records.iter().find(|r| r.body_kind == BodyKind::Filler).unwrap();
        let grid = layer_grid(&params, record, 2, true).unwrap();
        write_grid(&dir.path().join("g.csv"), &grid, &vocab).unwrap();
        let text = std::fs::read_to_string(dir.path().join("g.csv")).unwrap();
        assert_eq!(text.lines().count(), 3);
    }
}
