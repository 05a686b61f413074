//! LLaMA-style decoder-only transformer: untied token embedding and output
//! projection, pre-norm blocks with RMSNorm, rotary causal self-attention and
//! a SwiGLU MLP. Everything is f32 on the CPU.
//!
//! Sequences of different lengths are packed row-wise into one `T × d_model`
//! activation matrix so every linear layer is a single GEMM; attention runs
//! per sequence and head on views into that matrix.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, View, ViewMut};
use crate::rng::SplitMix64;
use crate::vocab::TokenId;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    TooLong { len: usize, max: usize },
    #[error("empty sequence")]
    Empty,
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenRange { id: TokenId, vocab: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub rope_base: f32,
    pub norm_eps: f32,
}

/// LLaMA MLP width: 8/3 of the model width, rounded to an even number.
pub fn llama_ff(d_model: usize) -> usize {
    ((8.0 * d_model as f64 / 3.0) / 2.0).round() as usize * 2
}

impl ModelConfig {
    pub fn new(n_layers: usize, d_model: usize, n_heads: usize, vocab_size: usize, max_seq_len: usize) -> Self {
        Self {
            n_layers,
            d_model,
            n_heads,
            d_ff: llama_ff(d_model),
            vocab_size,
            max_seq_len,
            rope_base: 10_000.0,
            norm_eps: 1e-5,
        }
    }

    /// 2 layers, width 128, 4 heads.
    pub fn desk(vocab_size: usize, max_seq_len: usize) -> Self {
        Self::new(2, 128, 4, vocab_size, max_seq_len)
    }

    /// 4 layers, width 384, 6 heads.
    pub fn paper(vocab_size: usize, max_seq_len: usize) -> Self {
        Self::new(4, 384, 6, vocab_size, max_seq_len)
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.d_model == 0 || self.n_heads == 0 || self.vocab_size == 0 || self.max_seq_len == 0 || self.d_ff == 0 {
            return bad("all sizes must be positive");
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model must be divisible by n_heads");
        }
        if !self.d_head().is_multiple_of(2) {
            return bad("head width must be even for rotary embedding");
        }
        if !(self.rope_base > 1.0 && self.norm_eps > 0.0) {
            return bad("rope_base must exceed 1 and norm_eps be positive");
        }
        Ok(())
    }
}

/// Closed-form parameter count.
pub fn count_params(config: &ModelConfig) -> usize {
    let (d, v, ff) = (config.d_model, config.vocab_size, config.d_ff);
    let per_layer = 4 * d * d + 3 * d * ff + 2 * d;
    2 * v * d + d + config.n_layers * per_layer
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        Self { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    fn normal(shape: &[usize], std: f64, rng: &mut SplitMix64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..n).map(|_| (rng.normal() * std) as f32).collect() }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[f32] {
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub attn_norm: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub mlp_norm: Tensor,
    pub w_gate: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
}

const LAYER_TENSORS: [&str; 9] = ["attn_norm", "wq", "wk", "wv", "wo", "mlp_norm", "w_gate", "w_up", "w_down"];

impl LayerParams {
    fn tensors(&self) -> [&Tensor; 9] {
        [&self.attn_norm, &self.wq, &self.wk, &self.wv, &self.wo, &self.mlp_norm, &self.w_gate, &self.w_up, &self.w_down]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 9] {
        [
            &mut self.attn_norm,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.mlp_norm,
            &mut self.w_gate,
            &mut self.w_up,
            &mut self.w_down,
        ]
    }
}

/// All learnable tensors. Weight matrices are stored `in × out` so that a
/// linear layer is `y = x @ W`; `w_out` is `d_model × vocab_size`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tok_emb: Tensor,
    pub layers: Vec<LayerParams>,
    pub final_norm: Tensor,
    pub w_out: Tensor,
}

/// Gradients share the parameter layout.
pub type Gradients = ModelParams;

/// Which family a tensor belongs to, for per-class gradient checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TensorClass {
    Embedding,
    Attention,
    Mlp,
    Norm,
    Output,
}

pub fn tensor_class(name: &str) -> TensorClass {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    match leaf {
        "tok_emb" => TensorClass::Embedding,
        "w_out" => TensorClass::Output,
        "wq" | "wk" | "wv" | "wo" => TensorClass::Attention,
        "w_gate" | "w_up" | "w_down" => TensorClass::Mlp,
        _ => TensorClass::Norm,
    }
}

impl ModelParams {
    /// Weights ~ N(0, 0.02²), norm gains 1. Each tensor draws from its own stream.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let (d, v, ff) = (config.d_model, config.vocab_size, config.d_ff);
        let std = 0.02;
        let mut stream = 0u64;
        let mut normal = |shape: &[usize]| {
            stream += 1;
            Tensor::normal(shape, std, &mut SplitMix64::stream(seed, &[stream]))
        };
        let tok_emb = normal(&[v, d]);
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                attn_norm: Tensor::filled(&[d], 1.0),
                wq: normal(&[d, d]),
                wk: normal(&[d, d]),
                wv: normal(&[d, d]),
                wo: normal(&[d, d]),
                mlp_norm: Tensor::filled(&[d], 1.0),
                w_gate: normal(&[d, ff]),
                w_up: normal(&[d, ff]),
                w_down: normal(&[ff, d]),
            })
            .collect();
        let final_norm = Tensor::filled(&[d], 1.0);
        let w_out = normal(&[d, v]);
        Ok(Self { config: config.clone(), tok_emb, layers, final_norm, w_out })
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for t in out.tensors_mut() {
            t.data.iter_mut().for_each(|x| *x = 0.0);
        }
        out
    }

    /// Tensor names in canonical order.
    pub fn names(&self) -> Vec<String> {
        let mut names = vec!["tok_emb".to_string()];
        for l in 0..self.layers.len() {
            names.extend(LAYER_TENSORS.iter().map(|t| format!("layers.{l}.{t}")));
        }
        names.push("final_norm".into());
        names.push("w_out".into());
        names
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.tok_emb];
        for layer in &self.layers {
            out.extend(layer.tensors());
        }
        out.push(&self.final_norm);
        out.push(&self.w_out);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.tok_emb];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.w_out);
        out
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        self.names().into_iter().zip(self.tensors()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|x| x.is_finite()))
    }

    /// Global L2 norm over every tensor.
    pub fn global_norm(&self) -> f64 {
        self.tensors().iter().flat_map(|t| t.data.iter()).map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, factor: f32) {
        for t in self.tensors_mut() {
            t.data.iter_mut().for_each(|x| *x *= factor);
        }
    }
}

/// Sequences packed row-wise.
#[derive(Debug, Clone)]
pub struct Packed {
    pub tokens: Vec<TokenId>,
    pub starts: Vec<usize>,
    pub lens: Vec<usize>,
    pub positions: Vec<usize>,
}

impl Packed {
    pub fn new<S: AsRef<[TokenId]>>(seqs: &[S]) -> Self {
        let mut tokens = Vec::new();
        let mut starts = Vec::with_capacity(seqs.len());
        let mut lens = Vec::with_capacity(seqs.len());
        let mut positions = Vec::new();
        for s in seqs {
            let s = s.as_ref();
            starts.push(tokens.len());
            lens.push(s.len());
            tokens.extend_from_slice(s);
            positions.extend(0..s.len());
        }
        Self { tokens, starts, lens, positions }
    }

    pub fn total(&self) -> usize {
        self.tokens.len()
    }

    fn prob_offsets(&self, n_heads: usize) -> (Vec<usize>, usize) {
        let mut offsets = Vec::with_capacity(self.lens.len());
        let mut acc = 0;
        for &n in &self.lens {
            offsets.push(acc);
            acc += n * n * n_heads;
        }
        (offsets, acc)
    }
}

/// Rotary angle tables, `cos`/`sin` of `pos * base^(-2i/d_head)`.
#[derive(Debug, Clone)]
pub struct Rope {
    half: usize,
    cos: Vec<f32>,
    sin: Vec<f32>,
}

impl Rope {
    pub fn new(d_head: usize, max_len: usize, base: f32) -> Self {
        let half = d_head / 2;
        let mut cos = Vec::with_capacity(max_len * half);
        let mut sin = Vec::with_capacity(max_len * half);
        for pos in 0..max_len {
            for i in 0..half {
                let freq = (base as f64).powf(-2.0 * i as f64 / d_head as f64);
                let angle = pos as f64 * freq;
                cos.push(angle.cos() as f32);
                sin.push(angle.sin() as f32);
            }
        }
        Self { half, cos, sin }
    }

    /// Rotate consecutive pairs of one head vector; `inverse` applies the transpose.
    fn rotate(&self, x: &mut [f32], pos: usize, inverse: bool) {
        let c = &self.cos[pos * self.half..(pos + 1) * self.half];
        let s = &self.sin[pos * self.half..(pos + 1) * self.half];
        for i in 0..self.half {
            let (a, b) = (x[2 * i], x[2 * i + 1]);
            let sn = if inverse { -s[i] } else { s[i] };
            x[2 * i] = a * c[i] - b * sn;
            x[2 * i + 1] = a * sn + b * c[i];
        }
    }

    fn apply(&self, x: &mut [f32], positions: &[usize], d_model: usize, d_head: usize, inverse: bool) {
        for (row, &pos) in x.chunks_mut(d_model).zip(positions) {
            for head in row.chunks_mut(d_head) {
                self.rotate(head, pos, inverse);
            }
        }
    }
}

fn rmsnorm_forward(x: &[f32], gain: &[f32], eps: f32, out: &mut [f32], inv_rms: &mut [f32]) {
    let d = gain.len();
    for ((row, o), r) in x.chunks(d).zip(out.chunks_mut(d)).zip(inv_rms.iter_mut()) {
        let ms = row.iter().map(|v| v * v).sum::<f32>() / d as f32;
        *r = 1.0 / (ms + eps).sqrt();
        for ((o, &v), &g) in o.iter_mut().zip(row).zip(gain) {
            *o = v * *r * g;
        }
    }
}

/// Accumulates into `dx` and `dgain`.
fn rmsnorm_backward(x: &[f32], gain: &[f32], inv_rms: &[f32], dy: &[f32], dx: &mut [f32], dgain: &mut [f32]) {
    let d = gain.len();
    for (((row, dyr), dxr), &r) in x.chunks(d).zip(dy.chunks(d)).zip(dx.chunks_mut(d)).zip(inv_rms) {
        let mut dot = 0.0f32;
        for j in 0..d {
            let xhat = row[j] * r;
            dgain[j] += dyr[j] * xhat;
            dot += dyr[j] * gain[j] * xhat;
        }
        let mean = dot / d as f32;
        for j in 0..d {
            let xhat = row[j] * r;
            dxr[j] += r * (dyr[j] * gain[j] - xhat * mean);
        }
    }
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

fn silu(x: f32) -> f32 {
    x * sigmoid(x)
}

/// Row softmax over the causal prefix `[0, i]`; the rest of the row is zeroed.
fn causal_softmax(block: &mut [f32], n: usize) {
    for (i, row) in block.chunks_mut(n).enumerate() {
        let max = row[..=i].iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0;
        for v in &mut row[..=i] {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        row[..=i].iter_mut().for_each(|v| *v *= inv);
        row[i + 1..].iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Saved activations of one block.
#[derive(Debug, Clone)]
pub struct LayerCache {
    x_in: Vec<f32>,
    inv_rms1: Vec<f32>,
    xn1: Vec<f32>,
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    probs: Vec<f32>,
    attn: Vec<f32>,
    x_mid: Vec<f32>,
    inv_rms2: Vec<f32>,
    xn2: Vec<f32>,
    gate: Vec<f32>,
    up: Vec<f32>,
    act: Vec<f32>,
}

/// Everything backward needs, plus the hidden states for the lens.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub batch: Packed,
    layers: Vec<LayerCache>,
    x_final: Vec<f32>,
    inv_rms_final: Vec<f32>,
    xn_final: Vec<f32>,
    /// Rows of the packed batch that received logits.
    pub logit_rows: Vec<usize>,
}

impl ForwardCache {
    /// Residual stream after block `l` (`0` = embedding output), packed `T × d`.
    pub fn hidden(&self, l: usize) -> &[f32] {
        if l < self.layers.len() {
            &self.layers[l].x_in
        } else {
            &self.x_final
        }
    }
}

/// Per-layer residual streams `h^0..h^L` of one sequence, each `len × d_model`.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates {
    pub layers: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `len × vocab_size`.
    pub logits: Tensor,
    pub hidden: Option<HiddenStates>,
}

impl ModelParams {
    fn check_tokens(&self, seq: &[TokenId]) -> Result<(), ModelError> {
        if seq.is_empty() {
            return Err(ModelError::Empty);
        }
        if seq.len() > self.config.max_seq_len {
            return Err(ModelError::TooLong { len: seq.len(), max: self.config.max_seq_len });
        }
        if let Some(&id) = seq.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(ModelError::TokenRange { id, vocab: self.config.vocab_size });
        }
        Ok(())
    }

    pub fn rope(&self) -> Rope {
        Rope::new(self.config.d_head(), self.config.max_seq_len, self.config.rope_base)
    }

    /// Logits for a single sequence, optionally with every layer's hidden state.
    pub fn forward(&self, tokens: &[TokenId], capture_hidden: bool) -> Result<ForwardOutput, ModelError> {
        let batch = Packed::new(&[tokens]);
        let rows: Vec<usize> = (0..tokens.len()).collect();
        let (logits, cache) = self.forward_packed(batch, &rows, &self.rope())?;
        let hidden = capture_hidden.then(|| {
            let d = self.config.d_model;
            HiddenStates {
                layers: (0..=self.config.n_layers)
                    .map(|l| Tensor { shape: vec![tokens.len(), d], data: cache.hidden(l).to_vec() })
                    .collect(),
            }
        });
        Ok(ForwardOutput { logits: Tensor { shape: vec![tokens.len(), self.config.vocab_size], data: logits }, hidden })
    }

    /// Batched forward pass. Logits are produced only for `logit_rows`
    /// (indices into the packed batch), in that order.
    pub fn forward_packed(&self, batch: Packed, logit_rows: &[usize], rope: &Rope) -> Result<(Vec<f32>, ForwardCache), ModelError> {
        for (&start, &len) in batch.starts.iter().zip(&batch.lens) {
            self.check_tokens(&batch.tokens[start..start + len])?;
        }
        let cfg = &self.config;
        let (d, t) = (cfg.d_model, batch.total());
        let mut x = vec![0.0f32; t * d];
        for (row, &tok) in x.chunks_mut(d).zip(&batch.tokens) {
            row.copy_from_slice(self.tok_emb.row(tok as usize));
        }
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for lp in &self.layers {
            let (next, cache) = self.block_forward(lp, x, &batch, rope);
            layers.push(cache);
            x = next;
        }
        let mut xn_final = vec![0.0; t * d];
        let mut inv_rms_final = vec![0.0; t];
        rmsnorm_forward(&x, &self.final_norm.data, cfg.norm_eps, &mut xn_final, &mut inv_rms_final);
        let logits = self.project_rows(&xn_final, logit_rows);
        let cache = ForwardCache { batch, layers, x_final: x, inv_rms_final, xn_final, logit_rows: logit_rows.to_vec() };
        Ok((logits, cache))
    }

    /// `rows` of an already-normalized `T × d` matrix times `w_out`.
    fn project_rows(&self, xn: &[f32], rows: &[usize]) -> Vec<f32> {
        let (d, v) = (self.config.d_model, self.config.vocab_size);
        let mut gathered = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            gathered.extend_from_slice(&xn[r * d..(r + 1) * d]);
        }
        let mut logits = vec![0.0; rows.len() * v];
        linalg::matmul(&gathered, &self.w_out.data, rows.len(), d, v, &mut logits);
        logits
    }

    /// Logit-lens projection of arbitrary residual rows (`n × d`): optional
    /// final RMSNorm, then `w_out`.
    pub fn lens_project(&self, hidden: &[f32], apply_final_norm: bool) -> Vec<f32> {
        let d = self.config.d_model;
        let n = hidden.len() / d;
        let rows: Vec<usize> = (0..n).collect();
        if apply_final_norm {
            let mut xn = vec![0.0; hidden.len()];
            let mut inv = vec![0.0; n];
            rmsnorm_forward(hidden, &self.final_norm.data, self.config.norm_eps, &mut xn, &mut inv);
            self.project_rows(&xn, &rows)
        } else {
            self.project_rows(hidden, &rows)
        }
    }

    fn block_forward(&self, lp: &LayerParams, x_in: Vec<f32>, batch: &Packed, rope: &Rope) -> (Vec<f32>, LayerCache) {
        let cfg = &self.config;
        let (d, ff, t, h, dh) = (cfg.d_model, cfg.d_ff, batch.total(), cfg.n_heads, cfg.d_head());

        let mut xn1 = vec![0.0; t * d];
        let mut inv_rms1 = vec![0.0; t];
        rmsnorm_forward(&x_in, &lp.attn_norm.data, cfg.norm_eps, &mut xn1, &mut inv_rms1);
        let mut q = vec![0.0; t * d];
        let mut k = vec![0.0; t * d];
        let mut v = vec![0.0; t * d];
        linalg::matmul(&xn1, &lp.wq.data, t, d, d, &mut q);
        linalg::matmul(&xn1, &lp.wk.data, t, d, d, &mut k);
        linalg::matmul(&xn1, &lp.wv.data, t, d, d, &mut v);
        rope.apply(&mut q, &batch.positions, d, dh, false);
        rope.apply(&mut k, &batch.positions, d, dh, false);

        let (offsets, total) = batch.prob_offsets(h);
        let mut probs = vec![0.0; total];
        let mut attn = vec![0.0; t * d];
        let scale = 1.0 / (dh as f32).sqrt();
        for (s, (&start, &n)) in batch.starts.iter().zip(&batch.lens).enumerate() {
            for head in 0..h {
                let off = offsets[s] + head * n * n;
                let block = &mut probs[off..off + n * n];
                let qv = View::block(&q, d, start, n, head * dh, dh);
                let kv = View::block(&k, d, start, n, head * dh, dh);
                linalg::gemm(scale, qv, kv.t(), 0.0, ViewMut::dense(block, n, n));
                causal_softmax(block, n);
                let vv = View::block(&v, d, start, n, head * dh, dh);
                linalg::gemm(1.0, View::dense(block, n, n), vv, 0.0, ViewMut::block(&mut attn, d, start, n, head * dh, dh));
            }
        }
        let mut x_mid = vec![0.0; t * d];
        linalg::matmul(&attn, &lp.wo.data, t, d, d, &mut x_mid);
        x_mid.iter_mut().zip(&x_in).for_each(|(o, &r)| *o += r);

        let mut xn2 = vec![0.0; t * d];
        let mut inv_rms2 = vec![0.0; t];
        rmsnorm_forward(&x_mid, &lp.mlp_norm.data, cfg.norm_eps, &mut xn2, &mut inv_rms2);
        let mut gate = vec![0.0; t * ff];
        let mut up = vec![0.0; t * ff];
        linalg::matmul(&xn2, &lp.w_gate.data, t, d, ff, &mut gate);
        linalg::matmul(&xn2, &lp.w_up.data, t, d, ff, &mut up);
        let act: Vec<f32> = gate.iter().zip(&up).map(|(&g, &u)| silu(g) * u).collect();
        let mut x_out = vec![0.0; t * d];
        linalg::matmul(&act, &lp.w_down.data, t, ff, d, &mut x_out);
        x_out.iter_mut().zip(&x_mid).for_each(|(o, &r)| *o += r);

        let cache = LayerCache { x_in, inv_rms1, xn1, q, k, v, probs, attn, x_mid, inv_rms2, xn2, gate, up, act };
        (x_out, cache)
    }

    /// Backpropagates `dlogits` (rows aligned with `cache.logit_rows`).
    pub fn backward(&self, cache: &ForwardCache, dlogits: &[f32], rope: &Rope) -> Gradients {
        let cfg = &self.config;
        let (d, v, t) = (cfg.d_model, cfg.vocab_size, cache.batch.total());
        let m = cache.logit_rows.len();
        let mut grads = self.zeros_like();

        let mut gathered = Vec::with_capacity(m * d);
        for &r in &cache.logit_rows {
            gathered.extend_from_slice(&cache.xn_final[r * d..(r + 1) * d]);
        }
        linalg::accumulate_xt_dy(&gathered, dlogits, m, d, v, &mut grads.w_out.data);
        let mut dxn_rows = vec![0.0; m * d];
        linalg::dy_wt(dlogits, &self.w_out.data, m, d, v, &mut dxn_rows, false);
        let mut dxn = vec![0.0; t * d];
        for (i, &r) in cache.logit_rows.iter().enumerate() {
            for (acc, &g) in dxn[r * d..(r + 1) * d].iter_mut().zip(&dxn_rows[i * d..(i + 1) * d]) {
                *acc += g;
            }
        }
        let mut dx = vec![0.0; t * d];
        rmsnorm_backward(&cache.x_final, &self.final_norm.data, &cache.inv_rms_final, &dxn, &mut dx, &mut grads.final_norm.data);

        for (l, lp) in self.layers.iter().enumerate().rev() {
            dx = self.block_backward(lp, &cache.layers[l], &cache.batch, dx, &mut grads.layers[l], rope);
        }
        for (row, &tok) in dx.chunks(d).zip(&cache.batch.tokens) {
            let start = tok as usize * d;
            for (acc, &g) in grads.tok_emb.data[start..start + d].iter_mut().zip(row) {
                *acc += g;
            }
        }
        grads
    }

    fn block_backward(&self, lp: &LayerParams, c: &LayerCache, batch: &Packed, dx_out: Vec<f32>, g: &mut LayerParams, rope: &Rope) -> Vec<f32> {
        let cfg = &self.config;
        let (d, ff, t, h, dh) = (cfg.d_model, cfg.d_ff, batch.total(), cfg.n_heads, cfg.d_head());

        // MLP branch
        linalg::accumulate_xt_dy(&c.act, &dx_out, t, ff, d, &mut g.w_down.data);
        let mut d_act = vec![0.0; t * ff];
        linalg::dy_wt(&dx_out, &lp.w_down.data, t, ff, d, &mut d_act, false);
        let mut d_gate = vec![0.0; t * ff];
        let mut d_up = vec![0.0; t * ff];
        for i in 0..t * ff {
            let (gv, uv) = (c.gate[i], c.up[i]);
            let sg = sigmoid(gv);
            d_up[i] = d_act[i] * gv * sg;
            d_gate[i] = d_act[i] * uv * sg * (1.0 + gv * (1.0 - sg));
        }
        linalg::accumulate_xt_dy(&c.xn2, &d_gate, t, d, ff, &mut g.w_gate.data);
        linalg::accumulate_xt_dy(&c.xn2, &d_up, t, d, ff, &mut g.w_up.data);
        let mut dxn2 = vec![0.0; t * d];
        linalg::dy_wt(&d_gate, &lp.w_gate.data, t, d, ff, &mut dxn2, false);
        linalg::dy_wt(&d_up, &lp.w_up.data, t, d, ff, &mut dxn2, true);
        let mut dx_mid = dx_out;
        rmsnorm_backward(&c.x_mid, &lp.mlp_norm.data, &c.inv_rms2, &dxn2, &mut dx_mid, &mut g.mlp_norm.data);

        // attention branch
        linalg::accumulate_xt_dy(&c.attn, &dx_mid, t, d, d, &mut g.wo.data);
        let mut d_attn = vec![0.0; t * d];
        linalg::dy_wt(&dx_mid, &lp.wo.data, t, d, d, &mut d_attn, false);

        let (offsets, _) = batch.prob_offsets(h);
        let scale = 1.0 / (dh as f32).sqrt();
        let mut dq = vec![0.0; t * d];
        let mut dk = vec![0.0; t * d];
        let mut dv = vec![0.0; t * d];
        let max_n = batch.lens.iter().copied().max().unwrap_or(0);
        let mut dp = vec![0.0; max_n * max_n];
        for (s, (&start, &n)) in batch.starts.iter().zip(&batch.lens).enumerate() {
            for head in 0..h {
                let off = offsets[s] + head * n * n;
                let p = &c.probs[off..off + n * n];
                let d_o = View::block(&d_attn, d, start, n, head * dh, dh);
                let vv = View::block(&c.v, d, start, n, head * dh, dh);
                let dp = &mut dp[..n * n];
                linalg::gemm(1.0, d_o, vv.t(), 0.0, ViewMut::dense(dp, n, n));
                linalg::gemm(1.0, View::dense(p, n, n).t(), d_o, 0.0, ViewMut::block(&mut dv, d, start, n, head * dh, dh));
                // softmax backward in place: dS = P * (dP - <dP, P>_row)
                for i in 0..n {
                    let row_p = &p[i * n..i * n + i + 1];
                    let row_dp = &mut dp[i * n..(i + 1) * n];
                    let dot: f32 = row_p.iter().zip(&row_dp[..=i]).map(|(a, b)| a * b).sum();
                    for j in 0..=i {
                        row_dp[j] = row_p[j] * (row_dp[j] - dot);
                    }
                    row_dp[i + 1..].iter_mut().for_each(|x| *x = 0.0);
                }
                let ds = View::dense(dp, n, n);
                let qv = View::block(&c.q, d, start, n, head * dh, dh);
                let kv = View::block(&c.k, d, start, n, head * dh, dh);
                linalg::gemm(scale, ds, kv, 0.0, ViewMut::block(&mut dq, d, start, n, head * dh, dh));
                linalg::gemm(scale, ds.t(), qv, 0.0, ViewMut::block(&mut dk, d, start, n, head * dh, dh));
            }
        }
        rope.apply(&mut dq, &batch.positions, d, dh, true);
        rope.apply(&mut dk, &batch.positions, d, dh, true);

        linalg::accumulate_xt_dy(&c.xn1, &dq, t, d, d, &mut g.wq.data);
        linalg::accumulate_xt_dy(&c.xn1, &dk, t, d, d, &mut g.wk.data);
        linalg::accumulate_xt_dy(&c.xn1, &dv, t, d, d, &mut g.wv.data);
        let mut dxn1 = vec![0.0; t * d];
        linalg::dy_wt(&dq, &lp.wq.data, t, d, d, &mut dxn1, false);
        linalg::dy_wt(&dk, &lp.wk.data, t, d, d, &mut dxn1, true);
        linalg::dy_wt(&dv, &lp.wv.data, t, d, d, &mut dxn1, true);
        let mut dx_in = dx_mid;
        rmsnorm_backward(&c.x_in, &lp.attn_norm.data, &c.inv_rms1, &dxn1, &mut dx_in, &mut g.attn_norm.data);
        dx_in
    }
}

/// Incremental decoding state: cached post-rotary keys and values per layer.
#[derive(Debug, Clone)]
pub struct KvCache {
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    len: usize,
    rope: Rope,
}

impl KvCache {
    pub fn new(params: &ModelParams) -> Self {
        let n = params.config.n_layers;
        Self { keys: vec![Vec::new(); n], values: vec![Vec::new(); n], len: 0, rope: params.rope() }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

impl ModelParams {
    /// Feeds one token at position `cache.len()` and returns next-token logits.
    pub fn forward_step(&self, cache: &mut KvCache, token: TokenId) -> Result<Vec<f32>, ModelError> {
        let cfg = &self.config;
        if cache.len >= cfg.max_seq_len {
            return Err(ModelError::TooLong { len: cache.len + 1, max: cfg.max_seq_len });
        }
        if token as usize >= cfg.vocab_size {
            return Err(ModelError::TokenRange { id: token, vocab: cfg.vocab_size });
        }
        let (d, ff, h, dh) = (cfg.d_model, cfg.d_ff, cfg.n_heads, cfg.d_head());
        let pos = cache.len;
        let n = pos + 1;
        let scale = 1.0 / (dh as f32).sqrt();
        let mut x = self.tok_emb.row(token as usize).to_vec();
        let mut xn = vec![0.0; d];
        let mut inv = [0.0f32];
        for (l, lp) in self.layers.iter().enumerate() {
            rmsnorm_forward(&x, &lp.attn_norm.data, cfg.norm_eps, &mut xn, &mut inv);
            let mut q = vec![0.0; d];
            let mut k = vec![0.0; d];
            let mut v = vec![0.0; d];
            linalg::matmul(&xn, &lp.wq.data, 1, d, d, &mut q);
            linalg::matmul(&xn, &lp.wk.data, 1, d, d, &mut k);
            linalg::matmul(&xn, &lp.wv.data, 1, d, d, &mut v);
            cache.rope.apply(&mut q, &[pos], d, dh, false);
            cache.rope.apply(&mut k, &[pos], d, dh, false);
            cache.keys[l].extend_from_slice(&k);
            cache.values[l].extend_from_slice(&v);
            let keys = &cache.keys[l];
            let values = &cache.values[l];
            let mut attn = vec![0.0; d];
            let mut scores = vec![0.0; n];
            for head in 0..h {
                let qh = &q[head * dh..(head + 1) * dh];
                for (j, s) in scores.iter_mut().enumerate() {
                    let kj = &keys[j * d + head * dh..j * d + (head + 1) * dh];
                    *s = qh.iter().zip(kj).map(|(a, b)| a * b).sum::<f32>() * scale;
                }
                let max = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let mut sum = 0.0;
                scores.iter_mut().for_each(|s| {
                    *s = (*s - max).exp();
                    sum += *s;
                });
                let out = &mut attn[head * dh..(head + 1) * dh];
                for (j, &p) in scores.iter().enumerate() {
                    let vj = &values[j * d + head * dh..j * d + (head + 1) * dh];
                    out.iter_mut().zip(vj).for_each(|(o, &vv)| *o += p / sum * vv);
                }
            }
            let mut o = vec![0.0; d];
            linalg::matmul(&attn, &lp.wo.data, 1, d, d, &mut o);
            x.iter_mut().zip(&o).for_each(|(a, b)| *a += b);

            rmsnorm_forward(&x, &lp.mlp_norm.data, cfg.norm_eps, &mut xn, &mut inv);
            let mut gate = vec![0.0; ff];
            let mut up = vec![0.0; ff];
            linalg::matmul(&xn, &lp.w_gate.data, 1, d, ff, &mut gate);
            linalg::matmul(&xn, &lp.w_up.data, 1, d, ff, &mut up);
            let act: Vec<f32> = gate.iter().zip(&up).map(|(&g, &u)| silu(g) * u).collect();
            let mut m = vec![0.0; d];
            linalg::matmul(&act, &lp.w_down.data, 1, ff, d, &mut m);
            x.iter_mut().zip(&m).for_each(|(a, b)| *a += b);
        }
        cache.len += 1;
        Ok(self.lens_project(&x, true))
    }
}

/// Row-wise softmax of a `rows × cols` logit buffer, in f64 for the sums.
pub fn softmax_rows(logits: &[f32], cols: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(cols) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let sum: f64 = row.iter().map(|&x| ((x - max) as f64).exp()).sum();
        out.extend(row.iter().map(|&x| (((x - max) as f64).exp() / sum) as f32));
    }
    out
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelParams {
        let config = ModelConfig { d_ff: 12, ..ModelConfig::new(2, 8, 2, 20, 32) };
        ModelParams::init(&config, 3).unwrap()
    }

    fn random_tokens(rng: &mut SplitMix64, n: usize, vocab: usize) -> Vec<TokenId> {
        (0..n).map(|_| rng.below(vocab as u64) as TokenId).collect()
    }

    #[test]
    fn ff_width_follows_llama_rule() {
        assert_eq!(llama_ff(128), 342);
        assert_eq!(llama_ff(384), 1024);
    }

    #[test]
    fn param_counts() {
        let desk = ModelConfig::desk(1025, 320);
        assert_eq!(count_params(&desk), 656_768);
        assert_eq!(ModelParams::init(&desk, 0).unwrap().num_params(), count_params(&desk));
        let paper = ModelConfig::paper(1025, 320);
        assert_eq!(count_params(&paper), 7_868_544);
        assert!(count_params(&paper) < 34_000_000);
        let empty = ModelConfig { n_layers: 0, ..desk.clone() };
        assert_eq!(count_params(&empty), 2 * 1025 * 128 + 128);
        let counts: Vec<usize> = (0..5).map(|n| count_params(&ModelConfig { n_layers: n, ..desk.clone() })).collect();
        assert!(counts.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn init_is_seeded_and_gains_are_one() {
        let config = ModelConfig::new(1, 16, 4, 30, 16);
        let a = ModelParams::init(&config, 9).unwrap();
        assert_eq!(a, ModelParams::init(&config, 9).unwrap());
        assert_ne!(a, ModelParams::init(&config, 10).unwrap());
        assert!(a.final_norm.data.iter().all(|&g| g == 1.0));
        assert!(a.layers[0].attn_norm.data.iter().all(|&g| g == 1.0));
        let std = (a.tok_emb.data.iter().map(|x| x * x).sum::<f32>() / a.tok_emb.len() as f32).sqrt();
        assert!((std - 0.02).abs() < 0.002, "{std}");
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = tiny();
        assert_eq!(p.forward(&[], false).unwrap_err(), ModelError::Empty);
        assert_eq!(p.forward(&[25], false).unwrap_err(), ModelError::TokenRange { id: 25, vocab: 20 });
        assert!(matches!(p.forward(&[1; 33], false), Err(ModelError::TooLong { .. })));
        assert!(ModelConfig::new(1, 10, 3, 5, 5).validate().is_err());
    }

    #[test]
    fn shapes_and_normalization() {
        let p = tiny();
        let out = p.forward(&[1, 2, 3, 4, 5], true).unwrap();
        assert_eq!(out.logits.shape, vec![5, 20]);
        let probs = softmax_rows(&out.logits.data, 20);
        for row in probs.chunks(20) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
        let hidden = out.hidden.unwrap();
        assert_eq!(hidden.layers.len(), 3);
        assert!(hidden.layers.iter().all(|h| h.shape == vec![5, 8]));
        // final logits are finalnorm(h^L) @ w_out
        let lensed = p.lens_project(&hidden.layers[2].data, true);
        assert_eq!(lensed, out.logits.data);
    }

    #[test]
    fn capture_does_not_change_logits() {
        let p = tiny();
        let a = p.forward(&[3, 1, 4, 1, 5, 9], false).unwrap();
        let b = p.forward(&[3, 1, 4, 1, 5, 9], true).unwrap();
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn causality_under_perturbation() {
        let p = tiny();
        let mut rng = SplitMix64::new(77);
        let base = random_tokens(&mut rng, 16, 20);
        let reference = p.forward(&base, false).unwrap().logits;
        for t in 0..base.len() {
            let mut changed = base.clone();
            changed[t] = (changed[t] + 1 + rng.below(19) as TokenId) % 20;
            let logits = p.forward(&changed, false).unwrap().logits;
            assert_eq!(&logits.data[..t * 20], &reference.data[..t * 20], "position {t} leaked backwards");
            assert_ne!(&logits.data[t * 20..], &reference.data[t * 20..]);
        }
    }

    #[test]
    fn packing_matches_single_sequences() {
        let p = tiny();
        let a: Vec<TokenId> = vec![1, 2, 3];
        let b: Vec<TokenId> = vec![4, 5, 6, 7, 8];
        let (packed, _) = p.forward_packed(Packed::new(&[a.clone(), b.clone()]), &(0..8).collect::<Vec<_>>(), &p.rope()).unwrap();
        let la = p.forward(&a, false).unwrap().logits.data;
        let lb = p.forward(&b, false).unwrap().logits.data;
        let single: Vec<f32> = la.into_iter().chain(lb).collect();
        for (x, y) in packed.iter().zip(&single) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn finite_outputs_on_random_inputs() {
        let config = ModelConfig::new(2, 16, 4, 50, 40);
        let mut rng = SplitMix64::new(1);
        for trial in 0..1000 {
            let p = if trial % 100 == 0 { ModelParams::init(&config, trial).unwrap() } else { ModelParams::init(&config, 0).unwrap() };
            let len = 1 + rng.below(40) as usize;
            let toks = random_tokens(&mut rng, len, 50);
            assert!(p.forward(&toks, false).unwrap().logits.data.iter().all(|x| x.is_finite()));
        }
    }

    #[test]
    fn rmsnorm_rows_have_unit_rms() {
        let mut rng = SplitMix64::new(4);
        let d = 32;
        let x: Vec<f32> = (0..d * 10).map(|_| (rng.normal() * 3.0) as f32).collect();
        let mut out = vec![0.0; x.len()];
        let mut inv = vec![0.0; 10];
        rmsnorm_forward(&x, &vec![1.0; d], 1e-5, &mut out, &mut inv);
        for row in out.chunks(d) {
            let rms = (row.iter().map(|v| v * v).sum::<f32>() / d as f32).sqrt();
            assert!((rms - 1.0).abs() < 1e-4, "{rms}");
        }
    }

    #[test]
    fn rope_inverse_undoes_rotation() {
        let rope = Rope::new(8, 10, 10_000.0);
        let orig: Vec<f32> = (0..8).map(|i| i as f32 - 3.5).collect();
        let mut x = orig.clone();
        rope.rotate(&mut x, 7, false);
        assert_ne!(x, orig);
        rope.rotate(&mut x, 7, true);
        for (a, b) in x.iter().zip(&orig) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn kv_cache_matches_full_forward() {
        let p = tiny();
        let mut rng = SplitMix64::new(12);
        let toks = random_tokens(&mut rng, 20, 20);
        let full = p.forward(&toks, false).unwrap().logits;
        let mut cache = KvCache::new(&p);
        for (i, &tok) in toks.iter().enumerate() {
            let step = p.forward_step(&mut cache, tok).unwrap();
            let row = full.row(i);
            assert_eq!(argmax(&step), argmax(row));
            for (a, b) in step.iter().zip(row) {
                assert!((a - b).abs() < 1e-4);
            }
        }
        assert_eq!(cache.len(), 20);
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
    }
}
