//! Independent f64 reference implementation of the decoder, written
//! position-by-position with plain loops. Shared by the gradient tests and
//! the acceptance suite.

#![allow(dead_code)]

use cotlens::model::{tensor_class, ModelConfig, ModelParams, TensorClass};
use cotlens::rng::SplitMix64;
use cotlens::train::loss_span;
use cotlens::vocab::{TokenId, BOS, COT_START, EOS};

/// Parameters as f64 vectors in `ModelParams::tensors()` order.
pub struct RefParams {
    pub config: ModelConfig,
    pub tensors: Vec<Vec<f64>>,
}

impl RefParams {
    pub fn from_model(params: &ModelParams) -> Self {
        Self {
            config: params.config.clone(),
            tensors: params.tensors().iter().map(|t| t.data.iter().map(|&x| x as f64).collect()).collect(),
        }
    }

    fn t(&self, i: usize) -> &[f64] {
        &self.tensors[i]
    }
}

fn rmsnorm(x: &[f64], g: &[f64], eps: f64) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let r = 1.0 / (ms + eps).sqrt();
    x.iter().zip(g).map(|(v, g)| v * r * g).collect()
}

/// `x (1×n) @ w (n×m)` with `w` row-major.
fn vecmat(x: &[f64], w: &[f64], m: usize) -> Vec<f64> {
    let mut out = vec![0.0; m];
    for (i, &xi) in x.iter().enumerate() {
        for j in 0..m {
            out[j] += xi * w[i * m + j];
        }
    }
    out
}

fn rope(x: &mut [f64], pos: usize, n_heads: usize, base: f64) {
    let dh = x.len() / n_heads;
    for h in 0..n_heads {
        for i in 0..dh / 2 {
            let theta = pos as f64 * base.powf(-2.0 * i as f64 / dh as f64);
            let (c, s) = (theta.cos(), theta.sin());
            let (a, b) = (x[h * dh + 2 * i], x[h * dh + 2 * i + 1]);
            x[h * dh + 2 * i] = a * c - b * s;
            x[h * dh + 2 * i + 1] = a * s + b * c;
        }
    }
}

/// Residual streams after the embedding and after each block, then final logits.
pub fn reference_forward(p: &RefParams, tokens: &[TokenId]) -> (Vec<Vec<Vec<f64>>>, Vec<Vec<f64>>) {
    let c = &p.config;
    let (d, v, ff, h) = (c.d_model, c.vocab_size, c.d_ff, c.n_heads);
    let dh = d / h;
    let eps = c.norm_eps as f64;
    let base = c.rope_base as f64;
    let n = tokens.len();
    let mut xs: Vec<Vec<f64>> = tokens.iter().map(|&t| p.t(0)[t as usize * d..(t as usize + 1) * d].to_vec()).collect();
    let mut hidden = vec![xs.clone()];
    for l in 0..c.n_layers {
        let base_idx = 1 + 9 * l;
        let (attn_norm, wq, wk, wv, wo) = (p.t(base_idx), p.t(base_idx + 1), p.t(base_idx + 2), p.t(base_idx + 3), p.t(base_idx + 4));
        let (mlp_norm, w_gate, w_up, w_down) = (p.t(base_idx + 5), p.t(base_idx + 6), p.t(base_idx + 7), p.t(base_idx + 8));
        let xn: Vec<Vec<f64>> = xs.iter().map(|x| rmsnorm(x, attn_norm, eps)).collect();
        let mut q: Vec<Vec<f64>> = xn.iter().map(|x| vecmat(x, wq, d)).collect();
        let mut k: Vec<Vec<f64>> = xn.iter().map(|x| vecmat(x, wk, d)).collect();
        let vv: Vec<Vec<f64>> = xn.iter().map(|x| vecmat(x, wv, d)).collect();
        for pos in 0..n {
            rope(&mut q[pos], pos, h, base);
            rope(&mut k[pos], pos, h, base);
        }
        for i in 0..n {
            let mut attn = vec![0.0; d];
            for head in 0..h {
                let r = head * dh..(head + 1) * dh;
                let scores: Vec<f64> = (0..=i)
                    .map(|j| q[i][r.clone()].iter().zip(&k[j][r.clone()]).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
                for (j, s) in scores.iter().enumerate() {
                    let w = (s - max).exp() / z;
                    for t in r.clone() {
                        attn[t] += w * vv[j][t];
                    }
                }
            }
            let o = vecmat(&attn, wo, d);
            xs[i].iter_mut().zip(&o).for_each(|(x, o)| *x += o);
        }
        for x in xs.iter_mut() {
            let xn2 = rmsnorm(x, mlp_norm, eps);
            let g = vecmat(&xn2, w_gate, ff);
            let u = vecmat(&xn2, w_up, ff);
            let act: Vec<f64> = g.iter().zip(&u).map(|(g, u)| g / (1.0 + (-g).exp()) * u).collect();
            let m = vecmat(&act, w_down, d);
            x.iter_mut().zip(&m).for_each(|(x, m)| *x += m);
        }
        hidden.push(xs.clone());
    }
    let final_norm = p.t(p.tensors.len() - 2);
    let w_out = p.t(p.tensors.len() - 1);
    let logits = xs.iter().map(|x| vecmat(&rmsnorm(x, final_norm, eps), w_out, v)).collect();
    (hidden, logits)
}

/// Mean negative log-likelihood over every supervised position of every sequence.
pub fn reference_loss(p: &RefParams, seqs: &[Vec<TokenId>]) -> f64 {
    let mut total = 0.0;
    let mut count = 0;
    for seq in seqs {
        let (_, logits) = reference_forward(p, seq);
        for pos in loss_span(seq).expect("sequence has a supervised span") {
            let row = &logits[pos];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
            total += lse - row[seq[pos + 1] as usize];
            count += 1;
        }
    }
    total / count as f64
}

/// A small model with weights large enough that every path carries gradient.
pub fn tiny_model(seed: u64) -> ModelParams {
    let config = ModelConfig::new(1, 8, 2, 20, 32);
    let mut params = ModelParams::init(&config, seed).unwrap();
    let mut rng = SplitMix64::new(seed ^ 0x5eed);
    let names = params.names();
    for (name, t) in names.iter().zip(params.tensors_mut()) {
        match tensor_class(name) {
            TensorClass::Norm => t.data.iter_mut().for_each(|x| *x = 1.0 + 0.3 * rng.normal() as f32),
            _ => t.data.iter_mut().for_each(|x| *x *= 20.0),
        }
    }
    params
}

/// Random sequences shaped like records: `BOS prompt : body EOS`.
pub fn tiny_batch(seed: u64, vocab: usize) -> Vec<Vec<TokenId>> {
    let mut rng = SplitMix64::new(seed);
    (0..3)
        .map(|i| {
            let mut s = vec![BOS];
            s.extend((0..3 + i).map(|_| 8 + rng.below(vocab as u64 - 8) as TokenId));
            s.push(COT_START);
            s.extend((0..2 + i).map(|_| 4 + rng.below(vocab as u64 - 4) as TokenId));
            s.push(EOS);
            s
        })
        .collect()
}

/// Worst relative error per tensor class between analytic gradients and
/// f64 central differences of the reference loss, over `per_class` random
/// coordinates in each class.
pub fn gradient_check(params: &ModelParams, seqs: &[Vec<TokenId>], per_class: usize, seed: u64) -> Vec<(TensorClass, f64, usize)> {
    let refs: Vec<&[TokenId]> = seqs.iter().map(Vec::as_slice).collect();
    let analytic = cotlens::train::loss_and_grads(params, &refs, &params.rope(), 1.0).unwrap().grads;
    let analytic: Vec<Vec<f32>> = analytic.tensors().iter().map(|t| t.data.clone()).collect();
    let names = params.names();
    let mut reference = RefParams::from_model(params);
    let mut rng = SplitMix64::new(seed);
    let step = 1e-3;
    let classes = [TensorClass::Embedding, TensorClass::Attention, TensorClass::Mlp, TensorClass::Norm, TensorClass::Output];
    classes
        .iter()
        .map(|&class| {
            let members: Vec<usize> = (0..names.len()).filter(|&i| tensor_class(&names[i]) == class).collect();
            let mut worst = 0.0f64;
            for _ in 0..per_class {
                let ti = members[rng.below(members.len() as u64) as usize];
                let ci = rng.below(reference.tensors[ti].len() as u64) as usize;
                let orig = reference.tensors[ti][ci];
                reference.tensors[ti][ci] = orig + step;
                let up = reference_loss(&reference, seqs);
                reference.tensors[ti][ci] = orig - step;
                let down = reference_loss(&reference, seqs);
                reference.tensors[ti][ci] = orig;
                let numeric = (up - down) / (2.0 * step);
                let a = analytic[ti][ci] as f64;
                let scale = a.abs().max(numeric.abs());
                let rel = if scale < 1e-6 { (a - numeric).abs() / 1e-6 } else { (a - numeric).abs() / scale };
                worst = worst.max(rel);
            }
            (class, worst, per_class)
        })
        .collect()
}
