// SPDX-License-Identifier: MIT OR Apache-2.0

//! Deterministic reference transformer.
//!
//! Pre-norm decoder-only model over a byte vocabulary: token + learned
//! position embeddings, `n_layers` blocks of causal multi-head attention and
//! a GELU MLP, RMSNorm before each sublayer and before the unembedding. All
//! arithmetic is f64 and single-threaded per sequence, so outputs are
//! bit-reproducible for a given seed.
//!
//! Low-rank adapters attach to the four attention projections. The backward
//! pass computes gradients for adapter factors only; base weights are frozen.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::ops::{add_assign, add_scaled, dot, matmul, matmul_nt, matmul_tn};
use super::{
    byte_detokenize, byte_tokenize, log_softmax, read_blob, softmax, write_blob, AdapterTarget,
    Backend, ForwardTrace, SequenceGrad, TokenSequence, TrainSequence,
};
use crate::error::{Error, Result};
use crate::io;
use crate::tuning::{AdapterWeights, LowRankFactor, Projection};

const MAGIC: &[u8; 8] = b"XALNTOY\0";
const VERSION: u32 = 1;
const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub n_layers: usize,
    pub width: usize,
    pub n_heads: usize,
    pub mlp_width: usize,
    pub vocab_size: usize,
    pub max_context: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            n_layers: 4,
            width: 64,
            n_heads: 4,
            mlp_width: 256,
            vocab_size: 256,
            max_context: 1024,
            seed: 0,
        }
    }
}

impl ToyConfig {
    fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.width == 0 || self.n_heads == 0 || self.mlp_width == 0 {
            return Err(Error::Config("toy model dimensions must be positive".into()));
        }
        if !self.width.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "width {} not divisible by {} heads",
                self.width, self.n_heads
            )));
        }
        if self.vocab_size != 256 {
            return Err(Error::Config("toy model uses a 256-entry byte vocabulary".into()));
        }
        if self.max_context == 0 {
            return Err(Error::Config("max_context must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    norm_attn: Vec<f64>,
    wq: Vec<f64>,
    wk: Vec<f64>,
    wv: Vec<f64>,
    wo: Vec<f64>,
    norm_mlp: Vec<f64>,
    w_up: Vec<f64>,
    w_down: Vec<f64>,
}

impl Block {
    fn projection(&self, p: Projection) -> &[f64] {
        match p {
            Projection::Query => &self.wq,
            Projection::Key => &self.wk,
            Projection::Value => &self.wv,
            Projection::Output => &self.wo,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyTransformer {
    config: ToyConfig,
    model_id: String,
    tok_emb: Vec<f64>,
    pos_emb: Vec<f64>,
    blocks: Vec<Block>,
    norm_final: Vec<f64>,
    unembed: Vec<f64>,
}

struct LayerCache {
    x_in: Vec<f64>,
    rinv_attn: Vec<f64>,
    h: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    q_low: Option<Vec<f64>>,
    k_low: Option<Vec<f64>>,
    v_low: Option<Vec<f64>>,
    probs: Vec<f64>,
    ctx: Vec<f64>,
    ctx_low: Option<Vec<f64>>,
    x_mid: Vec<f64>,
    rinv_mlp: Vec<f64>,
    up: Vec<f64>,
}

struct Run {
    x0: Vec<f64>,
    layers: Vec<LayerCache>,
    x_final: Vec<f64>,
}

/// An adapter factor resolved for one projection: index into the adapter's
/// factor list, the factor, and the `alpha / rank` scale.
type Lora<'a> = Option<(usize, &'a LowRankFactor, f64)>;

fn find_lora<'a>(adapter: Option<&'a AdapterWeights>, layer: usize, p: Projection) -> Lora<'a> {
    let a = adapter?;
    a.factors
        .iter()
        .enumerate()
        .find(|(_, f)| f.layer == layer && f.projection == p)
        .map(|(i, f)| (i, f, a.scale()))
}

fn rms_norm(x: &[f64], t: usize, d: usize, g: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut y = vec![0.0; t * d];
    let mut rinv = vec![0.0; t];
    for i in 0..t {
        let row = &x[i * d..(i + 1) * d];
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let r = 1.0 / (ms + NORM_EPS).sqrt();
        rinv[i] = r;
        for j in 0..d {
            y[i * d + j] = row[j] * r * g[j];
        }
    }
    (y, rinv)
}

fn rms_norm_backward(x: &[f64], rinv: &[f64], g: &[f64], dy: &[f64], t: usize, d: usize) -> Vec<f64> {
    let mut dx = vec![0.0; t * d];
    for i in 0..t {
        let row = &x[i * d..(i + 1) * d];
        let dyr = &dy[i * d..(i + 1) * d];
        let r = rinv[i];
        let s: f64 = (0..d).map(|j| g[j] * dyr[j] * row[j]).sum();
        let c = r * r * r * s / d as f64;
        for j in 0..d {
            dx[i * d + j] = r * g[j] * dyr[j] - c * row[j];
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + 0.044715 * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + 0.044715 * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * u * u)
}

/// `x·W + s·(x·A)·B`; also returns `x·A` for the backward pass.
fn project(x: &[f64], t: usize, d_in: usize, d_out: usize, w: &[f64], lora: Lora<'_>, rank: usize) -> (Vec<f64>, Option<Vec<f64>>) {
    let mut y = matmul(x, w, t, d_in, d_out);
    let low = lora.map(|(_, f, s)| {
        let xa = matmul(x, &f.a, t, d_in, rank);
        let delta = matmul(&xa, &f.b, t, rank, d_out);
        add_scaled(&mut y, &delta, s);
        xa
    });
    (y, low)
}

/// Gradient w.r.t. the projection input, plus `(dA, dB)` when adapted.
/// Adapter gradients `(dA, dB)`.
type LoraGrads = (Vec<f64>, Vec<f64>);

#[allow(clippy::too_many_arguments)]
fn project_backward(
    x: &[f64],
    x_low: Option<&Vec<f64>>,
    t: usize,
    d_in: usize,
    d_out: usize,
    w: &[f64],
    lora: Lora<'_>,
    rank: usize,
    dy: &[f64],
) -> (Vec<f64>, Option<LoraGrads>) {
    let mut dx = matmul_nt(dy, w, t, d_out, d_in);
    let grads = lora.map(|(_, f, s)| {
        let xa = x_low.expect("adapter activations cached");
        let dy_bt = matmul_nt(dy, &f.b, t, d_out, rank);
        let dx_low = matmul_nt(&dy_bt, &f.a, t, rank, d_in);
        add_scaled(&mut dx, &dx_low, s);
        let mut da = matmul_tn(x, &dy_bt, t, d_in, rank);
        let mut db = matmul_tn(xa, dy, t, rank, d_out);
        da.iter_mut().for_each(|v| *v *= s);
        db.iter_mut().for_each(|v| *v *= s);
        (da, db)
    });
    (dx, grads)
}

fn attention(q: &[f64], k: &[f64], v: &[f64], t: usize, d: usize, heads: usize) -> (Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut probs = vec![0.0; heads * t * t];
    let mut ctx = vec![0.0; t * d];
    let mut scores = vec![0.0; t];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..t {
            let qi = &q[i * d + off..i * d + off + dh];
            let mut max = f64::NEG_INFINITY;
            for j in 0..=i {
                let s = dot(qi, &k[j * d + off..j * d + off + dh]) * scale;
                scores[j] = s;
                max = max.max(s);
            }
            let mut z = 0.0;
            for s in scores.iter_mut().take(i + 1) {
                *s = (*s - max).exp();
                z += *s;
            }
            let prow = &mut probs[h * t * t + i * t..h * t * t + i * t + t];
            let crow = &mut ctx[i * d + off..i * d + off + dh];
            for j in 0..=i {
                let p = scores[j] / z;
                prow[j] = p;
                for (c, vv) in crow.iter_mut().zip(&v[j * d + off..j * d + off + dh]) {
                    *c += p * vv;
                }
            }
        }
    }
    (ctx, probs)
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    dctx: &[f64],
    t: usize,
    d: usize,
    heads: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; t * d];
    let mut dk = vec![0.0; t * d];
    let mut dv = vec![0.0; t * d];
    let mut dp = vec![0.0; t];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..t {
            let prow = &probs[h * t * t + i * t..h * t * t + i * t + t];
            let dci = &dctx[i * d + off..i * d + off + dh];
            let mut weighted = 0.0;
            for j in 0..=i {
                dp[j] = dot(dci, &v[j * d + off..j * d + off + dh]);
                weighted += prow[j] * dp[j];
                add_scaled(&mut dv[j * d + off..j * d + off + dh], dci, prow[j]);
            }
            for j in 0..=i {
                let ds = prow[j] * (dp[j] - weighted) * scale;
                if ds == 0.0 {
                    continue;
                }
                let (qi, kj) = (&q[i * d + off..i * d + off + dh], &k[j * d + off..j * d + off + dh]);
                add_scaled(&mut dq[i * d + off..i * d + off + dh], kj, ds);
                add_scaled(&mut dk[j * d + off..j * d + off + dh], qi, ds);
            }
        }
    }
    (dq, dk, dv)
}

impl ToyTransformer {
    /// Fresh model with seeded Gaussian weights and unit norm gains.
    pub fn new(config: ToyConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut gauss = |n: usize, std: f64| -> Vec<f64> {
            (0..n)
                .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                .collect()
        };
        let (d, f, v) = (config.width, config.mlp_width, config.vocab_size);
        let sd = 1.0 / (d as f64).sqrt();
        let tok_emb = gauss(v * d, 1.0);
        let pos_emb = gauss(config.max_context * d, 0.2);
        let blocks = (0..config.n_layers)
            .map(|_| Block {
                norm_attn: vec![1.0; d],
                wq: gauss(d * d, sd),
                wk: gauss(d * d, sd),
                wv: gauss(d * d, sd),
                wo: gauss(d * d, sd),
                norm_mlp: vec![1.0; d],
                w_up: gauss(d * f, sd),
                w_down: gauss(f * d, 1.0 / (f as f64).sqrt()),
            })
            .collect();
        let unembed = gauss(d * v, 1.5 * sd);
        Ok(ToyTransformer {
            model_id: Self::id_for(&config),
            config,
            tok_emb,
            pos_emb,
            blocks,
            norm_final: vec![1.0; d],
            unembed,
        })
    }

    fn id_for(c: &ToyConfig) -> String {
        format!("toy-l{}-d{}-s{}", c.n_layers, c.width, c.seed)
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    /// Mutable unembedding matrix (`width × vocab`, row-major).
    pub fn unembedding_mut(&mut self) -> &mut [f64] {
        &mut self.unembed
    }

    fn params(&self) -> Vec<&Vec<f64>> {
        let mut out = vec![&self.tok_emb, &self.pos_emb];
        for b in &self.blocks {
            out.extend([&b.norm_attn, &b.wq, &b.wk, &b.wv, &b.wo, &b.norm_mlp, &b.w_up, &b.w_down]);
        }
        out.extend([&self.norm_final, &self.unembed]);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in &mut self.blocks {
            out.extend([
                &mut b.norm_attn,
                &mut b.wq,
                &mut b.wk,
                &mut b.wv,
                &mut b.wo,
                &mut b.norm_mlp,
                &mut b.w_up,
                &mut b.w_down,
            ]);
        }
        out.extend([&mut self.norm_final, &mut self.unembed]);
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let values: Vec<f64> = self.params().into_iter().flatten().copied().collect();
        write_blob(MAGIC, VERSION, &self.config, &values)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (_, config, values): (u32, ToyConfig, Vec<f64>) = read_blob(bytes, MAGIC, VERSION)?;
        let mut model = ToyTransformer::new(config)?;
        let total: usize = model.params().iter().map(|p| p.len()).sum();
        if total != values.len() {
            return Err(Error::Blob(format!(
                "expected {total} parameters, found {}",
                values.len()
            )));
        }
        let mut at = 0;
        for p in model.params_mut() {
            let n = p.len();
            p.copy_from_slice(&values[at..at + n]);
            at += n;
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_bytes(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::InvalidInput("empty token sequence".into()));
        }
        if ids.len() > self.config.max_context {
            return Err(Error::ContextOverflow {
                len: ids.len(),
                limit: self.config.max_context,
            });
        }
        if let Some(bad) = ids.iter().find(|&&i| i as usize >= self.config.vocab_size) {
            return Err(Error::InvalidInput(format!("token id {bad} out of vocabulary")));
        }
        Ok(())
    }

    fn run(&self, ids: &[u32], adapter: Option<&AdapterWeights>) -> Result<Run> {
        self.check_ids(ids)?;
        let c = &self.config;
        let (t, d, f, heads) = (ids.len(), c.width, c.mlp_width, c.n_heads);
        let rank = adapter.map_or(0, |a| a.rank);

        let mut x = vec![0.0; t * d];
        for (i, &id) in ids.iter().enumerate() {
            let row = &mut x[i * d..(i + 1) * d];
            row.copy_from_slice(&self.tok_emb[id as usize * d..(id as usize + 1) * d]);
            add_assign(row, &self.pos_emb[i * d..(i + 1) * d]);
        }
        let x0 = x.clone();
        let mut layers = Vec::with_capacity(self.blocks.len());
        for (l, b) in self.blocks.iter().enumerate() {
            let (h, rinv_attn) = rms_norm(&x, t, d, &b.norm_attn);
            let lora = |p| find_lora(adapter, l, p);
            let (q, q_low) = project(&h, t, d, d, &b.wq, lora(Projection::Query), rank);
            let (k, k_low) = project(&h, t, d, d, &b.wk, lora(Projection::Key), rank);
            let (v, v_low) = project(&h, t, d, d, &b.wv, lora(Projection::Value), rank);
            let (ctx, probs) = attention(&q, &k, &v, t, d, heads);
            let (o, ctx_low) = project(&ctx, t, d, d, &b.wo, lora(Projection::Output), rank);
            let mut x_mid = x.clone();
            add_assign(&mut x_mid, &o);

            let (h2, rinv_mlp) = rms_norm(&x_mid, t, d, &b.norm_mlp);
            let up = matmul(&h2, &b.w_up, t, d, f);
            let act: Vec<f64> = up.iter().map(|&u| gelu(u)).collect();
            let down = matmul(&act, &b.w_down, t, f, d);
            let mut x_out = x_mid.clone();
            add_assign(&mut x_out, &down);

            layers.push(LayerCache {
                x_in: std::mem::replace(&mut x, x_out),
                rinv_attn,
                h,
                q,
                k,
                v,
                q_low,
                k_low,
                v_low,
                probs,
                ctx,
                ctx_low,
                x_mid,
                rinv_mlp,
                up,
            });
        }
        Ok(Run {
            x0,
            layers,
            x_final: x,
        })
    }

    fn unembed_rows(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let d = self.config.width;
        let (hf, _) = rms_norm(x, rows, d, &self.norm_final);
        matmul(&hf, &self.unembed, rows, d, self.config.vocab_size)
    }

    fn grad(&self, adapter: &AdapterWeights, seq: &TrainSequence) -> Result<SequenceGrad> {
        if seq.labels.len() != seq.ids.len() || seq.completion_start == 0 || seq.completion_start >= seq.ids.len() {
            return Err(Error::InvalidInput("malformed training sequence".into()));
        }
        let c = &self.config;
        let (t, d, f, vsz, heads, rank) = (seq.ids.len(), c.width, c.mlp_width, c.vocab_size, c.n_heads, adapter.rank);
        let run = self.run(&seq.ids, Some(adapter))?;

        let (hf, rinv_f) = rms_norm(&run.x_final, t, d, &self.norm_final);
        let mut d_hf = vec![0.0; t * d];
        let mut nll_sum = 0.0;
        let mut tokens = 0;
        for i in seq.loss_positions() {
            let hrow = &hf[i * d..(i + 1) * d];
            let logits = matmul(hrow, &self.unembed, 1, d, vsz);
            let label = seq.labels[i] as usize;
            nll_sum -= log_softmax(&logits)[label];
            tokens += 1;
            let mut dlogits = softmax(&logits);
            dlogits[label] -= 1.0;
            let dh = matmul_nt(&dlogits, &self.unembed, 1, vsz, d);
            d_hf[i * d..(i + 1) * d].copy_from_slice(&dh);
        }
        let mut dx = rms_norm_backward(&run.x_final, &rinv_f, &self.norm_final, &d_hf, t, d);

        let mut factors: Vec<(Vec<f64>, Vec<f64>)> = adapter
            .factors
            .iter()
            .map(|fa| (vec![0.0; fa.a.len()], vec![0.0; fa.b.len()]))
            .collect();
        let mut accumulate = |lora: Lora<'_>, g: Option<LoraGrads>| {
            if let (Some((idx, _, _)), Some((da, db))) = (lora, g) {
                add_assign(&mut factors[idx].0, &da);
                add_assign(&mut factors[idx].1, &db);
            }
        };

        for (l, (b, cache)) in self.blocks.iter().zip(&run.layers).enumerate().rev() {
            let lora = |p| find_lora(Some(adapter), l, p);
            // MLP branch
            let dact = matmul_nt(&dx, &b.w_down, t, d, f);
            let dup: Vec<f64> = dact
                .iter()
                .zip(&cache.up)
                .map(|(g, &u)| g * gelu_grad(u))
                .collect();
            let dh2 = matmul_nt(&dup, &b.w_up, t, f, d);
            let mut dx_mid = dx;
            add_assign(
                &mut dx_mid,
                &rms_norm_backward(&cache.x_mid, &cache.rinv_mlp, &b.norm_mlp, &dh2, t, d),
            );

            // attention branch
            let (dctx, g) = project_backward(&cache.ctx, cache.ctx_low.as_ref(), t, d, d, &b.wo, lora(Projection::Output), rank, &dx_mid);
            accumulate(lora(Projection::Output), g);
            let (dq, dk, dv) = attention_backward(&cache.q, &cache.k, &cache.v, &cache.probs, &dctx, t, d, heads);
            let mut dh = vec![0.0; t * d];
            for (p, dy, low) in [
                (Projection::Query, &dq, cache.q_low.as_ref()),
                (Projection::Key, &dk, cache.k_low.as_ref()),
                (Projection::Value, &dv, cache.v_low.as_ref()),
            ] {
                let (dhp, g) = project_backward(&cache.h, low, t, d, d, b.projection(p), lora(p), rank, dy);
                accumulate(lora(p), g);
                add_assign(&mut dh, &dhp);
            }
            dx = dx_mid;
            add_assign(
                &mut dx,
                &rms_norm_backward(&cache.x_in, &cache.rinv_attn, &b.norm_attn, &dh, t, d),
            );
        }

        Ok(SequenceGrad {
            nll_sum,
            tokens,
            factors,
        })
    }
}

impl Backend for ToyTransformer {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    fn width(&self) -> usize {
        self.config.width
    }

    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn max_context(&self) -> usize {
        self.config.max_context
    }

    fn tokenize(&self, text: &str) -> TokenSequence {
        byte_tokenize(text)
    }

    fn detokenize(&self, ids: &[u32]) -> String {
        byte_detokenize(ids)
    }

    fn logits(&self, ids: &[u32], from: usize, adapter: Option<&AdapterWeights>) -> Result<Vec<Vec<f64>>> {
        let run = self.run(ids, adapter)?;
        let d = self.config.width;
        let t = ids.len();
        if from >= t {
            return Ok(Vec::new());
        }
        let rows = t - from;
        let logits = self.unembed_rows(&run.x_final[from * d..], rows);
        Ok(logits
            .chunks_exact(self.config.vocab_size)
            .map(<[f64]>::to_vec)
            .collect())
    }

    fn forward(&self, ids: &[u32], adapter: Option<&AdapterWeights>) -> Result<ForwardTrace> {
        let run = self.run(ids, adapter)?;
        let d = self.config.width;
        let pos = ids.len() - 1;
        let row = |x: &[f64]| x[pos * d..(pos + 1) * d].to_vec();
        let mut hidden = Vec::with_capacity(self.config.n_layers + 1);
        hidden.push(row(&run.x0));
        for layer in run.layers.iter().skip(1) {
            hidden.push(row(&layer.x_in));
        }
        let last = row(&run.x_final);
        let final_logits = self.unembed_rows(&last, 1);
        hidden.push(last);
        Ok(ForwardTrace {
            position: pos,
            hidden,
            final_logits,
        })
    }

    fn unembed(&self, hidden: &[f64]) -> Result<Vec<f64>> {
        if hidden.len() != self.config.width {
            return Err(Error::DimensionMismatch {
                expected: self.config.width,
                got: hidden.len(),
            });
        }
        Ok(self.unembed_rows(hidden, 1))
    }

    fn adapter_targets(&self) -> Vec<AdapterTarget> {
        let d = self.config.width;
        (0..self.config.n_layers)
            .flat_map(|layer| {
                Projection::ALL.into_iter().map(move |projection| AdapterTarget {
                    layer,
                    projection,
                    d_in: d,
                    d_out: d,
                })
            })
            .collect()
    }

    fn sequence_grad(&self, adapter: &AdapterWeights, seq: &TrainSequence) -> Result<SequenceGrad> {
        self.check_adapter(adapter)?;
        self.grad(adapter, seq)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tuning::AdapterWeights;

    fn small() -> ToyTransformer {
        ToyTransformer::new(ToyConfig {
            n_layers: 2,
            width: 8,
            n_heads: 2,
            mlp_width: 16,
            vocab_size: 256,
            max_context: 64,
            seed: 11,
        })
        .unwrap()
    }

    fn random_adapter(model: &ToyTransformer, seed: u64) -> AdapterWeights {
        let mut a = AdapterWeights::init(model, 2, 4.0, seed, "test".into());
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        for f in &mut a.factors {
            for b in &mut f.b {
                *b = rng.random_range(-0.3..0.3);
            }
        }
        a
    }

    fn loss(model: &ToyTransformer, adapter: &AdapterWeights, seq: &TrainSequence) -> f64 {
        let ids = &seq.ids;
        let rows = model.logits(ids, 0, Some(adapter)).unwrap();
        seq.loss_positions()
            .map(|i| -log_softmax(&rows[i])[seq.labels[i] as usize])
            .sum()
    }

    #[test]
    fn adapter_gradients_match_finite_differences() {
        let model = small();
        let adapter = random_adapter(&model, 5);
        let seq = TrainSequence::new(b"abcde".map(u32::from).as_slice(), b"xyz".map(u32::from).as_slice());
        let g = model.sequence_grad(&adapter, &seq).unwrap();
        assert!((g.nll_sum - loss(&model, &adapter, &seq)).abs() < 1e-10);
        assert_eq!(g.tokens, 3);

        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for (fi, (ga, gb)) in g.factors.iter().enumerate() {
            for (which, grads) in [(0, ga), (1, gb)] {
                for idx in (0..grads.len()).step_by(3) {
                    let mut plus = adapter.clone();
                    let mut minus = adapter.clone();
                    let (p, m) = if which == 0 {
                        (&mut plus.factors[fi].a[idx], &mut minus.factors[fi].a[idx])
                    } else {
                        (&mut plus.factors[fi].b[idx], &mut minus.factors[fi].b[idx])
                    };
                    *p += h;
                    *m -= h;
                    let fd = (loss(&model, &plus, &seq) - loss(&model, &minus, &seq)) / (2.0 * h);
                    let err = (fd - grads[idx]).abs() / (1e-6 + fd.abs().max(grads[idx].abs()));
                    worst = worst.max(err.min((fd - grads[idx]).abs() * 1e3));
                }
            }
        }
        assert!(worst < 1e-4, "worst relative gradient error {worst}");
    }

    #[test]
    fn blob_round_trip_is_bit_exact() {
        let m = small();
        let back = ToyTransformer::from_bytes(&m.to_bytes().unwrap()).unwrap();
        assert_eq!(m, back);
        assert!(ToyTransformer::from_bytes(b"garbage").is_err());
    }

    #[test]
    fn zero_vector_unembeds_to_finite_logits() {
        let m = small();
        let out = m.unembed(&[0.0; 8]).unwrap();
        assert_eq!(out.len(), 256);
        assert!(out.iter().all(|x| x.is_finite()));
        assert!(m.unembed(&[0.0; 7]).is_err());
    }

    #[test]
    fn default_shape() {
        let m = ToyTransformer::new(ToyConfig::default()).unwrap();
        let trace = m.forward(&[1, 2, 3], None).unwrap();
        assert_eq!(trace.hidden.len(), 5);
        assert_eq!(trace.final_logits.len(), 256);
        assert_eq!(m.adapter_targets().len(), 16);
    }

    #[test]
    fn overflow_rejected() {
        let m = small();
        assert!(matches!(
            m.logits(&[1; 65], 0, None),
            Err(Error::ContextOverflow { len: 65, limit: 64 })
        ));
    }
}
