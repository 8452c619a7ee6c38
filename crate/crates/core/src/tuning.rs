// SPDX-License-Identifier: MIT OR Apache-2.0

//! Low-rank adapter tuning on translation pairs.
//!
//! The objective is the mean negative log-likelihood of target-text tokens
//! given the rendered translation prompt; prompt tokens never contribute.
//! Adapters attach to the attention projections of every layer, with `A`
//! drawn uniformly and `B` zeroed so an untrained adapter is an exact no-op.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{log_softmax, read_blob, write_blob, Backend, ModelHandle, TrainSequence};
use crate::corpus::TrainingCorpus;
use crate::error::{Error, Result};
use crate::io;
use crate::par::Exec;
use crate::prompting::{render_translation_corpus, SupervisedExample};
use crate::task::TaskKind;

const MAGIC: &[u8; 8] = b"XALNLORA";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Query,
    Key,
    Value,
    Output,
}

impl Projection {
    pub const ALL: [Projection; 4] = [
        Projection::Query,
        Projection::Key,
        Projection::Value,
        Projection::Output,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Cosine,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuningConfig {
    pub adapter_rank: usize,
    pub adapter_alpha: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub val_fraction: f64,
    pub lr_schedule: LrSchedule,
    pub max_seq_len: usize,
    pub seed: u64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
}

impl Default for TuningConfig {
    fn default() -> Self {
        TuningConfig {
            adapter_rank: 8,
            adapter_alpha: 16.0,
            epochs: 3,
            batch_size: 16,
            learning_rate: 5e-5,
            val_fraction: 0.05,
            lr_schedule: LrSchedule::Cosine,
            max_seq_len: 2048,
            seed: 0,
            weight_decay: 0.0,
            warmup_steps: 0,
        }
    }
}

impl TuningConfig {
    /// Defaults with the per-task epoch count (one epoch for paraphrase).
    pub fn for_task(task: TaskKind) -> Self {
        TuningConfig {
            epochs: if task == TaskKind::Paraphrase { 1 } else { 3 },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("tuning: {m}")));
        if self.adapter_rank == 0 {
            return bad("adapter_rank must be positive");
        }
        if !(self.adapter_alpha.is_finite() && self.adapter_alpha > 0.0) {
            return bad("adapter_alpha must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 0.5) {
            return bad("val_fraction must lie in (0, 0.5)");
        }
        if self.max_seq_len < 2 {
            return bad("max_seq_len must be at least 2");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn fingerprint(&self) -> String {
        io::sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    pub fn learning_rate_at(&self, step: usize, total_steps: usize) -> f64 {
        if step < self.warmup_steps {
            return self.learning_rate * (step + 1) as f64 / self.warmup_steps as f64;
        }
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine => {
                let span = total_steps.saturating_sub(self.warmup_steps).max(1);
                let progress = (step - self.warmup_steps) as f64 / span as f64;
                self.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

/// `W + (alpha / rank)·A·B` for one projection matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankFactor {
    pub layer: usize,
    pub projection: Projection,
    pub d_in: usize,
    pub d_out: usize,
    /// `d_in × rank`, row-major.
    pub a: Vec<f64>,
    /// `rank × d_out`, row-major.
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterWeights {
    pub rank: usize,
    pub alpha: f64,
    pub model_id: String,
    pub n_layers: usize,
    pub width: usize,
    pub factors: Vec<LowRankFactor>,
    /// Fingerprint of the producing [`TuningConfig`].
    pub fingerprint: String,
}

#[derive(Serialize, Deserialize)]
struct FactorMeta {
    layer: usize,
    projection: Projection,
    d_in: usize,
    d_out: usize,
}

#[derive(Serialize, Deserialize)]
struct AdapterMeta {
    rank: usize,
    alpha: f64,
    model_id: String,
    n_layers: usize,
    width: usize,
    fingerprint: String,
    factors: Vec<FactorMeta>,
}

impl AdapterWeights {
    /// Fresh adapter over every target the backend exposes: `A` uniform in
    /// `±1/sqrt(d_in)`, `B` zero.
    pub fn init<B: Backend + ?Sized>(backend: &B, rank: usize, alpha: f64, seed: u64, fingerprint: String) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let factors = backend
            .adapter_targets()
            .into_iter()
            .map(|t| {
                let bound = 1.0 / (t.d_in as f64).sqrt();
                LowRankFactor {
                    layer: t.layer,
                    projection: t.projection,
                    d_in: t.d_in,
                    d_out: t.d_out,
                    a: (0..t.d_in * rank).map(|_| rng.random_range(-bound..bound)).collect(),
                    b: vec![0.0; rank * t.d_out],
                }
            })
            .collect();
        AdapterWeights {
            rank,
            alpha,
            model_id: backend.model_id().to_string(),
            n_layers: backend.n_layers(),
            width: backend.width(),
            factors,
            fingerprint,
        }
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// True when every `A·B` product is exactly zero.
    pub fn is_zero_delta(&self) -> bool {
        self.factors
            .iter()
            .all(|f| f.b.iter().all(|&x| x == 0.0) || f.a.iter().all(|&x| x == 0.0))
    }

    pub fn parameter_count(&self) -> usize {
        self.factors.iter().map(|f| f.a.len() + f.b.len()).sum()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = AdapterMeta {
            rank: self.rank,
            alpha: self.alpha,
            model_id: self.model_id.clone(),
            n_layers: self.n_layers,
            width: self.width,
            fingerprint: self.fingerprint.clone(),
            factors: self
                .factors
                .iter()
                .map(|f| FactorMeta {
                    layer: f.layer,
                    projection: f.projection,
                    d_in: f.d_in,
                    d_out: f.d_out,
                })
                .collect(),
        };
        let values: Vec<f64> = self
            .factors
            .iter()
            .flat_map(|f| f.a.iter().chain(&f.b).copied())
            .collect();
        write_blob(MAGIC, VERSION, &meta, &values)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (_, meta, values): (u32, AdapterMeta, Vec<f64>) = read_blob(bytes, MAGIC, VERSION)?;
        let expected: usize = meta
            .factors
            .iter()
            .map(|f| meta.rank * (f.d_in + f.d_out))
            .sum();
        if expected != values.len() {
            return Err(Error::Blob(format!(
                "adapter header describes {expected} values, body has {}",
                values.len()
            )));
        }
        let mut at = 0;
        let mut take = |n: usize| {
            let out = values[at..at + n].to_vec();
            at += n;
            out
        };
        let factors = meta
            .factors
            .iter()
            .map(|f| LowRankFactor {
                layer: f.layer,
                projection: f.projection,
                d_in: f.d_in,
                d_out: f.d_out,
                a: take(f.d_in * meta.rank),
                b: take(meta.rank * f.d_out),
            })
            .collect();
        Ok(AdapterWeights {
            rank: meta.rank,
            alpha: meta.alpha,
            model_id: meta.model_id,
            n_layers: meta.n_layers,
            width: meta.width,
            factors,
            fingerprint: meta.fingerprint,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_bytes(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Tuned handle `θ + Δθ`; `handle` itself is left untouched.
pub fn apply_adapter(handle: &ModelHandle, adapter: AdapterWeights) -> Result<ModelHandle> {
    handle.with_adapter(Arc::new(adapter))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningReport {
    pub config_fingerprint: String,
    pub train_examples: usize,
    pub val_examples: usize,
    pub steps: usize,
    pub initial_train_loss: f64,
    pub final_train_loss: f64,
    pub final_val_loss: Option<f64>,
    pub epochs: Vec<EpochStats>,
    pub truncated: usize,
    pub skipped: usize,
    pub degenerate_pairs: usize,
    /// Not serialized, so reports from identical runs are byte-identical.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

impl TuningReport {
    /// All recorded losses are finite and non-negative.
    pub fn validate(&self) -> Result<()> {
        let losses = [self.initial_train_loss, self.final_train_loss]
            .into_iter()
            .chain(self.final_val_loss)
            .chain(self.epochs.iter().flat_map(|e| std::iter::once(e.train_loss).chain(e.val_loss)));
        for l in losses {
            if !(l.is_finite() && l >= 0.0) {
                return Err(Error::Data(format!("tuning report holds invalid loss {l}")));
            }
        }
        Ok(())
    }
}

/// Tokenized training sequences plus truncation counters.
#[derive(Debug, Clone, Default)]
pub struct PreparedData {
    pub sequences: Vec<TrainSequence>,
    pub truncated: usize,
    pub skipped: usize,
}

/// Tokenize examples, right-truncating the source text of any that exceed
/// `limit` tokens. Examples that cannot fit even with an empty source are
/// skipped.
pub fn prepare_examples<B: Backend + ?Sized>(backend: &B, examples: &[SupervisedExample], limit: usize) -> PreparedData {
    let mut out = PreparedData::default();
    for ex in examples {
        let p = backend.tokenize(&ex.prompt);
        let c = backend.tokenize(&ex.completion).ids;
        if c.is_empty() || p.is_empty() {
            out.skipped += 1;
            continue;
        }
        let total = p.len() + c.len();
        let mut ids = p.ids;
        if total > limit {
            let excess = total - limit;
            let source: Vec<usize> = p
                .offsets
                .iter()
                .enumerate()
                .filter(|(_, o)| ex.source_range.contains(o))
                .map(|(i, _)| i)
                .collect();
            if source.len() < excess || ids.len() == excess {
                out.skipped += 1;
                continue;
            }
            let drop = &source[source.len() - excess..];
            ids = ids
                .into_iter()
                .enumerate()
                .filter(|(i, _)| !drop.contains(i))
                .map(|(_, id)| id)
                .collect();
            out.truncated += 1;
        }
        out.sequences.push(TrainSequence::new(&ids, &c));
    }
    out
}

/// Seeded `(train, val)` index split with `round(n·fraction)` validation
/// items, both sorted.
pub fn split_train_val(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let n_val = ((n as f64) * fraction).round() as usize;
    let n_val = n_val.min(n.saturating_sub(1));
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

/// Token-weighted mean completion NLL, forward pass only.
pub fn mean_loss<B: Backend + ?Sized>(backend: &B, adapter: Option<&AdapterWeights>, seqs: &[TrainSequence], exec: Exec) -> Result<f64> {
    let parts = exec.try_map(seqs, |s| {
        let start = s.completion_start - 1;
        let rows = backend.logits(&s.ids, start, adapter)?;
        let nll: f64 = s
            .loss_positions()
            .map(|i| -log_softmax(&rows[i - start])[s.labels[i] as usize])
            .sum();
        Ok((nll, s.loss_positions().len()))
    })?;
    let (nll, tokens) = parts
        .into_iter()
        .fold((0.0, 0), |(a, n), (b, m)| (a + b, n + m));
    if tokens == 0 {
        return Err(Error::Data("no completion tokens to score".into()));
    }
    Ok(nll / tokens as f64)
}

struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// AdamW over adapter factors.
pub struct Trainer<'a> {
    backend: &'a dyn Backend,
    adapter: AdapterWeights,
    config: TuningConfig,
    moments: Vec<(Moments, Moments)>,
    step: usize,
    total_steps: usize,
    exec: Exec,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl<'a> Trainer<'a> {
    pub fn new(backend: &'a dyn Backend, adapter: AdapterWeights, config: TuningConfig, total_steps: usize, exec: Exec) -> Result<Self> {
        backend.check_adapter(&adapter)?;
        let zeros = |n| Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
        };
        let moments = adapter
            .factors
            .iter()
            .map(|f| (zeros(f.a.len()), zeros(f.b.len())))
            .collect();
        Ok(Trainer {
            backend,
            adapter,
            config,
            moments,
            step: 0,
            total_steps,
            exec,
        })
    }

    pub fn adapter(&self) -> &AdapterWeights {
        &self.adapter
    }

    pub fn into_adapter(self) -> AdapterWeights {
        self.adapter
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// One optimizer update; returns the batch loss before the update and
    /// the number of completion tokens it covered.
    pub fn train_step(&mut self, batch: &[TrainSequence]) -> Result<(f64, usize)> {
        let adapter = &self.adapter;
        let backend = self.backend;
        let grads = self.exec.try_map(batch, |s| backend.sequence_grad(adapter, s))?;
        let tokens: usize = grads.iter().map(|g| g.tokens).sum();
        if tokens == 0 {
            return Err(Error::Data("batch has no completion tokens".into()));
        }
        let nll: f64 = grads.iter().map(|g| g.nll_sum).sum();
        let loss = nll / tokens as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                step: self.step,
                loss,
            });
        }

        let lr = self.config.learning_rate_at(self.step, self.total_steps);
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - BETA1.powi(t), 1.0 - BETA2.powi(t));
        let wd = self.config.weight_decay;
        let norm = 1.0 / tokens as f64;
        for (fi, (factor, (ma, mb))) in self.adapter.factors.iter_mut().zip(&mut self.moments).enumerate() {
            for (params, mom, which) in [(&mut factor.a, ma, 0), (&mut factor.b, mb, 1)] {
                for (j, p) in params.iter_mut().enumerate() {
                    let g: f64 = grads
                        .iter()
                        .map(|s| if which == 0 { s.factors[fi].0[j] } else { s.factors[fi].1[j] })
                        .sum::<f64>()
                        * norm;
                    mom.m[j] = BETA1 * mom.m[j] + (1.0 - BETA1) * g;
                    mom.v[j] = BETA2 * mom.v[j] + (1.0 - BETA2) * g * g;
                    let update = (mom.m[j] / c1) / ((mom.v[j] / c2).sqrt() + ADAM_EPS);
                    *p -= lr * (update + wd * *p);
                }
            }
        }
        Ok((loss, tokens))
    }
}

/// Train a fresh adapter on the base weights of `handle`.
pub fn fine_tune(
    handle: &ModelHandle,
    corpus: &TrainingCorpus,
    config: &TuningConfig,
    template: &str,
    exec: Exec,
) -> Result<(AdapterWeights, TuningReport)> {
    let started = Instant::now();
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::Data("training corpus is empty".into()));
    }
    let backend = handle.backend().as_ref();
    if backend.adapter_targets().is_empty() {
        return Err(Error::Unsupported("adapter training".into()));
    }
    let (examples, stats) = render_translation_corpus(&corpus.pairs, template);
    let limit = config.max_seq_len.min(backend.max_context());
    let data = prepare_examples(backend, &examples, limit);
    if data.sequences.is_empty() {
        return Err(Error::Data("no training example fits within max_seq_len".into()));
    }

    let (train_idx, val_idx) = split_train_val(data.sequences.len(), config.val_fraction, config.seed);
    let pick = |idx: &[usize]| idx.iter().map(|&i| data.sequences[i].clone()).collect::<Vec<_>>();
    let mut train = pick(&train_idx);
    let val = pick(&val_idx);

    let fingerprint = config.fingerprint();
    let adapter = AdapterWeights::init(
        backend,
        config.adapter_rank,
        config.adapter_alpha,
        config.seed,
        fingerprint.clone(),
    );
    let steps_per_epoch = train.len().div_ceil(config.batch_size);
    let mut trainer = Trainer::new(backend, adapter, config.clone(), steps_per_epoch * config.epochs, exec)?;

    let initial_train_loss = mean_loss(backend, Some(trainer.adapter()), &train, exec)?;
    let mut shuffler = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut epochs = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        train.shuffle(&mut shuffler);
        let (mut nll, mut tokens) = (0.0, 0);
        for batch in train.chunks(config.batch_size) {
            let (loss, n) = trainer.train_step(batch)?;
            nll += loss * n as f64;
            tokens += n;
        }
        let val_loss = if val.is_empty() {
            None
        } else {
            Some(mean_loss(backend, Some(trainer.adapter()), &val, exec)?)
        };
        epochs.push(EpochStats {
            epoch: epoch + 1,
            train_loss: nll / tokens as f64,
            val_loss,
        });
    }
    let final_train_loss = mean_loss(backend, Some(trainer.adapter()), &train, exec)?;
    if !final_train_loss.is_finite() {
        return Err(Error::NonFinite {
            step: trainer.steps_taken(),
            loss: final_train_loss,
        });
    }
    let final_val_loss = match epochs.last() {
        Some(e) => e.val_loss,
        None if !val.is_empty() => Some(mean_loss(backend, Some(trainer.adapter()), &val, exec)?),
        None => None,
    };
    let report = TuningReport {
        config_fingerprint: fingerprint,
        train_examples: train.len(),
        val_examples: val.len(),
        steps: trainer.steps_taken(),
        initial_train_loss,
        final_train_loss,
        final_val_loss,
        epochs,
        truncated: data.truncated,
        skipped: data.skipped,
        degenerate_pairs: stats.degenerate_pairs,
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    Ok((trainer.into_adapter(), report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{ToyConfig, ToyTransformer};

    fn toy() -> ToyTransformer {
        ToyTransformer::new(ToyConfig {
            n_layers: 2,
            width: 16,
            n_heads: 2,
            mlp_width: 32,
            vocab_size: 256,
            max_context: 128,
            seed: 2,
        })
        .unwrap()
    }

    #[test]
    fn validation_split_size() {
        let (train, val) = split_train_val(10_000, 0.05, 7);
        assert_eq!(val.len(), 500);
        assert_eq!(train.len(), 9_500);
        assert_eq!(split_train_val(10_000, 0.05, 7), (train, val));
    }

    #[test]
    fn config_rules() {
        assert!(TuningConfig::default().validate().is_ok());
        assert_eq!(TuningConfig::for_task(TaskKind::Paraphrase).epochs, 1);
        assert_eq!(TuningConfig::for_task(TaskKind::Nli).epochs, 3);
        for bad in [0.0, 0.5, 0.7] {
            let c = TuningConfig {
                val_fraction: bad,
                ..Default::default()
            };
            assert!(c.validate().is_err());
        }
        let c = TuningConfig {
            epochs: 0,
            ..Default::default()
        };
        assert!(c.validate().is_ok());
        assert_ne!(c.fingerprint(), TuningConfig::default().fingerprint());
    }

    #[test]
    fn cosine_schedule_decays() {
        let c = TuningConfig::default();
        assert_eq!(c.learning_rate_at(0, 10), 5e-5);
        assert!(c.learning_rate_at(9, 10) < c.learning_rate_at(5, 10));
        let w = TuningConfig {
            warmup_steps: 4,
            ..Default::default()
        };
        assert!((w.learning_rate_at(0, 10) - 1.25e-5).abs() < 1e-18);
    }

    #[test]
    fn adapter_blob_round_trip() {
        let m = toy();
        let a = AdapterWeights::init(&m, 3, 6.0, 1, "fp".into());
        assert!(a.is_zero_delta());
        assert_eq!(a.factors.len(), 8);
        let back = AdapterWeights::from_bytes(&a.to_bytes().unwrap()).unwrap();
        assert_eq!(a, back);
    }

    #[test]
    fn truncation_cuts_source_only() {
        let m = toy();
        let ex = SupervisedExample {
            prompt: "Src: abcdefgh\nTgt:\n".into(),
            completion: "xyz".into(),
            source_range: 5..13,
            degenerate: false,
        };
        let out = prepare_examples(&m, std::slice::from_ref(&ex), 20);
        assert_eq!((out.truncated, out.skipped), (1, 0));
        let s = &out.sequences[0];
        assert_eq!(s.ids.len(), 20);
        assert_eq!(crate::backend::byte_detokenize(&s.ids), "Src: abcdef\nTgt:\nxyz");
        let none = prepare_examples(&m, std::slice::from_ref(&ex), 10);
        assert_eq!((none.truncated, none.skipped), (0, 1));
    }

    #[test]
    fn prompt_labels_do_not_affect_loss() {
        let m = toy();
        let mut a = AdapterWeights::init(&m, 2, 4.0, 3, String::new());
        a.factors[0].b.iter_mut().for_each(|x| *x = 0.1);
        let seq = TrainSequence::new(&[10, 20, 30, 40], &[50, 60]);
        let base = m.sequence_grad(&a, &seq).unwrap();
        let mut perturbed = seq.clone();
        perturbed.labels[0] = 99;
        perturbed.labels[1] = 7;
        let other = m.sequence_grad(&a, &perturbed).unwrap();
        assert_eq!(base, other);
    }
}
