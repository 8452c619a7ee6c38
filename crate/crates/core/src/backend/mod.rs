// SPDX-License-Identifier: MIT OR Apache-2.0

//! Model runtime contract and the handle the rest of the toolkit talks to.
//!
//! A [`Backend`] owns frozen base weights and knows how to tokenize, run a
//! forward pass (optionally through a low-rank adapter) and project hidden
//! states into the vocabulary. [`ModelHandle`] pairs a backend with an
//! optional adapter so base and tuned models share one interface.

mod blob;
mod ops;
mod random;
mod toy;

use std::sync::Arc;

pub use blob::{read_blob, write_blob};
pub use random::RandomLogitBackend;
pub use toy::{ToyConfig, ToyTransformer};

use crate::error::{Error, Result};
use crate::tuning::{AdapterWeights, Projection};

/// Token ids with the byte offset at which each token starts.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub offsets: Vec<usize>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Byte-level tokenizer: one token per UTF-8 byte, vocabulary of 256.
pub fn byte_tokenize(text: &str) -> TokenSequence {
    TokenSequence {
        ids: text.bytes().map(u32::from).collect(),
        offsets: (0..text.len()).collect(),
    }
}

pub fn byte_detokenize(ids: &[u32]) -> String {
    let bytes: Vec<u8> = ids.iter().map(|&i| (i & 0xff) as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

/// Per-layer hidden states at one position plus the model's next-token
/// logits there.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub position: usize,
    /// `n_layers + 1` entries; index 0 is the embedding output.
    pub hidden: Vec<Vec<f64>>,
    pub final_logits: Vec<f64>,
}

/// One matrix an adapter may attach to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdapterTarget {
    pub layer: usize,
    pub projection: Projection,
    pub d_in: usize,
    pub d_out: usize,
}

/// Token sequence with next-token labels; only positions predicting a
/// completion token contribute to the loss.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainSequence {
    pub ids: Vec<u32>,
    /// `labels[i]` is the target predicted at position `i`.
    pub labels: Vec<u32>,
    /// Index in `ids` of the first completion token.
    pub completion_start: usize,
}

impl TrainSequence {
    pub fn new(prompt: &[u32], completion: &[u32]) -> Self {
        let mut ids = prompt.to_vec();
        ids.extend_from_slice(completion);
        let mut labels: Vec<u32> = ids[1..].to_vec();
        labels.push(0);
        TrainSequence {
            ids,
            labels,
            completion_start: prompt.len(),
        }
    }

    /// Positions whose prediction is scored.
    pub fn loss_positions(&self) -> std::ops::Range<usize> {
        self.completion_start.saturating_sub(1)..self.ids.len().saturating_sub(1)
    }
}

/// Summed negative log-likelihood and adapter gradients for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceGrad {
    pub nll_sum: f64,
    pub tokens: usize,
    /// `(dA, dB)` per adapter factor, in adapter order.
    pub factors: Vec<(Vec<f64>, Vec<f64>)>,
}

/// Runtime plug-in contract.
pub trait Backend: Send + Sync {
    fn model_id(&self) -> &str;
    fn n_layers(&self) -> usize;
    /// Hidden-state width.
    fn width(&self) -> usize;
    fn vocab_size(&self) -> usize;
    fn max_context(&self) -> usize;

    fn tokenize(&self, text: &str) -> TokenSequence;
    fn detokenize(&self, ids: &[u32]) -> String;

    /// Next-token logits for positions `from..ids.len()`.
    fn logits(&self, ids: &[u32], from: usize, adapter: Option<&AdapterWeights>)
        -> Result<Vec<Vec<f64>>>;

    /// Hidden states of every layer at the last position of `ids`.
    fn forward(&self, ids: &[u32], adapter: Option<&AdapterWeights>) -> Result<ForwardTrace>;

    /// Final normalization followed by the unembedding projection.
    fn unembed(&self, hidden: &[f64]) -> Result<Vec<f64>>;

    /// Matrices an adapter may target; empty when adapters are unsupported.
    fn adapter_targets(&self) -> Vec<AdapterTarget> {
        Vec::new()
    }

    /// Loss and adapter gradients for one sequence.
    fn sequence_grad(&self, _adapter: &AdapterWeights, _seq: &TrainSequence) -> Result<SequenceGrad> {
        Err(Error::Unsupported("training".into()))
    }

    fn check_adapter(&self, adapter: &AdapterWeights) -> Result<()> {
        let targets = self.adapter_targets();
        if targets.is_empty() {
            return Err(Error::Unsupported("adapters".into()));
        }
        if adapter.model_id != self.model_id() {
            return Err(Error::AdapterMismatch(format!(
                "adapter trained on {}, model is {}",
                adapter.model_id,
                self.model_id()
            )));
        }
        if adapter.n_layers != self.n_layers() || adapter.width != self.width() {
            return Err(Error::AdapterMismatch(format!(
                "adapter built for {} layers x width {}, model has {} x {}",
                adapter.n_layers,
                adapter.width,
                self.n_layers(),
                self.width()
            )));
        }
        for f in &adapter.factors {
            let ok = targets.iter().any(|t| {
                t.layer == f.layer
                    && t.projection == f.projection
                    && t.d_in == f.d_in
                    && t.d_out == f.d_out
            });
            if !ok {
                return Err(Error::AdapterMismatch(format!(
                    "no {:?} projection of shape {}x{} at layer {}",
                    f.projection, f.d_in, f.d_out, f.layer
                )));
            }
            if f.a.len() != f.d_in * adapter.rank || f.b.len() != adapter.rank * f.d_out {
                return Err(Error::AdapterMismatch(format!(
                    "factor at layer {} has wrong inner dimension for rank {}",
                    f.layer, adapter.rank
                )));
            }
        }
        Ok(())
    }
}

/// Numerically stable log-softmax.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    logits.iter().map(|x| x - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// A backend plus an optional adapter. Cloning is cheap; attaching or
/// detaching an adapter returns a new handle and leaves this one untouched.
#[derive(Clone)]
pub struct ModelHandle {
    backend: Arc<dyn Backend>,
    adapter: Option<Arc<AdapterWeights>>,
}

impl std::fmt::Debug for ModelHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelHandle")
            .field("model_id", &self.model_id())
            .field("n_layers", &self.n_layers())
            .field("vocab_size", &self.vocab_size())
            .field("adapter", &self.adapter.as_ref().map(|a| &a.fingerprint))
            .finish()
    }
}

impl ModelHandle {
    pub fn new(backend: Arc<dyn Backend>) -> Self {
        ModelHandle {
            backend,
            adapter: None,
        }
    }

    pub fn model_id(&self) -> &str {
        self.backend.model_id()
    }

    pub fn n_layers(&self) -> usize {
        self.backend.n_layers()
    }

    pub fn vocab_size(&self) -> usize {
        self.backend.vocab_size()
    }

    pub fn backend(&self) -> &Arc<dyn Backend> {
        &self.backend
    }

    pub fn adapter(&self) -> Option<&AdapterWeights> {
        self.adapter.as_deref()
    }

    /// Handle running the base weights plus `adapter`.
    pub fn with_adapter(&self, adapter: Arc<AdapterWeights>) -> Result<ModelHandle> {
        self.backend.check_adapter(&adapter)?;
        Ok(ModelHandle {
            backend: Arc::clone(&self.backend),
            adapter: Some(adapter),
        })
    }

    /// Handle on the base weights only.
    pub fn detach(&self) -> ModelHandle {
        ModelHandle {
            backend: Arc::clone(&self.backend),
            adapter: None,
        }
    }

    pub fn tokenize(&self, text: &str) -> TokenSequence {
        self.backend.tokenize(text)
    }

    fn check_len(&self, len: usize) -> Result<()> {
        let limit = self.backend.max_context();
        if len > limit {
            return Err(Error::ContextOverflow { len, limit });
        }
        Ok(())
    }

    /// Per-token log-probabilities (nats) of `completion` given `prompt`
    /// under teacher forcing. Prompt and completion are tokenized separately.
    pub fn completion_logprobs(&self, prompt: &str, completion: &str) -> Result<Vec<f64>> {
        if completion.is_empty() {
            return Err(Error::InvalidInput("completion is empty".into()));
        }
        if prompt.is_empty() {
            return Err(Error::InvalidInput("prompt is empty".into()));
        }
        let p = self.backend.tokenize(prompt).ids;
        let c = self.backend.tokenize(completion).ids;
        let mut ids = p.clone();
        ids.extend_from_slice(&c);
        self.check_len(ids.len())?;
        let rows = self
            .backend
            .logits(&ids, p.len() - 1, self.adapter.as_deref())?;
        Ok(c.iter()
            .zip(rows.iter())
            .map(|(&tok, row)| log_softmax(row)[tok as usize])
            .collect())
    }

    /// Summed completion log-probability, temperature 1.
    pub fn score_completion(&self, prompt: &str, completion: &str) -> Result<f64> {
        Ok(self.completion_logprobs(prompt, completion)?.iter().sum())
    }

    /// Hidden states at the last prompt token, i.e. the position that
    /// predicts the first answer token.
    pub fn forward_trace(&self, prompt: &str) -> Result<ForwardTrace> {
        if prompt.is_empty() {
            return Err(Error::InvalidInput("prompt is empty".into()));
        }
        let ids = self.backend.tokenize(prompt).ids;
        self.check_len(ids.len())?;
        self.backend.forward(&ids, self.adapter.as_deref())
    }

    pub fn unembed(&self, hidden: &[f64]) -> Result<Vec<f64>> {
        self.backend.unembed(hidden)
    }
}
