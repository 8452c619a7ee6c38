// SPDX-License-Identifier: MIT OR Apache-2.0

//! Untrained baseline: next-token logits are standard-normal draws keyed by
//! a hash of the seed and the token prefix.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{byte_detokenize, byte_tokenize, Backend, ForwardTrace, TokenSequence};
use crate::error::{Error, Result};
use crate::tuning::AdapterWeights;

#[derive(Debug, Clone)]
pub struct RandomLogitBackend {
    seed: u64,
    max_context: usize,
    model_id: String,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RandomLogitBackend {
    pub const VOCAB: usize = 256;

    pub fn new(seed: u64) -> Self {
        RandomLogitBackend {
            seed,
            max_context: 4096,
            model_id: format!("random-s{seed}"),
        }
    }

    fn row(&self, key: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        (0..Self::VOCAB)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    fn check(&self, ids: &[u32]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::InvalidInput("empty token sequence".into()));
        }
        if ids.len() > self.max_context {
            return Err(Error::ContextOverflow {
                len: ids.len(),
                limit: self.max_context,
            });
        }
        Ok(())
    }

    fn prefix_keys(&self, ids: &[u32]) -> Vec<u64> {
        let mut h = splitmix(self.seed);
        ids.iter()
            .map(|&id| {
                h = splitmix(h ^ u64::from(id));
                h
            })
            .collect()
    }
}

impl Backend for RandomLogitBackend {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn n_layers(&self) -> usize {
        1
    }

    fn width(&self) -> usize {
        Self::VOCAB
    }

    fn vocab_size(&self) -> usize {
        Self::VOCAB
    }

    fn max_context(&self) -> usize {
        self.max_context
    }

    fn tokenize(&self, text: &str) -> TokenSequence {
        byte_tokenize(text)
    }

    fn detokenize(&self, ids: &[u32]) -> String {
        byte_detokenize(ids)
    }

    fn logits(&self, ids: &[u32], from: usize, _adapter: Option<&AdapterWeights>) -> Result<Vec<Vec<f64>>> {
        self.check(ids)?;
        Ok(self
            .prefix_keys(ids)
            .into_iter()
            .skip(from)
            .map(|k| self.row(k))
            .collect())
    }

    fn forward(&self, ids: &[u32], _adapter: Option<&AdapterWeights>) -> Result<ForwardTrace> {
        self.check(ids)?;
        let key = *self.prefix_keys(ids).last().expect("non-empty");
        let logits = self.row(key);
        Ok(ForwardTrace {
            position: ids.len() - 1,
            hidden: vec![vec![0.0; Self::VOCAB], logits.clone()],
            final_logits: logits,
        })
    }

    fn unembed(&self, hidden: &[f64]) -> Result<Vec<f64>> {
        if hidden.len() != Self::VOCAB {
            return Err(Error::DimensionMismatch {
                expected: Self::VOCAB,
                got: hidden.len(),
            });
        }
        Ok(hidden.to_vec())
    }
}
