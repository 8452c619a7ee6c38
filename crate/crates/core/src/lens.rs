// SPDX-License-Identifier: MIT OR Apache-2.0

//! Logit lens over answer tokens.
//!
//! Every layer's hidden state at the last prompt position is pushed through
//! the final norm and unembedding; the resulting distribution is summed over
//! the first tokens of the target-language answers and of the latent
//! (English) answers.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backend::{softmax, ModelHandle};
use crate::error::{Error, Result};
use crate::io;
use crate::prompting::AnswerSet;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrackedSets {
    pub target_correct: BTreeSet<u32>,
    pub latent_correct: BTreeSet<u32>,
    pub target_all: BTreeSet<u32>,
    pub latent_all: BTreeSet<u32>,
    pub prefix_overlap: bool,
}

fn first_tokens(handle: &ModelHandle, set: &AnswerSet, correct: &str) -> Result<(BTreeSet<u32>, BTreeSet<u32>)> {
    let mut all = BTreeSet::new();
    let mut hit = BTreeSet::new();
    for (label, surface) in &set.surfaces {
        let first = *handle
            .tokenize(surface)
            .ids
            .first()
            .ok_or_else(|| Error::InvalidInput(format!("surface {surface:?} tokenizes to nothing")))?;
        all.insert(first);
        if label == correct {
            hit.insert(first);
        }
    }
    Ok((hit, all))
}

/// First-token sets of both answer sets for the instance whose gold label
/// is `correct`.
pub fn build_tracked_sets(handle: &ModelHandle, target: &AnswerSet, latent: &AnswerSet, correct: &str) -> Result<TrackedSets> {
    if target.task != latent.task || !target.labels().eq(latent.labels()) {
        return Err(Error::InvalidInput(
            "target and latent answer sets must share task and labels".into(),
        ));
    }
    if target.surface_for(correct).is_none() {
        return Err(Error::InvalidInput(format!("label {correct:?} not in answer set")));
    }
    let (target_correct, target_all) = first_tokens(handle, target, correct)?;
    let (latent_correct, latent_all) = first_tokens(handle, latent, correct)?;
    let prefix_overlap = !target_all.is_disjoint(&latent_all);
    Ok(TrackedSets {
        target_correct,
        latent_correct,
        target_all,
        latent_all,
        prefix_overlap,
    })
}

/// Four probability series indexed by layer `0..=n_layers`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerTrace {
    pub target_correct: Vec<f64>,
    pub latent_correct: Vec<f64>,
    pub target_all: Vec<f64>,
    pub latent_all: Vec<f64>,
}

impl LayerTrace {
    /// Number of transformer layers (series length minus one).
    pub fn layers(&self) -> usize {
        self.target_correct.len().saturating_sub(1)
    }

    fn series(&self) -> [&Vec<f64>; 4] {
        [&self.target_correct, &self.latent_correct, &self.target_all, &self.latent_all]
    }

    pub fn validate(&self) -> Result<()> {
        let len = self.target_correct.len();
        if len == 0 || self.series().iter().any(|s| s.len() != len) {
            return Err(Error::Data("trace series are empty or of unequal length".into()));
        }
        for l in 0..len {
            for s in self.series() {
                if !(0.0..=1.0).contains(&s[l]) {
                    return Err(Error::Data(format!("layer {l}: probability {} outside [0, 1]", s[l])));
                }
            }
            if self.target_correct[l] > self.target_all[l] || self.latent_correct[l] > self.latent_all[l] {
                return Err(Error::Data(format!("layer {l}: correct mass exceeds total mass")));
            }
        }
        Ok(())
    }
}

/// Full next-token distributions read at every layer, plus the model's own
/// output distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct LensView {
    pub layers: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

pub fn lens_distributions(handle: &ModelHandle, prompt: &str) -> Result<LensView> {
    let trace = handle.forward_trace(prompt)?;
    let layers = trace
        .hidden
        .iter()
        .map(|h| handle.unembed(h).map(|z| softmax(&z)))
        .collect::<Result<Vec<_>>>()?;
    Ok(LensView {
        layers,
        output: softmax(&trace.final_logits),
    })
}

fn mass(p: &[f64], ids: &BTreeSet<u32>) -> f64 {
    ids.iter().map(|&i| p[i as usize]).sum::<f64>().min(1.0)
}

pub fn layer_probabilities(handle: &ModelHandle, prompt: &str, tracked: &TrackedSets) -> Result<LayerTrace> {
    let vocab = handle.vocab_size();
    let sets = [&tracked.target_correct, &tracked.latent_correct, &tracked.target_all, &tracked.latent_all];
    if let Some(&bad) = sets.iter().flat_map(|s| s.iter()).find(|&&i| i as usize >= vocab) {
        return Err(Error::InvalidInput(format!("tracked token {bad} outside vocabulary")));
    }
    let view = lens_distributions(handle, prompt)?;
    let series = |ids: &BTreeSet<u32>| view.layers.iter().map(|p| mass(p, ids)).collect();
    Ok(LayerTrace {
        target_correct: series(&tracked.target_correct),
        latent_correct: series(&tracked.latent_correct),
        target_all: series(&tracked.target_all),
        latent_all: series(&tracked.latent_all),
    })
}

/// Cell-wise mean over instances.
pub fn aggregate_traces(traces: &[LayerTrace]) -> Result<LayerTrace> {
    let first = traces
        .first()
        .ok_or_else(|| Error::Data("no traces to aggregate".into()))?;
    let len = first.target_correct.len();
    if traces.iter().any(|t| t.series().iter().any(|s| s.len() != len)) {
        return Err(Error::Data("traces disagree on layer count".into()));
    }
    let n = traces.len() as f64;
    let mean = |pick: fn(&LayerTrace) -> &Vec<f64>| -> Vec<f64> {
        (0..len)
            .map(|l| {
                let vals = traces.iter().map(|t| pick(t)[l]);
                let (lo, hi) = vals.clone().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
                (vals.sum::<f64>() / n).clamp(lo, hi)
            })
            .collect()
    };
    Ok(LayerTrace {
        target_correct: mean(|t| &t.target_correct),
        latent_correct: mean(|t| &t.latent_correct),
        target_all: mean(|t| &t.target_all),
        latent_all: mean(|t| &t.latent_all),
    })
}

/// On-disk trace document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceFile {
    pub layers: usize,
    pub series: LayerTrace,
    pub prefix_overlap: bool,
}

impl TraceFile {
    pub fn new(series: LayerTrace, prefix_overlap: bool) -> Self {
        TraceFile {
            layers: series.layers(),
            series,
            prefix_overlap,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.series.validate()?;
        if self.series.layers() != self.layers {
            return Err(Error::Data(format!(
                "trace declares {} layers but series cover {}",
                self.layers,
                self.series.layers()
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let t: TraceFile = serde_json::from_str(&io::read_to_string(path)?)?;
        t.validate()?;
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(v: f64) -> LayerTrace {
        LayerTrace {
            target_correct: vec![v / 2.0; 3],
            latent_correct: vec![v / 4.0; 3],
            target_all: vec![v; 3],
            latent_all: vec![v / 2.0; 3],
        }
    }

    #[test]
    fn aggregate_means() {
        let a = aggregate_traces(&[trace(0.2), trace(0.4)]).unwrap();
        assert!((a.target_all[1] - 0.3).abs() < 1e-15);
        assert_eq!(aggregate_traces(&[trace(0.2)]).unwrap(), trace(0.2));
        assert!(aggregate_traces(&[]).is_err());
        let three = aggregate_traces(&[trace(0.1), trace(0.1), trace(0.1)]).unwrap();
        assert_eq!(three, trace(0.1));
    }

    #[test]
    fn validation_catches_violations() {
        let mut t = trace(0.5);
        assert!(t.validate().is_ok());
        t.target_correct[2] = 0.9;
        assert!(t.validate().is_err());
        let mut t = trace(0.5);
        t.latent_all.pop();
        assert!(t.validate().is_err());
    }

    #[test]
    fn trace_json_layout() {
        let f = TraceFile::new(trace(0.5), false);
        let v: serde_json::Value = serde_json::to_value(&f).unwrap();
        assert_eq!(v["layers"], 2);
        assert!(v["series"]["latent_correct"].is_array());
        assert_eq!(v["prefix_overlap"], false);
    }
}
