// SPDX-License-Identifier: MIT OR Apache-2.0

//! Constrained-decoding evaluation and accuracy aggregation.
//!
//! Every candidate surface in the answer set is scored by teacher-forced
//! log-probability after the rendered prompt; the prediction is the
//! canonical label of the best-scoring surface, ties going to the surface
//! listed first.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backend::ModelHandle;
use crate::error::{Error, Result};
use crate::io;
use crate::language::{LanguageCode, LanguageSet};
use crate::par::Exec;
use crate::prompting::{PromptSpec, TemplateRegistry};
use crate::task::TaskKind;

/// How per-token log-probabilities of a surface combine into its score.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoringMode {
    /// Summed log-probability.
    #[default]
    Sum,
    /// Mean log-probability per surface token.
    PerToken,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub instance_id: String,
    pub lang: LanguageCode,
    pub predicted: String,
    pub gold: String,
    pub scores: BTreeMap<String, f64>,
}

impl Prediction {
    pub fn is_correct(&self) -> bool {
        self.predicted == self.gold
    }
}

/// Index of the maximum, first one on ties.
pub fn argmax_first(scores: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &s) in scores.iter().enumerate() {
        match best {
            Some((_, b)) if s <= b => {}
            _ if s.is_nan() => {}
            _ => best = Some((i, s)),
        }
    }
    best.map(|(i, _)| i)
}

/// Score every surface of `spec.answer_set` after `prompt`.
pub fn predict_with_prompt(handle: &ModelHandle, spec: &PromptSpec, prompt: &str, mode: ScoringMode) -> Result<Prediction> {
    let inst = &spec.instance;
    let wrap = |e: Error| Error::Instance {
        id: inst.id.clone(),
        source: Box::new(e),
    };
    if spec.answer_set.is_empty() {
        return Err(wrap(Error::InvalidInput("answer set is empty".into())));
    }
    let mut ordered = Vec::with_capacity(spec.answer_set.len());
    for surface in spec.answer_set.surface_strings() {
        let lp = handle.completion_logprobs(prompt, surface).map_err(wrap)?;
        let total: f64 = lp.iter().sum();
        ordered.push(match mode {
            ScoringMode::Sum => total,
            ScoringMode::PerToken => total / lp.len() as f64,
        });
    }
    let best = argmax_first(&ordered).ok_or_else(|| wrap(Error::InvalidInput("all candidate scores are NaN".into())))?;
    let labels: Vec<&str> = spec.answer_set.labels().collect();
    Ok(Prediction {
        instance_id: inst.id.clone(),
        lang: inst.lang,
        predicted: labels[best].to_string(),
        gold: inst.gold.clone(),
        scores: labels
            .iter()
            .zip(&ordered)
            .map(|(l, s)| (l.to_string(), *s))
            .collect(),
    })
}

/// Render the prompt for `spec` and pick the best-scoring label.
pub fn predict_label(handle: &ModelHandle, spec: &PromptSpec, templates: &TemplateRegistry, mode: ScoringMode) -> Result<Prediction> {
    let prompt = templates.render_task_prompt(spec)?;
    predict_with_prompt(handle, spec, &prompt, mode)
}

/// [`predict_label`] over many specs; output order follows input order.
pub fn evaluate_batch(
    handle: &ModelHandle,
    specs: &[PromptSpec],
    templates: &TemplateRegistry,
    mode: ScoringMode,
    exec: Exec,
) -> Result<Vec<Prediction>> {
    exec.try_map(specs, |s| predict_label(handle, s, templates, mode))
}

/// Fraction of predictions for `lang` that match gold.
pub fn accuracy_per_language(predictions: &[Prediction], lang: LanguageCode) -> Result<f64> {
    let (n, correct) = count(predictions, lang);
    if n == 0 {
        return Err(Error::Data(format!("no predictions for language {lang}")));
    }
    Ok(correct as f64 / n as f64)
}

fn count(predictions: &[Prediction], lang: LanguageCode) -> (usize, usize) {
    predictions
        .iter()
        .filter(|p| p.lang == lang)
        .fold((0, 0), |(n, c), p| (n + 1, c + usize::from(p.is_correct())))
}

/// Unweighted mean over every language of `languages`, in registry order.
pub fn average_accuracy(per_language: &BTreeMap<LanguageCode, f64>, languages: &LanguageSet) -> Result<f64> {
    let mut sum = 0.0;
    for lang in languages.iter() {
        sum += per_language
            .get(&lang)
            .ok_or_else(|| Error::Data(format!("no accuracy for language {lang}")))?;
    }
    Ok(sum / languages.len() as f64)
}

/// Chance accuracy of uniform guessing.
pub fn random_baseline(task: TaskKind) -> f64 {
    1.0 / task.label_arity() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageAccuracy {
    pub lang: LanguageCode,
    pub n: usize,
    pub correct: usize,
}

impl LanguageAccuracy {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.n as f64
    }
}

/// Per-language accuracies in language-set order plus their average.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub rows: Vec<LanguageAccuracy>,
    pub average: f64,
}

impl EvalResult {
    pub fn from_predictions(predictions: &[Prediction], languages: &LanguageSet) -> Result<Self> {
        let rows = languages
            .iter()
            .map(|lang| {
                let (n, correct) = count(predictions, lang);
                if n == 0 {
                    return Err(Error::Data(format!("no predictions for language {lang}")));
                }
                Ok(LanguageAccuracy { lang, n, correct })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_rows(rows, languages)
    }

    pub fn from_rows(rows: Vec<LanguageAccuracy>, languages: &LanguageSet) -> Result<Self> {
        if let Some(r) = rows.iter().find(|r| r.n == 0 || r.correct > r.n) {
            return Err(Error::Data(format!(
                "invalid counts for {}: {} of {}",
                r.lang, r.correct, r.n
            )));
        }
        let average = average_accuracy(&per_language(&rows), languages)?;
        Ok(EvalResult { rows, average })
    }

    pub fn per_language(&self) -> BTreeMap<LanguageCode, f64> {
        per_language(&self.rows)
    }

    pub fn get(&self, lang: LanguageCode) -> Option<f64> {
        self.rows.iter().find(|r| r.lang == lang).map(LanguageAccuracy::accuracy)
    }
}

fn per_language(rows: &[LanguageAccuracy]) -> BTreeMap<LanguageCode, f64> {
    rows.iter().map(|r| (r.lang, r.accuracy())).collect()
}

/// Percent with two decimals.
pub fn percent(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    lang: String,
    n: Option<usize>,
    correct: Option<usize>,
    accuracy: String,
}

/// One row per language (`lang,n,correct,accuracy` with accuracy in
/// percent), then an `average` row.
pub fn write_eval_csv(path: &Path, result: &EvalResult) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &result.rows {
        w.serialize(CsvRow {
            lang: r.lang.to_string(),
            n: Some(r.n),
            correct: Some(r.correct),
            accuracy: percent(r.accuracy()),
        })?;
    }
    w.serialize(CsvRow {
        lang: "average".into(),
        n: None,
        correct: None,
        accuracy: percent(result.average),
    })?;
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    io::write_bytes(path, &bytes)
}

/// Read per-language rows back; the average is recomputed from counts.
pub fn read_eval_csv(path: &Path, languages: &LanguageSet) -> Result<EvalResult> {
    let text = io::read_to_string(path)?;
    let mut rows = Vec::new();
    for rec in csv::Reader::from_reader(text.as_bytes()).deserialize() {
        let rec: CsvRow = rec?;
        if rec.lang == "average" {
            continue;
        }
        let (n, correct) = rec
            .n
            .zip(rec.correct)
            .ok_or_else(|| Error::Data(format!("{}: row {} lacks counts", path.display(), rec.lang)))?;
        rows.push(LanguageAccuracy {
            lang: LanguageCode::new(&rec.lang)?,
            n,
            correct,
        });
    }
    EvalResult::from_rows(rows, languages)
}

pub fn write_predictions(path: &Path, predictions: &[Prediction]) -> Result<()> {
    io::write_jsonl(path, predictions)
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let text = io::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pred(lang: &str, id: usize, ok: bool) -> Prediction {
        Prediction {
            instance_id: format!("i{id}"),
            lang: LanguageCode::new(lang).unwrap(),
            predicted: if ok { "positive" } else { "negative" }.into(),
            gold: "positive".into(),
            scores: BTreeMap::new(),
        }
    }

    #[test]
    fn three_of_four() {
        let p: Vec<_> = (0..4).map(|i| pred("en", i, i != 2)).collect();
        assert_eq!(accuracy_per_language(&p, LanguageCode::english()).unwrap(), 0.75);
        assert!(accuracy_per_language(&p, LanguageCode::new("zh").unwrap()).is_err());
    }

    #[test]
    fn average_needs_every_language() {
        let set = LanguageSet::from_codes(&["en", "zh"]).unwrap();
        let mut m = BTreeMap::new();
        m.insert(LanguageCode::english(), 0.5);
        let err = average_accuracy(&m, &set).unwrap_err();
        assert!(err.to_string().contains("zh"));
        m.insert(LanguageCode::new("zh").unwrap(), 0.5);
        assert_eq!(average_accuracy(&m, &set).unwrap(), 0.5);
    }

    #[test]
    fn ties_go_to_first() {
        assert_eq!(argmax_first(&[-1.0, -1.0, -2.0]), Some(0));
        assert_eq!(argmax_first(&[-3.0, -1.0, -1.0]), Some(1));
        assert_eq!(argmax_first(&[f64::NAN, -1.0]), Some(1));
        assert_eq!(argmax_first(&[]), None);
    }

    #[test]
    fn baselines() {
        assert_eq!(random_baseline(TaskKind::Emotion), 0.5);
        assert_eq!(random_baseline(TaskKind::Paraphrase), 0.5);
        assert!((random_baseline(TaskKind::Nli) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn csv_round_trip() {
        let set = LanguageSet::from_codes(&["en", "zh"]).unwrap();
        let mut p: Vec<_> = (0..4).map(|i| pred("en", i, i != 2)).collect();
        p.extend((0..2).map(|i| pred("zh", i, true)));
        let r = EvalResult::from_predictions(&p, &set).unwrap();
        assert_eq!(r.average, 0.875);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("acc.csv");
        write_eval_csv(&path, &r).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.ends_with("average,,,87.50\n"), "{text}");
        assert_eq!(read_eval_csv(&path, &set).unwrap(), r);
    }
}
