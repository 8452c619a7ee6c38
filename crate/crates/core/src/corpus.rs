// SPDX-License-Identifier: MIT OR Apache-2.0

//! Task datasets and answer-free translation corpora.
//!
//! Instances are loaded from already-translated JSONL files, one file per
//! (task, language). Translation pairs are built by matching instance ids
//! across two languages and keep only the rendered question text; gold labels
//! never enter a pair.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::language::LanguageCode;
use crate::task::TaskKind;

/// Separator between the two texts of an NLI or paraphrase question.
pub const TEXT_SEPARATOR: &str = "\n";

/// One labeled task item in one language.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub id: String,
    pub task: TaskKind,
    pub lang: LanguageCode,
    pub text_a: String,
    pub text_b: Option<String>,
    /// Canonical label id, see [`TaskKind::labels`].
    pub gold: String,
}

impl TaskInstance {
    /// The question as a single translation unit.
    pub fn question_text(&self) -> String {
        match &self.text_b {
            Some(b) => format!("{}{}{}", self.text_a, TEXT_SEPARATOR, b),
            None => self.text_a.clone(),
        }
    }
}

/// Source/target question pair with no answer attached.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParallelPair {
    pub instance_id: String,
    #[serde(rename = "src_lang")]
    pub source_lang: LanguageCode,
    #[serde(rename = "tgt_lang")]
    pub target_lang: LanguageCode,
    #[serde(rename = "src")]
    pub source_text: String,
    #[serde(rename = "tgt")]
    pub target_text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub source_lang: LanguageCode,
    pub target_lang: LanguageCode,
    pub count: usize,
}

/// Seeded mixture of translation directions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingCorpus {
    pub pairs: Vec<ParallelPair>,
    pub provenance: Vec<Provenance>,
    pub shuffle_seed: u64,
}

impl TrainingCorpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn instance_ids(&self) -> BTreeSet<&str> {
        self.pairs.iter().map(|p| p.instance_id.as_str()).collect()
    }
}

#[derive(Deserialize)]
struct RawInstance {
    id: String,
    task: String,
    lang: String,
    text_a: String,
    #[serde(default)]
    text_b: Option<String>,
    gold: String,
}

/// Load one JSONL task file. Blank lines are skipped; line numbers in errors
/// are 1-based.
pub fn load_task_dataset(
    path: &Path,
    task: TaskKind,
    lang: LanguageCode,
) -> Result<Vec<TaskInstance>> {
    let text = io::read_to_string(path)?;
    parse_task_dataset(&text, path, task, lang)
}

pub(crate) fn parse_task_dataset(
    text: &str,
    path: &Path,
    task: TaskKind,
    lang: LanguageCode,
) -> Result<Vec<TaskInstance>> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawInstance =
            serde_json::from_str(line).map_err(|e| parse_err(lineno, e.to_string()))?;
        let line_task: TaskKind = raw
            .task
            .parse()
            .map_err(|e: Error| parse_err(lineno, e.to_string()))?;
        if line_task != task {
            return Err(parse_err(
                lineno,
                format!("task {line_task} does not match expected {task}"),
            ));
        }
        let line_lang =
            LanguageCode::new(&raw.lang).map_err(|e| parse_err(lineno, e.to_string()))?;
        if line_lang != lang {
            return Err(parse_err(
                lineno,
                format!("language {line_lang} does not match expected {lang}"),
            ));
        }
        if !task.has_label(&raw.gold) {
            return Err(Error::Label {
                path: path.to_path_buf(),
                line: lineno,
                label: raw.gold,
                task: task.to_string(),
            });
        }
        if task.two_text() != raw.text_b.is_some() {
            return Err(parse_err(
                lineno,
                format!(
                    "task {task} {} text_b",
                    if task.two_text() { "requires" } else { "forbids" }
                ),
            ));
        }
        if !seen.insert(raw.id.clone()) {
            return Err(Error::DuplicateId {
                path: path.to_path_buf(),
                id: raw.id,
            });
        }
        out.push(TaskInstance {
            id: raw.id,
            task,
            lang,
            text_a: raw.text_a,
            text_b: raw.text_b,
            gold: raw.gold,
        });
    }
    Ok(out)
}

fn single_language(items: &[TaskInstance], side: &str) -> Result<Option<(LanguageCode, TaskKind)>> {
    let Some(first) = items.first() else {
        return Ok(None);
    };
    if let Some(bad) = items
        .iter()
        .find(|i| i.lang != first.lang || i.task != first.task)
    {
        return Err(Error::Data(format!(
            "{side} instances mix languages or tasks ({}/{} vs {}/{})",
            first.lang, first.task, bad.lang, bad.task
        )));
    }
    Ok(Some((first.lang, first.task)))
}

/// Match two translations of the same instances by id and emit one
/// answer-free pair per id, in source order.
pub fn build_translation_pairs(
    source: &[TaskInstance],
    target: &[TaskInstance],
) -> Result<Vec<ParallelPair>> {
    let src = single_language(source, "source")?;
    let tgt = single_language(target, "target")?;
    if let (Some((sl, st)), Some((tl, tt))) = (src, tgt) {
        if sl == tl {
            return Err(Error::Data(format!(
                "source and target are both {sl}; a translation pair needs two languages"
            )));
        }
        if st != tt {
            return Err(Error::Data(format!("task mismatch: {st} vs {tt}")));
        }
    }

    let target_by_id: HashMap<&str, &TaskInstance> =
        target.iter().map(|t| (t.id.as_str(), t)).collect();
    let source_ids: HashSet<&str> = source.iter().map(|s| s.id.as_str()).collect();

    let mut orphans: BTreeSet<String> = source
        .iter()
        .filter(|s| !target_by_id.contains_key(s.id.as_str()))
        .map(|s| s.id.clone())
        .collect();
    orphans.extend(
        target
            .iter()
            .filter(|t| !source_ids.contains(t.id.as_str()))
            .map(|t| t.id.clone()),
    );
    if !orphans.is_empty() {
        return Err(Error::Alignment {
            orphans: orphans.into_iter().collect(),
        });
    }

    let mut pairs = Vec::with_capacity(source.len());
    for s in source {
        let t = target_by_id[s.id.as_str()];
        let (source_text, target_text) = (s.question_text(), t.question_text());
        if source_text.is_empty() || target_text.is_empty() {
            return Err(Error::Data(format!("instance {} has an empty text", s.id)));
        }
        pairs.push(ParallelPair {
            instance_id: s.id.clone(),
            source_lang: s.lang,
            target_lang: t.lang,
            source_text,
            target_text,
        });
    }
    Ok(pairs)
}

/// Concatenate per-direction corpora and permute them with a seeded shuffle.
pub fn mix_corpora(corpora: Vec<Vec<ParallelPair>>, seed: u64) -> Result<TrainingCorpus> {
    if corpora.iter().all(|c| c.is_empty()) {
        return Err(Error::Data("no translation pairs to mix".into()));
    }
    let mut provenance = Vec::new();
    let mut pairs = Vec::new();
    for corpus in corpora {
        let Some(first) = corpus.first() else {
            continue;
        };
        let dir = (first.source_lang, first.target_lang);
        if corpus
            .iter()
            .any(|p| (p.source_lang, p.target_lang) != dir)
        {
            return Err(Error::Data(format!(
                "corpus {}->{} is not homogeneous in direction",
                dir.0, dir.1
            )));
        }
        provenance.push(Provenance {
            source_lang: dir.0,
            target_lang: dir.1,
            count: corpus.len(),
        });
        pairs.extend(corpus);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pairs.shuffle(&mut rng);
    Ok(TrainingCorpus {
        pairs,
        provenance,
        shuffle_seed: seed,
    })
}

/// Seeded sample without replacement; the sample keeps input order.
pub fn sample_subsets(instances: &[TaskInstance], n: usize, seed: u64) -> Result<Vec<TaskInstance>> {
    Ok(sample_indices(instances.len(), n, seed)?
        .into_iter()
        .map(|i| instances[i].clone())
        .collect())
}

pub(crate) fn sample_indices(len: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    if n > len {
        return Err(Error::Data(format!(
            "cannot sample {n} items from a pool of {len}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, len, n).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Pairs whose text contains one of the given answer surfaces, as
/// `(instance_id, surface)`.
pub fn label_leakage<'a>(pairs: &[ParallelPair], surfaces: &[&'a str]) -> Vec<(String, &'a str)> {
    let mut hits = Vec::new();
    for p in pairs {
        for s in surfaces {
            if p.source_text.contains(s) || p.target_text.contains(s) {
                hits.push((p.instance_id.clone(), *s));
            }
        }
    }
    hits
}

pub fn load_pairs(path: &Path) -> Result<Vec<ParallelPair>> {
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

pub fn write_pairs(path: &Path, pairs: &[ParallelPair]) -> Result<()> {
    io::write_jsonl(path, pairs)
}

pub fn write_instances(path: &Path, instances: &[TaskInstance]) -> Result<()> {
    io::write_jsonl(path, instances)
}

/// Per-label counts, keyed by canonical label.
pub fn label_histogram(instances: &[TaskInstance]) -> BTreeMap<&str, usize> {
    let mut h = BTreeMap::new();
    for i in instances {
        *h.entry(i.gold.as_str()).or_insert(0) += 1;
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn lc(c: &str) -> LanguageCode {
        LanguageCode::new(c).unwrap()
    }

    fn inst(id: &str, lang: &str, text: &str, gold: &str) -> TaskInstance {
        TaskInstance {
            id: id.into(),
            task: TaskKind::Emotion,
            lang: lc(lang),
            text_a: text.into(),
            text_b: None,
            gold: gold.into(),
        }
    }

    fn line(id: &str, gold: &str) -> String {
        format!(
            r#"{{"id":"{id}","task":"emotion","lang":"en","text_a":"text {id}","text_b":null,"gold":"{gold}"}}"#
        )
    }

    #[test]
    fn parses_in_order() {
        let text = (0..500)
            .map(|i| line(&format!("e{i}"), if i % 2 == 0 { "positive" } else { "negative" }))
            .collect::<Vec<_>>()
            .join("\n");
        let out = parse_task_dataset(&text, &PathBuf::from("x"), TaskKind::Emotion, lc("en"))
            .unwrap();
        assert_eq!(out.len(), 500);
        assert_eq!(out[3].id, "e3");
    }

    #[test]
    fn empty_file_is_empty() {
        let out =
            parse_task_dataset("", &PathBuf::from("x"), TaskKind::Emotion, lc("en")).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn duplicate_id_rejected() {
        let text = format!("{}\n{}", line("a", "positive"), line("a", "negative"));
        let err = parse_task_dataset(&text, &PathBuf::from("x"), TaskKind::Emotion, lc("en"))
            .unwrap_err();
        assert!(matches!(err, Error::DuplicateId { ref id, .. } if id == "a"));
    }

    #[test]
    fn malformed_line_names_line_number() {
        let text = format!("{}\n{{not json", line("a", "positive"));
        let err = parse_task_dataset(&text, &PathBuf::from("f"), TaskKind::Emotion, lc("en"))
            .unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn unknown_label_rejected() {
        let text = line("a", "happy");
        let err = parse_task_dataset(&text, &PathBuf::from("f"), TaskKind::Emotion, lc("en"))
            .unwrap_err();
        assert!(matches!(err, Error::Label { line: 1, .. }));
    }

    #[test]
    fn text_b_presence_enforced() {
        let text = r#"{"id":"n","task":"nli","lang":"en","text_a":"p","text_b":null,"gold":"neutral"}"#;
        assert!(parse_task_dataset(text, &PathBuf::from("f"), TaskKind::Nli, lc("en")).is_err());
    }

    #[test]
    fn pairs_drop_gold_and_match_ids() {
        let zh = vec![inst("1", "zh", "好", "positive"), inst("2", "zh", "坏", "negative")];
        let en = vec![inst("2", "en", "bad", "negative"), inst("1", "en", "good", "positive")];
        let pairs = build_translation_pairs(&zh, &en).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[0].instance_id, "1");
        assert_eq!(pairs[0].target_text, "good");
        let json = serde_json::to_string(&pairs[0]).unwrap();
        assert!(!json.contains("positive"));
    }

    #[test]
    fn one_orphan_named() {
        let zh = vec![
            inst("1", "zh", "a", "positive"),
            inst("2", "zh", "b", "positive"),
            inst("3", "zh", "c", "negative"),
        ];
        let en = vec![inst("1", "en", "a", "positive"), inst("2", "en", "b", "positive")];
        match build_translation_pairs(&zh, &en).unwrap_err() {
            Error::Alignment { orphans } => assert_eq!(orphans, vec!["3".to_string()]),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn same_language_rejected() {
        let en = vec![inst("1", "en", "a", "positive")];
        assert!(build_translation_pairs(&en, &en).is_err());
    }

    #[test]
    fn two_text_question_uses_separator() {
        let i = TaskInstance {
            id: "x".into(),
            task: TaskKind::Nli,
            lang: lc("en"),
            text_a: "premise".into(),
            text_b: Some("hypothesis".into()),
            gold: "neutral".into(),
        };
        assert_eq!(i.question_text(), "premise\nhypothesis");
    }

    #[test]
    fn mixing_rejects_empty_and_heterogeneous() {
        assert!(mix_corpora(vec![], 1).is_err());
        assert!(mix_corpora(vec![vec![]], 1).is_err());
        let a = ParallelPair {
            instance_id: "1".into(),
            source_lang: lc("zh"),
            target_lang: lc("en"),
            source_text: "x".into(),
            target_text: "y".into(),
        };
        let mut b = a.clone();
        b.source_lang = lc("de");
        assert!(mix_corpora(vec![vec![a, b]], 1).is_err());
    }

    #[test]
    fn sampling_bounds() {
        let pool: Vec<_> = (0..10).map(|i| inst(&i.to_string(), "en", "t", "positive")).collect();
        assert!(sample_subsets(&pool, 11, 0).is_err());
        let all = sample_subsets(&pool, 10, 3).unwrap();
        assert_eq!(all, pool);
        assert!(sample_subsets(&pool, 0, 3).unwrap().is_empty());
    }
}
