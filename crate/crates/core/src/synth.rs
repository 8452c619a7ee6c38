// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic multilingual task data for smoke runs and tests.
//!
//! Every language gets its own pseudo-lexicon over a shared set of concepts,
//! so the same instance id carries the same meaning in every language. Words
//! never contain any answer surface known to the builtin registry.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{write_instances, TaskInstance};
use crate::error::{Error, Result};
use crate::language::{LanguageCode, LanguageSet};
use crate::prompting::{OutputType, SurfaceRegistry};
use crate::task::TaskKind;

const CONSONANTS: &[u8] = b"bfgklmprstvz";
const VOWELS: &[u8] = b"eiu";
const POSITIVE: usize = 8;
const NEGATIVE: usize = 8;
const NOUNS: usize = 24;
/// Concept index of the negation word.
const NOT: usize = POSITIVE + NEGATIVE + NOUNS;
const CONCEPTS: usize = NOT + 1;

fn is_positive(c: usize) -> bool {
    c < POSITIVE
}

fn noun(i: usize) -> usize {
    POSITIVE + NEGATIVE + i
}

fn fnv(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Every surface string of every task, output type and registered language.
pub fn all_surfaces(registry: &SurfaceRegistry) -> Vec<String> {
    let mut out = std::collections::BTreeSet::new();
    for task in TaskKind::ALL {
        out.extend(task.labels().iter().map(|s| s.to_string()));
        for lang in LanguageSet::default_registry().iter() {
            for ot in [OutputType::English, OutputType::SameLanguage, OutputType::TaskAgnostic] {
                if let Ok(set) = registry.answer_surfaces(task, lang, ot) {
                    out.extend(set.surface_strings().map(str::to_string));
                }
            }
        }
    }
    out.into_iter().collect()
}

/// Languages of `langs` other than English whose same-language answers share
/// no first byte with the English answers of `task`.
pub fn byte_disjoint_languages(task: TaskKind, langs: &[LanguageCode]) -> Vec<LanguageCode> {
    let registry = SurfaceRegistry::builtin();
    let first_bytes = |lang, ot| -> Option<std::collections::BTreeSet<u8>> {
        let set = registry.answer_surfaces(task, lang, ot).ok()?;
        Some(set.surface_strings().filter_map(|s| s.bytes().next()).collect())
    };
    langs
        .iter()
        .copied()
        .filter(|&l| l != LanguageCode::english())
        .filter(|&l| match (first_bytes(l, OutputType::SameLanguage), first_bytes(l, OutputType::English)) {
            (Some(a), Some(b)) => a.is_disjoint(&b),
            _ => false,
        })
        .collect()
}

/// Pseudo-word per concept for one language.
#[derive(Debug, Clone)]
pub struct Lexicon {
    pub lang: LanguageCode,
    words: Vec<String>,
    reversed: bool,
}

impl Lexicon {
    pub fn new(lang: LanguageCode, seed: u64, forbidden: &[String]) -> Self {
        let lang_seed = seed ^ fnv(lang.as_str().as_bytes());
        let mut rng = ChaCha8Rng::seed_from_u64(lang_seed);
        let mut words: Vec<String> = Vec::with_capacity(CONCEPTS);
        while words.len() < CONCEPTS {
            let syllables = rng.random_range(2..=3);
            let mut w = String::new();
            for _ in 0..syllables {
                w.push(CONSONANTS[rng.random_range(0..CONSONANTS.len())] as char);
                w.push(VOWELS[rng.random_range(0..VOWELS.len())] as char);
            }
            if !words.contains(&w) && !forbidden.iter().any(|f| w.contains(f.as_str())) {
                words.push(w);
            }
        }
        Lexicon {
            lang,
            words,
            reversed: lang_seed & 1 == 1,
        }
    }

    pub fn render(&self, concepts: &[usize]) -> String {
        let mut ws: Vec<&str> = concepts.iter().map(|&c| self.words[c].as_str()).collect();
        if self.reversed {
            ws.reverse();
        }
        ws.join(" ")
    }
}

/// Language-neutral content of one instance.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Meaning {
    a: Vec<usize>,
    b: Option<Vec<usize>>,
    gold: &'static str,
}

fn sample_nouns(rng: &mut ChaCha8Rng, n: usize, exclude: &[usize]) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..NOUNS).map(noun).filter(|c| !exclude.contains(c)).collect();
    pool.shuffle(rng);
    pool.truncate(n);
    pool
}

fn meaning(task: TaskKind, rng: &mut ChaCha8Rng, k: usize) -> Meaning {
    let labels = task.labels();
    let gold = labels[k % labels.len()];
    match task {
        TaskKind::Emotion => {
            let n = rng.random_range(2..=3);
            let mut a = sample_nouns(rng, n, &[]);
            let word = if gold == "positive" {
                rng.random_range(0..POSITIVE)
            } else {
                POSITIVE + rng.random_range(0..NEGATIVE)
            };
            debug_assert_eq!(is_positive(word), gold == "positive");
            let at = rng.random_range(0..=a.len());
            a.insert(at, word);
            Meaning { a, b: None, gold }
        }
        TaskKind::Paraphrase => {
            let a = sample_nouns(rng, 3, &[]);
            let b = if gold == "paraphrase" {
                let mut b = a.clone();
                b.rotate_left(1);
                b
            } else {
                let mut b = a[..1].to_vec();
                b.extend(sample_nouns(rng, 2, &a));
                b
            };
            Meaning { a, b: Some(b), gold }
        }
        TaskKind::Nli => {
            let a = sample_nouns(rng, 3, &[]);
            let b = match gold {
                "entailment" => a[..2].to_vec(),
                "contradiction" => vec![NOT, a[0], a[1]],
                _ => sample_nouns(rng, 2, &a),
            };
            Meaning { a, b: Some(b), gold }
        }
    }
}

/// Sizes and seed of a synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub task: TaskKind,
    pub languages: Vec<LanguageCode>,
    /// Instances in every language's training pool.
    pub train: usize,
    /// Instances in every language's test pool.
    pub test: usize,
    pub seed: u64,
}

/// `(train, test)` pools per language; ids align across languages.
pub type SynthData = BTreeMap<LanguageCode, (Vec<TaskInstance>, Vec<TaskInstance>)>;

pub fn generate(spec: &SynthSpec) -> Result<SynthData> {
    if spec.languages.is_empty() {
        return Err(Error::InvalidInput("no languages to synthesise".into()));
    }
    let forbidden = all_surfaces(&SurfaceRegistry::builtin());
    let lexicons: Vec<Lexicon> = spec
        .languages
        .iter()
        .map(|&l| Lexicon::new(l, spec.seed, &forbidden))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut draw = |prefix: &str, n: usize| -> Vec<(String, Meaning)> {
        (0..n)
            .map(|k| (format!("{prefix}-{k:05}"), meaning(spec.task, &mut rng, k)))
            .collect()
    };
    let train = draw("tr", spec.train);
    let test = draw("te", spec.test);
    let mut out = SynthData::new();
    for lex in &lexicons {
        let render = |items: &[(String, Meaning)]| -> Vec<TaskInstance> {
            items
                .iter()
                .map(|(id, m)| TaskInstance {
                    id: id.clone(),
                    task: spec.task,
                    lang: lex.lang,
                    text_a: lex.render(&m.a),
                    text_b: m.b.as_ref().map(|b| lex.render(b)),
                    gold: m.gold.to_string(),
                })
                .collect()
        };
        out.insert(lex.lang, (render(&train), render(&test)));
    }
    Ok(out)
}

/// Write `train/{lang}.jsonl` and `test/{lang}.jsonl` under `dir`.
pub fn write_dataset(dir: &Path, data: &SynthData) -> Result<()> {
    for (lang, (train, test)) in data {
        write_instances(&dir.join(format!("train/{lang}.jsonl")), train)?;
        write_instances(&dir.join(format!("test/{lang}.jsonl")), test)?;
    }
    Ok(())
}

/// Experiment layout written next to a synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub task: TaskKind,
    pub universe: Vec<LanguageCode>,
    pub sources: Vec<LanguageCode>,
    pub target: LanguageCode,
    pub train_per_direction: usize,
    pub test_per_language: usize,
    pub few_shot: usize,
    pub n_layers: usize,
    pub width: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub lens_instances: usize,
    /// Empty means every language but English.
    pub lens_languages: Vec<LanguageCode>,
    pub geometry_layers: Vec<usize>,
}

fn quoted(langs: &[LanguageCode]) -> String {
    langs.iter().map(|l| format!("\"{l}\"")).collect::<Vec<_>>().join(", ")
}

impl SynthConfig {
    pub fn to_toml(&self) -> String {
        let mut s = String::new();
        let layers = self.geometry_layers.iter().map(usize::to_string).collect::<Vec<_>>().join(", ");
        writeln!(s, "run_root = \"runs\"\n").unwrap();
        writeln!(
            s,
            "[model]\nbackend = \"toy\"\nn_layers = {}\nwidth = {}\nn_heads = 4\nmlp_width = {}\n",
            self.n_layers,
            self.width,
            self.width * 4
        )
        .unwrap();
        writeln!(
            s,
            "[languages]\nuniverse = [{}]\nsources = [{}]\ntarget = \"{}\"\n",
            quoted(&self.universe),
            quoted(&self.sources),
            self.target
        )
        .unwrap();
        writeln!(s, "[task]\nkind = \"{}\"\noutput_type = \"english\"\n", self.task).unwrap();
        writeln!(
            s,
            "[data]\ntrain = \"train/{{lang}}.jsonl\"\ntest = \"test/{{lang}}.jsonl\"\ntrain_per_direction = {}\ntest_per_language = {}\n",
            self.train_per_direction, self.test_per_language
        )
        .unwrap();
        writeln!(s, "[prompting]\nfew_shot = {}\nscoring = \"sum\"\n", self.few_shot).unwrap();
        writeln!(s, "[seeds]\ndata = 1\ntraining = 2\nfew_shot = 3\n").unwrap();
        writeln!(
            s,
            "[tuning]\nepochs = {}\nbatch_size = 8\nlearning_rate = {:e}\n",
            self.epochs, self.learning_rate
        )
        .unwrap();
        writeln!(s, "[lens]\ninstances = {}", self.lens_instances).unwrap();
        if !self.lens_languages.is_empty() {
            writeln!(s, "languages = [{}]", quoted(&self.lens_languages)).unwrap();
        }
        writeln!(s).unwrap();
        writeln!(s, "[geometry]\nlayers = [{layers}]").unwrap();
        s
    }
}
