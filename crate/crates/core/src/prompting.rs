// SPDX-License-Identifier: MIT OR Apache-2.0

//! Prompt rendering and answer surface forms.
//!
//! Two registries drive everything here: a surface registry
//! (task → output type → language → label → surface) and a template
//! registry holding the translation instruction and the per-task few-shot
//! layout. Both ship with built-in defaults and can be replaced from JSON.

use std::collections::{BTreeMap, HashSet};
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{ParallelPair, TaskInstance};
use crate::error::{Error, Result};
use crate::io;
use crate::language::LanguageCode;
use crate::task::TaskKind;

const BUILTIN_SURFACES: &str = include_str!("../data/surfaces.json");
const BUILTIN_TEMPLATES: &str = include_str!("../data/templates.json");

/// Default number of in-context exemplars.
pub const DEFAULT_FEW_SHOT: usize = 4;

/// Registry key that applies to every language.
const ANY_LANGUAGE: &str = "*";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputType {
    /// English label words for every input language.
    English,
    /// Label words in the input language.
    SameLanguage,
    /// Words unrelated to the task ("ox", "horse").
    TaskAgnostic,
}

impl OutputType {
    pub fn as_str(self) -> &'static str {
        match self {
            OutputType::English => "english",
            OutputType::SameLanguage => "same_language",
            OutputType::TaskAgnostic => "task_agnostic",
        }
    }
}

impl std::fmt::Display for OutputType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Label surfaces for one (task, language, output type).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerSet {
    pub task: TaskKind,
    pub output_type: OutputType,
    pub lang: LanguageCode,
    /// `(canonical label, surface)` in canonical label order.
    pub surfaces: Vec<(String, String)>,
}

impl AnswerSet {
    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.surfaces.iter().map(|(l, _)| l.as_str())
    }

    pub fn surface_strings(&self) -> impl Iterator<Item = &str> {
        self.surfaces.iter().map(|(_, s)| s.as_str())
    }

    pub fn surface_for(&self, label: &str) -> Option<&str> {
        self.surfaces
            .iter()
            .find(|(l, _)| l == label)
            .map(|(_, s)| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.surfaces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surfaces.is_empty()
    }

    /// True when some surface tokenizes to a prefix of another surface.
    pub fn prefix_overlap(&self, tokenize: impl Fn(&str) -> Vec<u32>) -> bool {
        let toks: Vec<Vec<u32>> = self.surface_strings().map(&tokenize).collect();
        toks.iter().enumerate().any(|(i, a)| {
            toks.iter()
                .enumerate()
                .any(|(j, b)| i != j && b.len() >= a.len() && b[..a.len()] == a[..])
        })
    }
}

type RawSurfaces = BTreeMap<TaskKind, BTreeMap<OutputType, BTreeMap<String, BTreeMap<String, String>>>>;

#[derive(Debug, Clone)]
pub struct SurfaceRegistry {
    entries: RawSurfaces,
}

impl SurfaceRegistry {
    pub fn builtin() -> Self {
        Self::from_json(BUILTIN_SURFACES).expect("builtin surface registry parses")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let entries: RawSurfaces = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("surface registry: {e}")))?;
        Ok(SurfaceRegistry { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&io::read_to_string(path)?)
    }

    /// Resolve the surfaces of one (task, language, output type) triple.
    pub fn answer_surfaces(
        &self,
        task: TaskKind,
        lang: LanguageCode,
        output_type: OutputType,
    ) -> Result<AnswerSet> {
        let missing = || Error::Registry(format!("({task}, {lang}, {output_type})"));
        let by_lang = self
            .entries
            .get(&task)
            .and_then(|m| m.get(&output_type))
            .ok_or_else(missing)?;
        let table = by_lang
            .get(lang.as_str())
            .or_else(|| by_lang.get(ANY_LANGUAGE))
            .ok_or_else(missing)?;

        let mut surfaces = Vec::with_capacity(task.label_arity());
        for label in task.labels() {
            let s = table.get(*label).ok_or_else(|| {
                Error::Registry(format!("({task}, {lang}, {output_type}) label {label}"))
            })?;
            if s.is_empty() {
                return Err(Error::Config(format!(
                    "empty surface for ({task}, {lang}, {output_type}) label {label}"
                )));
            }
            surfaces.push((label.to_string(), s.clone()));
        }
        let distinct: HashSet<&str> = surfaces.iter().map(|(_, s)| s.as_str()).collect();
        if distinct.len() != surfaces.len() {
            return Err(Error::Config(format!(
                "surfaces for ({task}, {lang}, {output_type}) are not pairwise distinct"
            )));
        }
        Ok(AnswerSet {
            task,
            output_type,
            lang,
            surfaces,
        })
    }
}

/// Few-shot layout for one task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskTemplate {
    /// May contain `{labels}`.
    pub instruction: String,
    /// May contain `{text_a}` and `{text_b}`.
    pub question: String,
    pub answer_prefix: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TemplateRegistry {
    /// Translation instructions with `{src}`, `{tgt}`, `{question}`.
    pub translation: BTreeMap<String, String>,
    pub task: BTreeMap<String, BTreeMap<TaskKind, TaskTemplate>>,
}

impl TemplateRegistry {
    pub fn builtin() -> Self {
        Self::from_json(BUILTIN_TEMPLATES).expect("builtin template registry parses")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("template registry: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&io::read_to_string(path)?)
    }

    pub fn translation(&self, template_id: &str) -> Result<&str> {
        self.translation
            .get(template_id)
            .map(String::as_str)
            .ok_or_else(|| Error::Registry(format!("translation template {template_id:?}")))
    }

    pub fn task_template(&self, template_id: &str, task: TaskKind) -> Result<&TaskTemplate> {
        self.task
            .get(template_id)
            .and_then(|m| m.get(&task))
            .ok_or_else(|| Error::Registry(format!("task template {template_id:?} for {task}")))
    }

    pub fn render_task_prompt(&self, spec: &PromptSpec) -> Result<String> {
        let tpl = self.task_template(&spec.template_id, spec.instance.task)?;
        Ok(render_task_prompt(spec, tpl))
    }
}

/// Substitute `{name}` placeholders in one left-to-right pass. Substituted
/// text is never rescanned; unknown placeholders are kept verbatim. Returns
/// the byte range of the first substitution of `track`, if any.
fn fill(template: &str, vars: &[(&str, &str)], track: Option<&str>) -> (String, Option<Range<usize>>) {
    let mut out = String::with_capacity(template.len() + 64);
    let mut tracked = None;
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let hit = after.find('}').and_then(|close| {
            let key = &after[..close];
            vars.iter()
                .find(|(k, _)| *k == key)
                .map(|(k, v)| (close, *k, *v))
        });
        match hit {
            Some((close, key, value)) => {
                if tracked.is_none() && Some(key) == track {
                    tracked = Some(out.len()..out.len() + value.len());
                }
                out.push_str(value);
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    (out, tracked)
}

/// Prompt/completion pair for translation tuning. Loss applies to the
/// completion only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SupervisedExample {
    pub prompt: String,
    pub completion: String,
    /// Byte range of the source text inside `prompt`.
    pub source_range: Range<usize>,
    /// Source and target texts were identical.
    pub degenerate: bool,
}

pub fn render_translation_example(pair: &ParallelPair, template: &str) -> SupervisedExample {
    let (prompt, range) = fill(
        template,
        &[
            ("src", pair.source_lang.name()),
            ("tgt", pair.target_lang.name()),
            ("question", &pair.source_text),
        ],
        Some("question"),
    );
    SupervisedExample {
        source_range: range.unwrap_or(0..0),
        prompt,
        completion: pair.target_text.clone(),
        degenerate: pair.source_text == pair.target_text,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderStats {
    pub examples: usize,
    pub degenerate_pairs: usize,
}

/// Render a whole corpus, counting degenerate (untranslated) pairs.
pub fn render_translation_corpus(
    pairs: &[ParallelPair],
    template: &str,
) -> (Vec<SupervisedExample>, RenderStats) {
    let examples: Vec<_> = pairs
        .iter()
        .map(|p| render_translation_example(p, template))
        .collect();
    let stats = RenderStats {
        examples: examples.len(),
        degenerate_pairs: examples.iter().filter(|e| e.degenerate).count(),
    };
    (examples, stats)
}

/// Pick `k` in-context exemplars outside `exclusions`, balanced across
/// labels to within one.
pub fn select_few_shot(
    pool: &[TaskInstance],
    k: usize,
    exclusions: &HashSet<String>,
    seed: u64,
) -> Result<Vec<TaskInstance>> {
    if k == 0 {
        return Ok(Vec::new());
    }
    let candidates: Vec<&TaskInstance> =
        pool.iter().filter(|i| !exclusions.contains(&i.id)).collect();
    if candidates.len() < k {
        return Err(Error::Data(format!(
            "few-shot pool has {} usable instances, need {k}",
            candidates.len()
        )));
    }
    let task = candidates[0].task;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups: Vec<Vec<&TaskInstance>> = task
        .labels()
        .iter()
        .map(|l| candidates.iter().copied().filter(|i| i.gold == *l).collect())
        .collect();
    for g in &mut groups {
        g.shuffle(&mut rng);
    }

    // Fill the smallest quota first; canonical label order breaks ties.
    let mut quota = vec![0usize; groups.len()];
    for _ in 0..k {
        let next = (0..groups.len())
            .filter(|&g| quota[g] < groups[g].len())
            .min_by_key(|&g| quota[g])
            .expect("pool size checked above");
        quota[next] += 1;
    }
    let mut picked: Vec<TaskInstance> = groups
        .iter()
        .zip(&quota)
        .flat_map(|(g, &q)| g[..q].iter().map(|i| (*i).clone()))
        .collect();
    picked.shuffle(&mut rng);
    Ok(picked)
}

/// Everything needed to render one evaluation prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSpec {
    pub instance: TaskInstance,
    /// Exemplars with the surface of their gold label.
    pub few_shot: Vec<(TaskInstance, String)>,
    pub answer_set: AnswerSet,
    pub template_id: String,
}

impl PromptSpec {
    pub fn new(
        instance: TaskInstance,
        exemplars: &[TaskInstance],
        answer_set: AnswerSet,
        template_id: impl Into<String>,
    ) -> Result<Self> {
        if answer_set.task != instance.task {
            return Err(Error::InvalidInput(format!(
                "answer set is for {} but instance {} is {}",
                answer_set.task, instance.id, instance.task
            )));
        }
        let mut few_shot = Vec::with_capacity(exemplars.len());
        for ex in exemplars {
            if ex.task != instance.task {
                return Err(Error::InvalidInput(format!(
                    "exemplar {} has task {}, query has {}",
                    ex.id, ex.task, instance.task
                )));
            }
            if ex.id == instance.id {
                return Err(Error::InvalidInput(format!(
                    "exemplar {} is the query instance itself",
                    ex.id
                )));
            }
            let surface = answer_set.surface_for(&ex.gold).ok_or_else(|| {
                Error::InvalidInput(format!("exemplar label {} not in answer set", ex.gold))
            })?;
            few_shot.push((ex.clone(), surface.to_string()));
        }
        Ok(PromptSpec {
            instance,
            few_shot,
            answer_set,
            template_id: template_id.into(),
        })
    }
}

fn render_question(tpl: &TaskTemplate, inst: &TaskInstance) -> String {
    fill(
        &tpl.question,
        &[
            ("text_a", &inst.text_a),
            ("text_b", inst.text_b.as_deref().unwrap_or("")),
        ],
        None,
    )
    .0
}

/// Instruction, exemplars with answers, then the query with an empty answer
/// slot. The returned string is the scoring context for the label surfaces.
pub fn render_task_prompt(spec: &PromptSpec, tpl: &TaskTemplate) -> String {
    let labels = spec
        .answer_set
        .surface_strings()
        .collect::<Vec<_>>()
        .join(", ");
    let mut out = fill(&tpl.instruction, &[("labels", &labels)], None).0;
    out.push_str("\n\n");
    for (ex, surface) in &spec.few_shot {
        out.push_str(&render_question(tpl, ex));
        out.push('\n');
        out.push_str(&tpl.answer_prefix);
        out.push_str(surface);
        out.push_str("\n\n");
    }
    out.push_str(&render_question(tpl, &spec.instance));
    out.push('\n');
    out.push_str(&tpl.answer_prefix);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::language::LanguageSet;

    fn lc(c: &str) -> LanguageCode {
        LanguageCode::new(c).unwrap()
    }

    fn inst(id: &str, gold: &str) -> TaskInstance {
        TaskInstance {
            id: id.into(),
            task: TaskKind::Emotion,
            lang: lc("en"),
            text_a: format!("review {id}"),
            text_b: None,
            gold: gold.into(),
        }
    }

    #[test]
    fn english_surfaces_for_hindi() {
        let reg = SurfaceRegistry::builtin();
        let set = reg
            .answer_surfaces(TaskKind::Emotion, lc("hi"), OutputType::English)
            .unwrap();
        assert_eq!(set.surface_strings().collect::<Vec<_>>(), ["positive", "negative"]);
    }

    #[test]
    fn task_agnostic_is_ox_horse() {
        let reg = SurfaceRegistry::builtin();
        for lang in LanguageSet::default_registry().iter() {
            let set = reg
                .answer_surfaces(TaskKind::Emotion, lang, OutputType::TaskAgnostic)
                .unwrap();
            assert_eq!(set.surface_for("positive"), Some("ox"));
            assert_eq!(set.surface_for("negative"), Some("horse"));
        }
    }

    #[test]
    fn nli_has_three_surfaces() {
        let reg = SurfaceRegistry::builtin();
        let set = reg
            .answer_surfaces(TaskKind::Nli, lc("en"), OutputType::English)
            .unwrap();
        assert_eq!(set.len(), 3);
    }

    #[test]
    fn every_builtin_entry_is_complete_and_english_uniform() {
        let reg = SurfaceRegistry::builtin();
        for task in TaskKind::ALL {
            let en = reg
                .answer_surfaces(task, lc("en"), OutputType::English)
                .unwrap();
            for lang in LanguageSet::default_registry().iter() {
                for ot in [OutputType::English, OutputType::SameLanguage, OutputType::TaskAgnostic] {
                    let set = reg.answer_surfaces(task, lang, ot).unwrap();
                    assert_eq!(set.len(), task.label_arity());
                }
                let e = reg.answer_surfaces(task, lang, OutputType::English).unwrap();
                assert_eq!(e.surfaces, en.surfaces);
            }
        }
    }

    #[test]
    fn missing_entry_names_triple() {
        let reg = SurfaceRegistry::from_json(r#"{"emotion": {"english": {"en": {"positive": "p", "negative": "n"}}}}"#).unwrap();
        let err = reg
            .answer_surfaces(TaskKind::Emotion, lc("de"), OutputType::English)
            .unwrap_err();
        assert!(err.to_string().contains("(emotion, de, english)"), "{err}");
    }

    #[test]
    fn duplicate_surfaces_rejected() {
        let reg = SurfaceRegistry::from_json(r#"{"emotion": {"english": {"*": {"positive": "p", "negative": "p"}}}}"#).unwrap();
        assert!(reg
            .answer_surfaces(TaskKind::Emotion, lc("de"), OutputType::English)
            .is_err());
    }

    #[test]
    fn prefix_overlap_detection() {
        let set = AnswerSet {
            task: TaskKind::Emotion,
            output_type: OutputType::English,
            lang: lc("en"),
            surfaces: vec![("positive".into(), "pos".into()), ("negative".into(), "posx".into())],
        };
        let bytes = |s: &str| s.bytes().map(u32::from).collect::<Vec<_>>();
        assert!(set.prefix_overlap(bytes));
        let reg = SurfaceRegistry::builtin();
        let en = reg
            .answer_surfaces(TaskKind::Emotion, lc("en"), OutputType::English)
            .unwrap();
        assert!(!en.prefix_overlap(bytes));
    }

    #[test]
    fn fill_is_single_pass() {
        let (s, r) = fill(
            "{src}->{tgt}: {question} {missing}",
            &[("src", "A"), ("tgt", "B"), ("question", "{src}")],
            Some("question"),
        );
        assert_eq!(s, "A->B: {src} {missing}");
        assert_eq!(&s[r.unwrap()], "{src}");
    }

    #[test]
    fn translation_example_names_both_languages() {
        let pair = ParallelPair {
            instance_id: "1".into(),
            source_lang: lc("zh"),
            target_lang: lc("en"),
            source_text: "这个很好".into(),
            target_text: "this is good".into(),
        };
        let reg = TemplateRegistry::builtin();
        let ex = render_translation_example(&pair, reg.translation("default").unwrap());
        assert!(ex.prompt.contains("Chinese") && ex.prompt.contains("English"));
        assert_eq!(ex.completion, "this is good");
        assert_eq!(&ex.prompt[ex.source_range.clone()], "这个很好");
        assert!(!ex.prompt.ends_with(' '));
        assert!(!ex.degenerate);
    }

    #[test]
    fn degenerate_pairs_counted() {
        let mk = |id: &str, s: &str, t: &str| ParallelPair {
            instance_id: id.into(),
            source_lang: lc("de"),
            target_lang: lc("en"),
            source_text: s.into(),
            target_text: t.into(),
        };
        let pairs = vec![mk("1", "Hallo", "Hello"), mk("2", "OK", "OK")];
        let (ex, stats) = render_translation_corpus(&pairs, "{src}: {question}\n{tgt}:\n");
        assert_eq!(ex.len(), 2);
        assert_eq!(stats.degenerate_pairs, 1);
    }

    #[test]
    fn few_shot_balanced_and_excluding() {
        let pool: Vec<_> = (0..20)
            .map(|i| inst(&format!("p{i}"), if i % 3 == 0 { "positive" } else { "negative" }))
            .collect();
        let excl: HashSet<String> = ["p0", "p3"].iter().map(|s| s.to_string()).collect();
        let shots = select_few_shot(&pool, 4, &excl, 7).unwrap();
        assert_eq!(shots.len(), 4);
        assert_eq!(shots.iter().filter(|s| s.gold == "positive").count(), 2);
        assert!(shots.iter().all(|s| !excl.contains(&s.id)));
        assert_eq!(shots, select_few_shot(&pool, 4, &excl, 7).unwrap());
    }

    #[test]
    fn few_shot_edge_cases() {
        let pool: Vec<_> = (0..4).map(|i| inst(&format!("p{i}"), "positive")).collect();
        assert!(select_few_shot(&pool, 0, &HashSet::new(), 1).unwrap().is_empty());
        let all: HashSet<String> = pool.iter().map(|p| p.id.clone()).collect();
        assert!(select_few_shot(&pool, 1, &all, 1).is_err());
        // Only one label available: still fills k.
        assert_eq!(select_few_shot(&pool, 3, &HashSet::new(), 1).unwrap().len(), 3);
    }

    #[test]
    fn zero_shot_prompt_is_instruction_and_query() {
        let reg = TemplateRegistry::builtin();
        let answers = SurfaceRegistry::builtin()
            .answer_surfaces(TaskKind::Emotion, lc("en"), OutputType::English)
            .unwrap();
        let spec = PromptSpec::new(inst("q", "positive"), &[], answers, "default").unwrap();
        let p = reg.render_task_prompt(&spec).unwrap();
        assert_eq!(
            p,
            "Classify the sentiment of each review. Answer with one of: positive, negative.\n\nReview: review q\nAnswer: "
        );
    }

    #[test]
    fn prompt_spec_rejects_self_exemplar() {
        let answers = SurfaceRegistry::builtin()
            .answer_surfaces(TaskKind::Emotion, lc("en"), OutputType::English)
            .unwrap();
        let q = inst("q", "positive");
        assert!(PromptSpec::new(q.clone(), std::slice::from_ref(&q), answers, "default").is_err());
    }

    #[test]
    fn exemplar_answers_come_from_answer_set() {
        let reg = TemplateRegistry::builtin();
        let answers = SurfaceRegistry::builtin()
            .answer_surfaces(TaskKind::Emotion, lc("en"), OutputType::TaskAgnostic)
            .unwrap();
        let shots = vec![inst("a", "positive"), inst("b", "negative")];
        let spec = PromptSpec::new(inst("q", "negative"), &shots, answers.clone(), "default").unwrap();
        let p = reg.render_task_prompt(&spec).unwrap();
        let answer_lines: Vec<&str> = p
            .lines()
            .filter_map(|l| l.strip_prefix("Answer: "))
            .filter(|l| !l.is_empty())
            .collect();
        assert_eq!(answer_lines.len(), 2);
        for a in answer_lines {
            assert!(answers.surface_strings().any(|s| s == a));
        }
        assert!(p.ends_with("Review: review q\nAnswer: "));
        assert_eq!(p, reg.render_task_prompt(&spec).unwrap());
    }
}
