// SPDX-License-Identifier: MIT OR Apache-2.0

//! The six experiment commands. Each reads its inputs from the run
//! directory, writes its artifacts there and records them in the manifest.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backend::ModelHandle;
use crate::config::Experiment;
use crate::corpus::{
    build_translation_pairs, label_leakage, load_pairs, load_task_dataset, mix_corpora, sample_indices, write_instances,
    write_pairs, Provenance, TaskInstance, TrainingCorpus,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate_batch, percent, read_eval_csv, write_eval_csv, write_predictions, EvalResult};
use crate::geometry::{
    collect_latents_layers, correlation_rows, geometry_study, read_correlation_csv, write_correlation_csv,
    write_scatter_csv, LanguagePrompts,
};
use crate::io;
use crate::language::LanguageCode;
use crate::lens::{aggregate_traces, build_tracked_sets, layer_probabilities, TraceFile};
use crate::manifest::RunManifest;
use crate::par::Exec;
use crate::prompting::{render_translation_corpus, select_few_shot, AnswerSet, OutputType, PromptSpec};
use crate::tuning::{apply_adapter, fine_tune, AdapterWeights, TuningReport};

pub const TRAIN_PAIRS: &str = "data/train.jsonl";
pub const CORPUS_META: &str = "data/corpus.json";
pub const BUILD_SUMMARY: &str = "data/summary.json";
pub const ADAPTER: &str = "tune/adapter.bin";
pub const TUNING_REPORT: &str = "tune/report.json";
pub const REPORT: &str = "report.md";

fn test_file(lang: LanguageCode) -> String {
    format!("data/test/{lang}.jsonl")
}

fn few_shot_file(lang: LanguageCode) -> String {
    format!("data/fewshot/{lang}.jsonl")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusMeta {
    pub provenance: Vec<Provenance>,
    pub shuffle_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildSummary {
    pub directions: Vec<Provenance>,
    pub train_pairs: usize,
    pub test_per_language: usize,
    pub few_shot_ids: Vec<String>,
    pub degenerate_pairs: usize,
    /// `(instance_id, surface)` hits of answer surfaces inside pair texts.
    pub label_leakage: Vec<(String, String)>,
}

/// Shared state of one command invocation.
struct Stage<'a> {
    exp: &'a Experiment,
    dir: std::path::PathBuf,
    manifest: RunManifest,
    name: &'static str,
    started: Instant,
}

impl<'a> Stage<'a> {
    fn open(exp: &'a Experiment, name: &'static str) -> Result<Self> {
        let dir = exp.run_dir();
        let model_id = exp.base_handle()?.model_id().to_string();
        let manifest = RunManifest::load_or_new(&dir, &exp.hash, &model_id, exp.config.seeds)?;
        Ok(Stage {
            exp,
            dir,
            manifest,
            name,
            started: Instant::now(),
        })
    }

    fn path(&self, rel: &str) -> std::path::PathBuf {
        self.dir.join(rel)
    }

    fn require(&self, rels: &[String]) -> Result<()> {
        let missing: Vec<String> = rels
            .iter()
            .filter(|r| !self.path(r).is_file())
            .cloned()
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::MissingArtifacts(missing))
        }
    }

    fn record(&mut self, rel: &str) -> Result<()> {
        self.manifest.record(&self.dir, rel, self.name)
    }

    fn close(mut self) -> Result<()> {
        self.manifest
            .finish_stage(self.name, self.started.elapsed().as_secs_f64());
        self.manifest.save(&self.dir)
    }
}

fn load_instances(path: &Path, exp: &Experiment, lang: LanguageCode) -> Result<Vec<TaskInstance>> {
    load_task_dataset(path, exp.task(), lang)
}

/// Sample the test split, the per-direction training pairs and the few-shot
/// exemplars, then write them under `data/`.
pub fn cmd_build_data(exp: &Experiment) -> Result<BuildSummary> {
    let mut st = Stage::open(exp, "build-data")?;
    let cfg = &exp.config;
    let seeds = cfg.seeds;
    let target = exp.target;

    let mut test_pools = BTreeMap::new();
    for lang in exp.universe.iter() {
        test_pools.insert(lang, load_instances(&cfg.data_path(&cfg.data.test, lang), exp, lang)?);
    }
    let ids_of = |v: &[TaskInstance]| v.iter().map(|i| i.id.clone()).collect::<HashSet<_>>();
    let mut common: HashSet<String> = ids_of(&test_pools[&target]);
    for pool in test_pools.values() {
        common = common.intersection(&ids_of(pool)).cloned().collect();
    }
    let candidates: Vec<&TaskInstance> = test_pools[&target]
        .iter()
        .filter(|i| common.contains(&i.id))
        .collect();
    let test_ids: Vec<String> = sample_indices(candidates.len(), cfg.data.test_per_language, seeds.data)?
        .into_iter()
        .map(|i| candidates[i].id.clone())
        .collect();
    let test_set: HashSet<String> = test_ids.iter().cloned().collect();

    let select = |pool: &[TaskInstance], ids: &[String]| -> Result<Vec<TaskInstance>> {
        let by_id: BTreeMap<&str, &TaskInstance> = pool.iter().map(|i| (i.id.as_str(), i)).collect();
        ids.iter()
            .map(|id| {
                by_id
                    .get(id.as_str())
                    .map(|i| (*i).clone())
                    .ok_or_else(|| Error::Alignment { orphans: vec![id.clone()] })
            })
            .collect()
    };

    // training pairs
    let mut train_pools = BTreeMap::new();
    for lang in exp.sources.iter().chain([&target]) {
        train_pools.insert(*lang, load_instances(&cfg.data_path(&cfg.data.train, *lang), exp, *lang)?);
    }
    let eligible = |langs: &[LanguageCode]| -> Vec<String> {
        let mut keep: HashSet<String> = ids_of(&train_pools[&target]);
        for l in langs {
            keep = keep.intersection(&ids_of(&train_pools[l])).cloned().collect();
        }
        train_pools[&target]
            .iter()
            .filter(|i| keep.contains(&i.id) && !test_set.contains(&i.id))
            .map(|i| i.id.clone())
            .collect()
    };
    let n_train = cfg.data.train_per_direction;
    let shared = if cfg.data.same_instances_across_directions {
        let pool = eligible(&exp.sources);
        let idx = sample_indices(pool.len(), n_train, seeds.data.wrapping_add(1))?;
        Some(idx.into_iter().map(|i| pool[i].clone()).collect::<Vec<_>>())
    } else {
        None
    };
    let mut per_direction = Vec::new();
    for (k, &src) in exp.sources.iter().enumerate() {
        let ids = match &shared {
            Some(ids) => ids.clone(),
            None => {
                let pool = eligible(&[src]);
                let idx = sample_indices(pool.len(), n_train, seeds.data.wrapping_add(2 + k as u64))?;
                idx.into_iter().map(|i| pool[i].clone()).collect()
            }
        };
        let pairs = build_translation_pairs(&select(&train_pools[&src], &ids)?, &select(&train_pools[&target], &ids)?)?;
        let rel = format!("data/pairs/{src}-{target}.jsonl");
        write_pairs(&st.path(&rel), &pairs)?;
        st.record(&rel)?;
        per_direction.push(pairs);
    }
    let corpus = mix_corpora(per_direction, seeds.data)?;
    write_pairs(&st.path(TRAIN_PAIRS), &corpus.pairs)?;
    st.record(TRAIN_PAIRS)?;
    io::write_json(
        &st.path(CORPUS_META),
        &CorpusMeta {
            provenance: corpus.provenance.clone(),
            shuffle_seed: corpus.shuffle_seed,
        },
    )?;
    st.record(CORPUS_META)?;

    for lang in exp.universe.iter() {
        let rel = test_file(lang);
        write_instances(&st.path(&rel), &select(&test_pools[&lang], &test_ids)?)?;
        st.record(&rel)?;
    }

    // few-shot exemplars: chosen once by id, rendered per language
    let train_ids: HashSet<String> = corpus.pairs.iter().map(|p| p.instance_id.clone()).collect();
    let exclusions: HashSet<String> = train_ids.union(&test_set).cloned().collect();
    let english = exp.universe.english();
    let pool: Vec<TaskInstance> = test_pools[&english]
        .iter()
        .filter(|i| common.contains(&i.id))
        .cloned()
        .collect();
    let shots = select_few_shot(&pool, cfg.prompting.few_shot, &exclusions, seeds.few_shot)?;
    let shot_ids: Vec<String> = shots.iter().map(|i| i.id.clone()).collect();
    for lang in exp.universe.iter() {
        let rel = few_shot_file(lang);
        write_instances(&st.path(&rel), &select(&test_pools[&lang], &shot_ids)?)?;
        st.record(&rel)?;
    }

    let template = exp.templates.translation(&cfg.prompting.template_id)?;
    let (_, stats) = render_translation_corpus(&corpus.pairs, template);
    let mut surfaces: BTreeSet<String> = exp.task().labels().iter().map(|s| s.to_string()).collect();
    for lang in exp.sources.iter().chain([&target]) {
        for ot in [OutputType::English, cfg.task.output_type] {
            if let Ok(set) = exp.surfaces.answer_surfaces(exp.task(), *lang, ot) {
                surfaces.extend(set.surface_strings().map(str::to_string));
            }
        }
    }
    let surface_refs: Vec<&str> = surfaces.iter().map(String::as_str).collect();
    let summary = BuildSummary {
        directions: corpus.provenance.clone(),
        train_pairs: corpus.len(),
        test_per_language: test_ids.len(),
        few_shot_ids: shot_ids,
        degenerate_pairs: stats.degenerate_pairs,
        label_leakage: label_leakage(&corpus.pairs, &surface_refs)
            .into_iter()
            .map(|(id, s)| (id, s.to_string()))
            .collect(),
    };
    io::write_json(&st.path(BUILD_SUMMARY), &summary)?;
    st.record(BUILD_SUMMARY)?;
    st.close()?;
    Ok(summary)
}

/// Load the mixed corpus written by [`cmd_build_data`].
pub fn load_corpus(run_dir: &Path) -> Result<TrainingCorpus> {
    let pairs_path = run_dir.join(TRAIN_PAIRS);
    let meta_path = run_dir.join(CORPUS_META);
    let missing: Vec<String> = [&pairs_path, &meta_path]
        .iter()
        .filter(|p| !p.is_file())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingArtifacts(missing));
    }
    let meta: CorpusMeta = serde_json::from_str(&io::read_to_string(&meta_path)?)?;
    Ok(TrainingCorpus {
        pairs: load_pairs(&pairs_path)?,
        provenance: meta.provenance,
        shuffle_seed: meta.shuffle_seed,
    })
}

pub fn cmd_tune(exp: &Experiment, exec: Exec) -> Result<TuningReport> {
    let mut st = Stage::open(exp, "tune")?;
    let corpus = load_corpus(&st.dir)?;
    let handle = exp.base_handle()?;
    let template = exp.templates.translation(&exp.config.prompting.template_id)?;
    let (adapter, report) = fine_tune(&handle, &corpus, &exp.tuning, template, exec)?;
    report.validate()?;
    adapter.save(&st.path(ADAPTER))?;
    st.record(ADAPTER)?;
    io::write_json(&st.path(TUNING_REPORT), &report)?;
    st.record(TUNING_REPORT)?;
    st.manifest
        .wall_time_secs
        .insert("tune.training".into(), report.wall_time_secs);
    st.close()?;
    Ok(report)
}

/// Base handle, or base plus the adapter at `adapter`; with its tag.
fn model(exp: &Experiment, adapter: Option<&Path>) -> Result<(ModelHandle, &'static str)> {
    let base = exp.base_handle()?;
    match adapter {
        None => Ok((base, "base")),
        Some(p) => {
            if !p.is_file() {
                return Err(Error::MissingArtifacts(vec![p.display().to_string()]));
            }
            Ok((apply_adapter(&base, AdapterWeights::load(p)?)?, "tuned"))
        }
    }
}

struct LanguageData {
    lang: LanguageCode,
    test: Vec<TaskInstance>,
    shots: Vec<TaskInstance>,
}

fn language_data(st: &Stage<'_>, langs: &[LanguageCode]) -> Result<Vec<LanguageData>> {
    let rels: Vec<String> = langs
        .iter()
        .flat_map(|&l| [test_file(l), few_shot_file(l)])
        .collect();
    st.require(&rels)?;
    langs
        .iter()
        .map(|&lang| {
            let test = load_instances(&st.path(&test_file(lang)), st.exp, lang)?;
            if test.is_empty() {
                return Err(Error::Data(format!("no test instances for language {lang}")));
            }
            Ok(LanguageData {
                lang,
                test,
                shots: load_instances(&st.path(&few_shot_file(lang)), st.exp, lang)?,
            })
        })
        .collect()
}

fn specs(exp: &Experiment, data: &LanguageData, answers: &AnswerSet, limit: Option<usize>) -> Result<Vec<PromptSpec>> {
    let n = limit.unwrap_or(usize::MAX).min(data.test.len());
    data.test[..n]
        .iter()
        .map(|inst| PromptSpec::new(inst.clone(), &data.shots, answers.clone(), &exp.config.prompting.template_id))
        .collect()
}

pub fn cmd_eval(exp: &Experiment, adapter: Option<&Path>, exec: Exec) -> Result<EvalResult> {
    let mut st = Stage::open(exp, "eval")?;
    let (handle, tag) = model(exp, adapter)?;
    let data = language_data(&st, exp.universe.members())?;
    let mut all = Vec::new();
    for d in &data {
        let answers = exp.surfaces.answer_surfaces(exp.task(), d.lang, exp.config.task.output_type)?;
        all.extend(specs(exp, d, &answers, None)?);
    }
    let predictions = evaluate_batch(&handle, &all, &exp.templates, exp.config.prompting.scoring, exec)?;
    let result = EvalResult::from_predictions(&predictions, &exp.universe)?;
    let pred_rel = format!("eval/{tag}/predictions.jsonl");
    let acc_rel = format!("eval/{tag}/accuracy.csv");
    write_predictions(&st.path(&pred_rel), &predictions)?;
    write_eval_csv(&st.path(&acc_rel), &result)?;
    st.record(&pred_rel)?;
    st.record(&acc_rel)?;
    st.close()?;
    Ok(result)
}

pub fn cmd_lens(exp: &Experiment, adapter: Option<&Path>, allow_overlap: bool, exec: Exec) -> Result<Vec<(LanguageCode, TraceFile)>> {
    let mut st = Stage::open(exp, "lens")?;
    let (handle, tag) = model(exp, adapter)?;
    let lens = &exp.config.lens;
    let data = language_data(&st, &exp.lens_languages)?;
    let mut out = Vec::new();
    for d in &data {
        let target = exp.surfaces.answer_surfaces(exp.task(), d.lang, lens.target_output_type)?;
        let latent = exp.surfaces.answer_surfaces(exp.task(), d.lang, lens.latent_output_type)?;
        let any_label = exp.task().labels()[0];
        let overlap = build_tracked_sets(&handle, &target, &latent, any_label)?.prefix_overlap;
        if overlap && !allow_overlap {
            return Err(Error::Overlap {
                lang: d.lang.to_string(),
            });
        }
        let prompts = specs(exp, d, &target, lens.instances)?;
        let traces = exec.try_map(&prompts, |spec| {
            let tracked = build_tracked_sets(&handle, &target, &latent, &spec.instance.gold)?;
            let prompt = exp.templates.render_task_prompt(spec)?;
            layer_probabilities(&handle, &prompt, &tracked)
        })?;
        let file = TraceFile::new(aggregate_traces(&traces)?, overlap);
        file.validate()?;
        let rel = format!("lens/{tag}/{}.json", d.lang);
        file.save(&st.path(&rel))?;
        st.record(&rel)?;
        out.push((d.lang, file));
    }
    st.close()?;
    Ok(out)
}

pub fn cmd_geometry(exp: &Experiment, adapter: Option<&Path>, exec: Exec) -> Result<()> {
    let mut st = Stage::open(exp, "geometry")?;
    let geo = &exp.config.geometry;
    if exp.geometry_languages.len() < 2 {
        return Err(Error::Config("geometry needs at least two languages".into()));
    }
    let data = language_data(&st, &exp.geometry_languages)?;
    let mut prompts = Vec::new();
    for d in &data {
        let answers = exp.surfaces.answer_surfaces(exp.task(), d.lang, exp.config.task.output_type)?;
        let mut sorted = d.test.clone();
        sorted.sort_by(|a, b| a.id.cmp(&b.id));
        let lang_data = LanguageData {
            lang: d.lang,
            test: sorted,
            shots: d.shots.clone(),
        };
        let rendered = specs(exp, &lang_data, &answers, geo.instances)?
            .iter()
            .map(|s| Ok((s.instance.id.clone(), exp.templates.render_task_prompt(s)?)))
            .collect::<Result<Vec<_>>>()?;
        prompts.push(LanguagePrompts {
            lang: d.lang,
            prompts: rendered,
        });
    }

    let mut models = vec![model(exp, None)?];
    if adapter.is_some() {
        models.push(model(exp, adapter)?);
    }
    let mut studies = Vec::new();
    for (handle, tag) in &models {
        let per_layer = collect_latents_layers(handle, &prompts, &exp.geometry_layers, geo.latent, exec)?;
        let mut by_layer = Vec::new();
        for (layer, matrices) in exp.geometry_layers.iter().zip(per_layer) {
            let study = geometry_study(&matrices)?;
            let rel = format!("geometry/scatter_layer{layer}_{tag}.csv");
            write_scatter_csv(&st.path(&rel), &study.points)?;
            st.record(&rel)?;
            by_layer.push(study);
        }
        studies.push(by_layer);
    }
    for (i, layer) in exp.geometry_layers.iter().enumerate() {
        let trained = studies.get(1).map(|s| &s[i].correlations);
        let rows = correlation_rows(&studies[0][i].correlations, trained)?;
        let rel = format!("geometry/correlation_layer{layer}.csv");
        write_correlation_csv(&st.path(&rel), &rows)?;
        st.record(&rel)?;
    }
    st.close()
}

/// Markdown summary of every artifact in the manifest.
pub fn cmd_report(exp: &Experiment) -> Result<String> {
    let mut st = Stage::open(exp, "report")?;
    let m = &st.manifest;
    let mut gaps = m.gaps(&st.dir);
    gaps.retain(|g| g != REPORT);
    let evals: Vec<String> = m.with_prefix("eval/").filter(|p| p.ends_with("accuracy.csv")).map(str::to_string).collect();
    let traces: Vec<String> = m.with_prefix("lens/").map(str::to_string).collect();
    let corrs: Vec<String> = m.with_prefix("geometry/correlation").map(str::to_string).collect();
    for (items, what) in [(&evals, "eval accuracy table"), (&traces, "lens traces"), (&corrs, "correlation tables")] {
        if items.is_empty() {
            gaps.push(format!("<{what}>"));
        }
    }
    if !gaps.is_empty() {
        return Err(Error::MissingArtifacts(gaps));
    }

    let langs: Vec<LanguageCode> = exp.universe.members().to_vec();
    let mut md = String::new();
    let cfg = &exp.config;
    writeln!(md, "# xalign report\n").unwrap();
    writeln!(
        md,
        "Run `{}`, model `{}`, task `{}`, output type `{}`, sources {} into `{}`.\n",
        &exp.hash[..16],
        m.model_id,
        exp.task(),
        cfg.task.output_type,
        exp.sources.iter().map(|s| format!("`{s}`")).collect::<Vec<_>>().join(", "),
        exp.target
    )
    .unwrap();

    let mut results = Vec::new();
    for rel in &evals {
        let tag = rel.trim_start_matches("eval/").trim_end_matches("/accuracy.csv").to_string();
        results.push((tag, read_eval_csv(&st.path(rel), &exp.universe)?));
    }
    writeln!(md, "## Accuracy by language\n").unwrap();
    let header: Vec<String> = langs.iter().map(|l| l.to_string()).collect();
    writeln!(md, "| model | {} |", header.join(" | ")).unwrap();
    writeln!(md, "|---|{}", "---:|".repeat(langs.len())).unwrap();
    for (tag, r) in &results {
        let cells: Vec<String> = langs.iter().map(|l| r.get(*l).map(percent).unwrap_or_default()).collect();
        writeln!(md, "| {tag} | {} |", cells.join(" | ")).unwrap();
    }
    writeln!(md, "\n## Average accuracy\n\n| model | average |\n|---|---:|").unwrap();
    for (tag, r) in &results {
        writeln!(md, "| {tag} | {} |", percent(r.average)).unwrap();
    }

    writeln!(md, "\n## Logit lens\n").unwrap();
    writeln!(md, "| trace | layers | last-layer target correct | last-layer latent correct | peak latent correct (layer) | overlap |").unwrap();
    writeln!(md, "|---|---:|---:|---:|---:|---|").unwrap();
    for rel in &traces {
        let t = TraceFile::load(&st.path(rel))?;
        let s = &t.series;
        let last = t.layers;
        let (peak_layer, peak) = s
            .latent_correct
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
        writeln!(
            md,
            "| `{rel}` | {} | {:.4} | {:.4} | {:.4} ({peak_layer}) | {} |",
            t.layers, s.target_correct[last], s.latent_correct[last], peak, t.prefix_overlap
        )
        .unwrap();
    }

    writeln!(md, "\n## Latent correlations").unwrap();
    for rel in &corrs {
        writeln!(md, "\n`{rel}`\n\n| pair | base | trained |\n|---|---:|---:|").unwrap();
        for row in read_correlation_csv(&st.path(rel))? {
            let trained = row.trained.map(|t| format!("{t:.4}")).unwrap_or_else(|| "-".into());
            writeln!(md, "| {} | {:.4} | {trained} |", row.pair, row.base).unwrap();
        }
    }

    io::write_bytes(&st.path(REPORT), md.as_bytes())?;
    st.record(REPORT)?;
    st.close()?;
    Ok(md)
}
