// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;

use xalign::backend::{byte_detokenize, byte_tokenize, softmax, Backend, ModelHandle, ToyConfig, ToyTransformer};
use xalign::config::ExperimentConfig;
use xalign::corpus::{build_translation_pairs, mix_corpora, TaskInstance};
use xalign::eval::{argmax_first, EvalResult, Prediction};
use xalign::geometry::{
    collect_latents, pca_fit, pca_project, pearson_1d, read_correlation_csv, write_correlation_csv, CorrelationRow,
    CorrelationTable, LanguagePrompts, LatentKind,
};
use xalign::language::{LanguageCode, LanguageSet};
use xalign::lens::{aggregate_traces, lens_distributions, LayerTrace};
use xalign::par::Exec;
use xalign::task::TaskKind;
use xalign::tuning::{apply_adapter, split_train_val, AdapterWeights, TuningConfig};

fn lc(c: &str) -> LanguageCode {
    LanguageCode::new(c).unwrap()
}

fn small_toy(seed: u64) -> ModelHandle {
    ModelHandle::new(Arc::new(
        ToyTransformer::new(ToyConfig {
            n_layers: 2,
            width: 16,
            n_heads: 2,
            mlp_width: 32,
            seed,
            ..ToyConfig::default()
        })
        .unwrap(),
    ))
}

fn instances(lang: &str, texts: &[String]) -> Vec<TaskInstance> {
    texts
        .iter()
        .enumerate()
        .map(|(i, t)| TaskInstance {
            id: format!("q{i}"),
            task: TaskKind::Emotion,
            lang: lc(lang),
            text_a: t.clone(),
            text_b: None,
            gold: ["positive", "negative"][i % 2].into(),
        })
        .collect()
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-10.0f64..10.0, cols), rows)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn argmax_first_picks_earliest_maximum(scores in prop::collection::vec(-5i32..5, 1..8)) {
        let s: Vec<f64> = scores.iter().map(|&x| x as f64).collect();
        let best = argmax_first(&s).unwrap();
        let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(s[best], max);
        prop_assert!(s[..best].iter().all(|&x| x < max));
    }

    #[test]
    fn argmax_ignores_constant_shift(scores in prop::collection::vec(-50.0f64..0.0, 2..6), shift in -100.0f64..100.0) {
        let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
        let a = argmax_first(&scores).unwrap();
        let b = argmax_first(&shifted).unwrap();
        // a shift can merge near-ties by rounding; the winner must still be maximal
        prop_assert!((scores[b] - scores[a]).abs() <= 1e-9 * (1.0 + shift.abs()));
    }

    #[test]
    fn accuracy_ignores_prediction_order(outcomes in prop::collection::vec(any::<bool>(), 4..40), seed in any::<u64>()) {
        let langs = LanguageSet::from_codes(&["en", "zh"]).unwrap();
        let mut preds: Vec<Prediction> = outcomes
            .iter()
            .enumerate()
            .map(|(i, &ok)| Prediction {
                instance_id: format!("i{i}"),
                lang: if i % 2 == 0 { lc("en") } else { lc("zh") },
                predicted: if ok { "positive" } else { "negative" }.into(),
                gold: "positive".into(),
                scores: BTreeMap::new(),
            })
            .collect();
        let a = EvalResult::from_predictions(&preds, &langs).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        rand::seq::SliceRandom::shuffle(preds.as_mut_slice(), &mut rng);
        let b = EvalResult::from_predictions(&preds, &langs).unwrap();
        prop_assert_eq!(a.per_language(), b.per_language());
        prop_assert_eq!(a.average, b.average);
        let mean = a.per_language().values().sum::<f64>() / 2.0;
        prop_assert!((a.average - mean).abs() < 1e-15);
    }

    #[test]
    fn pearson_is_bounded_symmetric_and_sign_aware(
        xs in prop::collection::vec(-100.0f64..100.0, 3..30),
        noise in prop::collection::vec(-100.0f64..100.0, 30),
        a in 0.01f64..50.0,
        b in -50.0f64..50.0,
    ) {
        let ys: Vec<f64> = xs.iter().zip(&noise).map(|(x, n)| x + n).collect();
        prop_assume!(xs.iter().any(|&v| (v - xs[0]).abs() > 1e-6));
        prop_assume!(ys.iter().any(|&v| (v - ys[0]).abs() > 1e-6));
        let r = pearson_1d(&xs, &ys).unwrap();
        prop_assert!((-1.0..=1.0).contains(&r));
        prop_assert!((r - pearson_1d(&ys, &xs).unwrap()).abs() < 1e-12);
        let neg: Vec<f64> = ys.iter().map(|v| -v).collect();
        prop_assert!((pearson_1d(&xs, &neg).unwrap() + r).abs() < 1e-12);
        let affine: Vec<f64> = ys.iter().map(|v| a * v + b).collect();
        prop_assert!((pearson_1d(&xs, &affine).unwrap() - r).abs() < 1e-9);
    }

    #[test]
    fn correlation_table_is_symmetric_with_unit_diagonal(rows in matrix(3, 8)) {
        let scores: Vec<(LanguageCode, Vec<f64>)> = ["en", "zh", "sw"].iter().zip(rows).map(|(l, r)| (lc(l), r)).collect();
        prop_assume!(scores.iter().all(|(_, r)| r.iter().any(|&v| (v - r[0]).abs() > 1e-6)));
        let t = CorrelationTable::from_scores(4, &scores).unwrap();
        for (a, _) in &scores {
            prop_assert!((t.get(*a, *a).unwrap() - 1.0).abs() < 1e-12);
            for (b, _) in &scores {
                prop_assert_eq!(t.get(*a, *b), t.get(*b, *a));
            }
        }
        prop_assert_eq!(t.pairs().len(), 6);
    }

    #[test]
    fn correlation_csv_round_trips_bit_exactly(values in prop::collection::vec((-1.0f64..=1.0, prop::option::of(-1.0f64..=1.0)), 1..10)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        let rows: Vec<CorrelationRow> = values
            .iter()
            .enumerate()
            .map(|(i, (b, t))| CorrelationRow { pair: format!("p{i}"), base: *b, trained: *t })
            .collect();
        write_correlation_csv(&path, &rows).unwrap();
        let back = read_correlation_csv(&path).unwrap();
        for (x, y) in rows.iter().zip(&back) {
            prop_assert_eq!(x.base.to_bits(), y.base.to_bits());
            prop_assert_eq!(x.trained.map(f64::to_bits), y.trained.map(f64::to_bits));
        }
    }

    #[test]
    fn pca_components_orthonormal_and_ordered(rows in matrix(12, 5)) {
        let model = match pca_fit(&rows, 2) {
            Ok(m) => m,
            Err(_) => return Ok(()),
        };
        for a in 0..2 {
            for b in 0..2 {
                let dot: f64 = model.components[a].iter().zip(&model.components[b]).map(|(x, y)| x * y).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                prop_assert!((dot - want).abs() < 1e-8);
            }
        }
        prop_assert!(model.variances[0] >= model.variances[1]);
        prop_assert!(model.explained.iter().sum::<f64>() <= 1.0 + 1e-12);
        let origin = pca_project(&model, std::slice::from_ref(&model.mean)).unwrap();
        prop_assert!(origin[0].iter().all(|v| v.abs() < 1e-9));
        let once = pca_project(&model, &rows).unwrap();
        prop_assert_eq!(once, pca_project(&model, &rows).unwrap());
    }

    #[test]
    fn pca_reconstruction_matches_best_rank_k(rows in matrix(10, 4), dims in 1usize..=2) {
        let model = match pca_fit(&rows, dims) {
            Ok(m) => m,
            Err(_) => return Ok(()),
        };
        let scores = pca_project(&model, &rows).unwrap();
        let mut err = 0.0;
        for (row, s) in rows.iter().zip(&scores) {
            for (j, x) in row.iter().enumerate() {
                let rec = model.mean[j] + (0..dims).map(|k| s[k] * model.components[k][j]).sum::<f64>();
                err += (x - rec).powi(2);
            }
        }
        // truncated-SVD error of the centred data is the optimum over rank-k maps
        let centred = DMatrix::from_fn(10, 4, |i, j| rows[i][j] - model.mean[j]);
        let mut sv: Vec<f64> = centred.svd(false, false).singular_values.iter().copied().collect();
        sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let optimum: f64 = sv[dims..].iter().map(|s| s * s).sum();
        prop_assert!((err - optimum).abs() <= 1e-8 * (1.0 + optimum));
    }

    #[test]
    fn mixing_conserves_and_is_deterministic(n_zh in 1usize..12, n_de in 1usize..12, seed in any::<u64>()) {
        let texts = |n: usize, tag: &str| (0..n).map(|i| format!("{tag} {i}")).collect::<Vec<_>>();
        let zh = build_translation_pairs(&instances("zh", &texts(n_zh, "zh")), &instances("en", &texts(n_zh, "en"))).unwrap();
        let de = build_translation_pairs(&instances("de", &texts(n_de, "de")), &instances("en", &texts(n_de, "en"))).unwrap();
        let a = mix_corpora(vec![zh.clone(), de.clone()], seed).unwrap();
        let b = mix_corpora(vec![zh.clone(), de.clone()], seed).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.provenance.iter().map(|p| p.count).sum::<usize>(), a.len());
        prop_assert_eq!(a.len(), n_zh + n_de);
        let mut ids: Vec<(String, LanguageCode)> = a.pairs.iter().map(|p| (p.instance_id.clone(), p.source_lang)).collect();
        ids.sort();
        let mut want: Vec<(String, LanguageCode)> = zh.iter().chain(&de).map(|p| (p.instance_id.clone(), p.source_lang)).collect();
        want.sort();
        prop_assert_eq!(ids, want);
        for p in &a.pairs {
            prop_assert!(p.source_lang != p.target_lang);
            prop_assert!(!p.source_text.contains("positive") && !p.source_text.contains("negative"));
        }
    }

    #[test]
    fn byte_tokens_round_trip(text in "\\PC{0,40}") {
        prop_assert_eq!(byte_detokenize(&byte_tokenize(&text).ids), text);
    }

    #[test]
    fn train_val_split_partitions(n in 2usize..500, frac in 0.01f64..0.49, seed in any::<u64>()) {
        let (train, val) = split_train_val(n, frac, seed);
        let mut all: Vec<usize> = train.iter().chain(&val).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert!(train.windows(2).all(|w| w[0] < w[1]) && val.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn learning_rate_stays_within_peak(step in 0usize..200, total in 1usize..200, warmup in 0usize..20) {
        let cfg = TuningConfig { warmup_steps: warmup, ..TuningConfig::default() };
        let lr = cfg.learning_rate_at(step.min(total), total);
        prop_assert!((0.0..=cfg.learning_rate * (1.0 + 1e-12)).contains(&lr));
    }

    #[test]
    fn aggregated_traces_stay_valid(cells in prop::collection::vec(prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 3), 1..6)) {
        let traces: Vec<LayerTrace> = cells
            .iter()
            .map(|layers| {
                let all: Vec<f64> = layers.iter().map(|(a, _)| *a).collect();
                let correct: Vec<f64> = layers.iter().map(|(a, f)| a * f).collect();
                LayerTrace { target_correct: correct.clone(), latent_correct: correct, target_all: all.clone(), latent_all: all }
            })
            .collect();
        for t in &traces {
            prop_assert!(t.validate().is_ok());
        }
        prop_assert!(aggregate_traces(&traces).unwrap().validate().is_ok());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn lens_layers_are_distributions(prompt in "[ -~]{1,40}", seed in 0u64..4) {
        let handle = small_toy(seed);
        let view = lens_distributions(&handle, &prompt).unwrap();
        for p in view.layers.iter().chain([&view.output]) {
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
        let tv: f64 = view.layers.last().unwrap().iter().zip(&view.output).map(|(a, b)| (a - b).abs()).sum::<f64>() / 2.0;
        prop_assert!(tv <= 1e-6);
    }

    #[test]
    fn scoring_is_additive(prompt in "[a-z ]{1,20}", a in "[a-z]{1,6}", b in "[a-z]{1,6}") {
        let handle = small_toy(1);
        let whole = handle.score_completion(&prompt, &format!("{a}{b}")).unwrap();
        let split = handle.score_completion(&prompt, &a).unwrap() + handle.score_completion(&format!("{prompt}{a}"), &b).unwrap();
        prop_assert!((whole - split).abs() < 1e-6);
    }

    #[test]
    fn zero_adapter_is_neutral(prompt in "[ -~]{1,30}", completion in "[a-z]{1,8}", seed in any::<u64>()) {
        let handle = small_toy(2);
        let zero = AdapterWeights::init(handle.backend().as_ref(), 4, 8.0, seed, String::new());
        let tuned = apply_adapter(&handle, zero).unwrap();
        let a = handle.score_completion(&prompt, &completion).unwrap();
        let b = tuned.score_completion(&prompt, &completion).unwrap();
        prop_assert!((a - b).abs() <= 1e-9);
        let ta = handle.forward_trace(&prompt).unwrap();
        let tb = tuned.forward_trace(&prompt).unwrap();
        for (x, y) in ta.hidden.iter().flatten().zip(tb.hidden.iter().flatten()) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
    }

    #[test]
    fn toy_reference_is_reproducible(prompt in "[ -~]{1,30}") {
        let a = ToyTransformer::new(ToyConfig::default()).unwrap();
        let b = ToyTransformer::new(ToyConfig::default()).unwrap();
        let ids = byte_tokenize(&prompt).ids;
        let fa = a.forward(&ids, None).unwrap();
        let fb = b.forward(&ids, None).unwrap();
        prop_assert_eq!(fa.hidden.len(), 5);
        prop_assert_eq!(fa.final_logits.len(), 256);
        prop_assert_eq!(fa, fb);
    }

    #[test]
    fn config_hash_ignores_key_order(seed in 0..i64::MAX as u64, perm in Just(()).prop_perturb(|_, mut rng| {
        let mut sections = vec!["model", "languages", "task", "data"];
        for i in (1..sections.len()).rev() {
            sections.swap(i, rng.random_range(0..=i));
        }
        sections
    })) {
        let section = |name: &str| match name {
            "model" => format!("[model]\nseed = {seed}\nbackend = \"toy\"\n"),
            "languages" => "[languages]\nsources = [\"zh\"]\nuniverse = [\"en\", \"zh\"]\n".to_string(),
            "task" => "[task]\nkind = \"nli\"\n".to_string(),
            _ => "[data]\ntest_per_language = 3\ntrain = \"a/{lang}\"\ntrain_per_direction = 2\ntest = \"b/{lang}\"\n".to_string(),
        };
        let canonical: String = ["model", "languages", "task", "data"].iter().map(|s| section(s)).collect();
        let shuffled: String = perm.iter().map(|s| section(s)).collect();
        let a = ExperimentConfig::from_toml(&canonical, std::path::Path::new(".")).unwrap();
        let b = ExperimentConfig::from_toml(&shuffled, std::path::Path::new(".")).unwrap();
        prop_assert_eq!(a.hash(), b.hash());
    }
}

#[test]
fn latents_at_last_layer_are_final_logits() {
    let handle = small_toy(5);
    let prompts: Vec<LanguagePrompts> = ["en", "zh", "de", "sw"]
        .iter()
        .map(|l| LanguagePrompts {
            lang: lc(l),
            prompts: (0..50).rev().map(|i| (format!("id{i:02}"), format!("{l} prompt {i}"))).collect(),
        })
        .collect();
    let mats = collect_latents(&handle, &prompts, handle.n_layers(), LatentKind::Logits, Exec::Sequential).unwrap();
    assert_eq!(mats.len(), 4);
    for m in &mats {
        assert_eq!(m.rows.len(), 50);
        assert!(m.instance_ids.windows(2).all(|w| w[0] < w[1]));
        for (id, row) in m.instance_ids.iter().zip(&m.rows) {
            let i: usize = id[2..].parse().unwrap();
            let trace = handle.forward_trace(&format!("{} prompt {i}", m.lang)).unwrap();
            assert_eq!(row, &trace.final_logits);
        }
    }
    let mut broken = prompts.clone();
    broken[2].prompts.pop();
    assert!(matches!(
        collect_latents(&handle, &broken, 1, LatentKind::Logits, Exec::Sequential),
        Err(xalign::Error::Alignment { .. })
    ));
}

#[test]
fn parallel_and_sequential_latents_agree() {
    let handle = small_toy(6);
    let prompts = vec![
        LanguagePrompts { lang: lc("en"), prompts: (0..8).map(|i| (format!("{i}"), format!("text {i}"))).collect() },
        LanguagePrompts { lang: lc("zh"), prompts: (0..8).map(|i| (format!("{i}"), format!("wenben {i}"))).collect() },
    ];
    let seq = collect_latents(&handle, &prompts, 1, LatentKind::Hidden, Exec::Sequential).unwrap();
    let par = collect_latents(&handle, &prompts, 1, LatentKind::Hidden, Exec::default()).unwrap();
    assert_eq!(seq, par);
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let p = softmax(&[3.0; 8]);
    assert!(p.iter().all(|&x| (x - 0.125).abs() < 1e-15));
}
