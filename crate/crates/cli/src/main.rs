// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use xalign::config::{Experiment, ExperimentConfig};
use xalign::language::LanguageCode;
use xalign::par::Exec;
use xalign::pipeline;
use xalign::synth::{self, SynthConfig, SynthSpec};
use xalign::task::TaskKind;

#[derive(Parser)]
#[command(name = "xalign", version, about = "Question-alignment experiment runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override `run_root` from the config.
    #[arg(long)]
    run_root: Option<PathBuf>,
    /// Run instance work on the calling thread only.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct WithAdapter {
    #[command(flatten)]
    common: Common,
    /// Adapter produced by `tune`; the base model is used when absent.
    #[arg(long)]
    adapter: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample test sets, translation pairs and few-shot exemplars.
    BuildData(Common),
    /// Train a low-rank adapter on the translation corpus.
    Tune(Common),
    /// Constrained-decoding accuracy for every language.
    Eval(WithAdapter),
    /// Per-layer answer-token probabilities.
    Lens {
        #[command(flatten)]
        inner: WithAdapter,
        /// Trace languages whose target and latent answers share a first token.
        #[arg(long)]
        allow_overlap: bool,
    },
    /// PCA scatters and cross-language correlations of latents.
    Geometry(WithAdapter),
    /// Markdown summary of the run.
    Report(Common),
    /// Write a synthetic dataset and a matching config.
    Synth(SynthArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "emotion")]
    task: String,
    #[arg(long, value_delimiter = ',', default_value = "en,zh,de,sw")]
    languages: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "zh,de")]
    sources: Vec<String>,
    #[arg(long, default_value = "en")]
    target: String,
    #[arg(long, default_value_t = 100)]
    train: usize,
    #[arg(long, default_value_t = 40)]
    test: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn exec(common: &Common) -> Exec {
    if common.sequential {
        Exec::Sequential
    } else {
        Exec::default()
    }
}

fn experiment(common: &Common) -> Result<Experiment> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(root) = &common.run_root {
        cfg.run_root = std::path::absolute(root).with_context(|| root.display().to_string())?;
    }
    Ok(cfg.validate()?)
}

fn codes(list: &[String]) -> Result<Vec<LanguageCode>> {
    list.iter()
        .map(|c| LanguageCode::new(c).map_err(anyhow::Error::from))
        .collect()
}

fn run_synth(args: &SynthArgs) -> Result<()> {
    let task: TaskKind = args.task.parse()?;
    let languages = codes(&args.languages)?;
    let data = synth::generate(&SynthSpec {
        task,
        languages: languages.clone(),
        train: args.train,
        test: args.test,
        seed: args.seed,
    })?;
    synth::write_dataset(&args.out, &data)?;
    let lens_languages = synth::byte_disjoint_languages(task, &languages);
    let cfg = SynthConfig {
        task,
        universe: languages,
        sources: codes(&args.sources)?,
        target: LanguageCode::new(&args.target)?,
        train_per_direction: args.train / 2,
        test_per_language: args.test / 2,
        few_shot: 2,
        n_layers: 4,
        width: 64,
        epochs: 1,
        learning_rate: 1e-3,
        lens_instances: 8,
        lens_languages,
        geometry_layers: vec![2, 4],
    };
    let path = args.out.join("config.toml");
    std::fs::write(&path, cfg.to_toml()).with_context(|| path.display().to_string())?;
    println!("wrote {}", path.display());
    Ok(())
}

fn print_artifacts(run_dir: &Path) {
    println!("run directory: {}", run_dir.display());
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::BuildData(c) => {
            let exp = experiment(&c)?;
            let s = pipeline::cmd_build_data(&exp)?;
            println!(
                "{} training pairs over {} direction(s), {} test instances per language, {} few-shot exemplars, {} leakage hit(s)",
                s.train_pairs,
                s.directions.len(),
                s.test_per_language,
                s.few_shot_ids.len(),
                s.label_leakage.len()
            );
            print_artifacts(&exp.run_dir());
        }
        Command::Tune(c) => {
            let exp = experiment(&c)?;
            let r = pipeline::cmd_tune(&exp, exec(&c))?;
            println!(
                "{} steps, train loss {:.4} -> {:.4}",
                r.steps, r.initial_train_loss, r.final_train_loss
            );
            println!("adapter: {}", exp.run_dir().join(pipeline::ADAPTER).display());
        }
        Command::Eval(a) => {
            let exp = experiment(&a.common)?;
            let r = pipeline::cmd_eval(&exp, a.adapter.as_deref(), exec(&a.common))?;
            for row in &r.rows {
                println!("{}\t{}", row.lang, xalign::eval::percent(row.accuracy()));
            }
            println!("average\t{}", xalign::eval::percent(r.average));
            print_artifacts(&exp.run_dir());
        }
        Command::Lens { inner, allow_overlap } => {
            let exp = experiment(&inner.common)?;
            let traces = pipeline::cmd_lens(&exp, inner.adapter.as_deref(), allow_overlap, exec(&inner.common))?;
            println!("{} trace(s)", traces.len());
            print_artifacts(&exp.run_dir());
        }
        Command::Geometry(a) => {
            let exp = experiment(&a.common)?;
            pipeline::cmd_geometry(&exp, a.adapter.as_deref(), exec(&a.common))?;
            print_artifacts(&exp.run_dir());
        }
        Command::Report(c) => {
            let exp = experiment(&c)?;
            pipeline::cmd_report(&exp)?;
            println!("{}", exp.run_dir().join(pipeline::REPORT).display());
        }
        Command::Synth(s) => run_synth(&s)?,
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain()
        .find_map(|e| e.downcast_ref::<xalign::Error>())
        .map_or(4, |e| e.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
