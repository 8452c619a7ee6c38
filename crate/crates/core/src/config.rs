// SPDX-License-Identifier: MIT OR Apache-2.0

//! Declarative experiment configuration (TOML).
//!
//! Every knob left open by the method has a named key with a default.
//! [`ExperimentConfig::hash`] covers everything except `run_root`, so the
//! same experiment lands in the same run directory wherever it is run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backend::{ModelHandle, RandomLogitBackend, ToyConfig, ToyTransformer};
use crate::error::{Error, Result};
use crate::eval::ScoringMode;
use crate::geometry::LatentKind;
use crate::io;
use crate::language::{LanguageCode, LanguageSet, DEFAULT_LANGUAGES};
use crate::prompting::{OutputType, SurfaceRegistry, TemplateRegistry, DEFAULT_FEW_SHOT};
use crate::task::TaskKind;
use crate::tuning::TuningConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Toy,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backend: BackendKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_layers")]
    pub n_layers: usize,
    #[serde(default = "d_width")]
    pub width: usize,
    #[serde(default = "d_heads")]
    pub n_heads: usize,
    #[serde(default = "d_mlp")]
    pub mlp_width: usize,
    #[serde(default = "d_context")]
    pub max_context: usize,
    /// Serialized toy weights; overrides the shape keys when set.
    #[serde(default)]
    pub weights: Option<PathBuf>,
}

fn d_layers() -> usize {
    4
}
fn d_width() -> usize {
    64
}
fn d_heads() -> usize {
    4
}
fn d_mlp() -> usize {
    256
}
fn d_context() -> usize {
    1024
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LanguageConfig {
    /// Defaults to the twenty-language registry.
    #[serde(default)]
    pub universe: Option<Vec<String>>,
    #[serde(default = "d_en")]
    pub english: String,
    pub sources: Vec<String>,
    #[serde(default = "d_en")]
    pub target: String,
}

fn d_en() -> String {
    "en".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub kind: TaskKind,
    #[serde(default = "d_output")]
    pub output_type: OutputType,
}

fn d_output() -> OutputType {
    OutputType::English
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Path pattern with a `{lang}` placeholder.
    pub train: String,
    /// Path pattern with a `{lang}` placeholder; also the few-shot pool.
    pub test: String,
    pub train_per_direction: usize,
    pub test_per_language: usize,
    #[serde(default = "d_true")]
    pub same_instances_across_directions: bool,
}

fn d_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptingConfig {
    pub few_shot: usize,
    pub template_id: String,
    pub scoring: ScoringMode,
    pub surfaces: Option<PathBuf>,
    pub templates: Option<PathBuf>,
}

impl Default for PromptingConfig {
    fn default() -> Self {
        PromptingConfig {
            few_shot: DEFAULT_FEW_SHOT,
            template_id: "default".into(),
            scoring: ScoringMode::Sum,
            surfaces: None,
            templates: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub data: u64,
    pub training: u64,
    pub few_shot: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LensConfig {
    /// Defaults to every non-English language of the universe.
    pub languages: Option<Vec<String>>,
    pub target_output_type: OutputType,
    pub latent_output_type: OutputType,
    /// Cap on traced test instances per language.
    pub instances: Option<usize>,
}

impl Default for LensConfig {
    fn default() -> Self {
        LensConfig {
            languages: None,
            target_output_type: OutputType::SameLanguage,
            latent_output_type: OutputType::English,
            instances: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    /// Defaults to the last layer.
    pub layers: Vec<usize>,
    /// Defaults to the whole universe.
    pub languages: Option<Vec<String>>,
    pub latent: LatentKind,
    pub instances: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "d_run_root")]
    pub run_root: PathBuf,
    pub model: ModelConfig,
    pub languages: LanguageConfig,
    pub task: TaskConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub prompting: PromptingConfig,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default)]
    pub tuning: TuningConfig,
    #[serde(default)]
    pub lens: LensConfig,
    #[serde(default)]
    pub geometry: GeometryConfig,
    /// Directory relative paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn d_run_root() -> PathBuf {
    "runs".into()
}

/// Validated, resolved view of a config.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub universe: LanguageSet,
    pub sources: Vec<LanguageCode>,
    pub target: LanguageCode,
    pub lens_languages: Vec<LanguageCode>,
    pub geometry_languages: Vec<LanguageCode>,
    pub geometry_layers: Vec<usize>,
    pub tuning: TuningConfig,
    pub surfaces: SurfaceRegistry,
    pub templates: TemplateRegistry,
    pub hash: String,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let value: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let epochs_given = value
            .get("tuning")
            .and_then(|t| t.as_table())
            .is_some_and(|t| t.contains_key("epochs"));
        let mut cfg: ExperimentConfig = value
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        if !epochs_given {
            cfg.tuning.epochs = TuningConfig::for_task(cfg.task.kind).epochs;
        }
        cfg.base_dir = base_dir.to_path_buf();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml(&text, &base)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn data_path(&self, pattern: &str, lang: LanguageCode) -> PathBuf {
        self.resolve(Path::new(&pattern.replace("{lang}", lang.as_str())))
    }

    /// SHA-256 over the canonical JSON form, `run_root` excluded. Key order
    /// in the source file does not matter.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("run_root");
        }
        io::sha256_hex(v.to_string().as_bytes())
    }

    pub fn run_dir(&self) -> PathBuf {
        self.resolve(&self.run_root).join(&self.hash()[..16])
    }

    fn codes(&self, list: &[String], set: &LanguageSet) -> Result<Vec<LanguageCode>> {
        list.iter().map(|c| set.lookup(c)).collect()
    }

    /// Check every invariant and resolve registries. Paths referenced by
    /// the data patterns must exist.
    pub fn validate(&self) -> Result<Experiment> {
        let universe = match &self.languages.universe {
            None => LanguageSet::default_registry(),
            Some(codes) => {
                let members = codes
                    .iter()
                    .map(|c| {
                        let code = LanguageCode::new(c).map_err(|e| Error::Config(e.to_string()))?;
                        if !code.is_registered() {
                            return Err(Error::Config(format!(
                                "unknown language code {c:?}; known: {}",
                                DEFAULT_LANGUAGES.map(|(c, _)| c).join(", ")
                            )));
                        }
                        Ok(code)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let english = LanguageCode::new(&self.languages.english).map_err(|e| Error::Config(e.to_string()))?;
                LanguageSet::new(members, english)?
            }
        };
        let target = universe.lookup(&self.languages.target)?;
        let sources = self.codes(&self.languages.sources, &universe)?;
        if sources.is_empty() {
            return Err(Error::Config("at least one source language is required".into()));
        }
        if sources.contains(&target) {
            return Err(Error::Config(format!("target language {target} is also a source")));
        }
        let mut dedup = sources.clone();
        dedup.sort();
        dedup.dedup();
        if dedup.len() != sources.len() {
            return Err(Error::Config("duplicate source language".into()));
        }

        let lens_languages = match &self.lens.languages {
            Some(l) => self.codes(l, &universe)?,
            None => universe.iter().filter(|l| *l != universe.english()).collect(),
        };
        let geometry_languages = match &self.geometry.languages {
            Some(l) => self.codes(l, &universe)?,
            None => universe.members().to_vec(),
        };
        let n_layers = match self.model.backend {
            BackendKind::Toy => self.model.n_layers,
            BackendKind::Random => 1,
        };
        let geometry_layers = if self.geometry.layers.is_empty() {
            vec![n_layers]
        } else {
            self.geometry.layers.clone()
        };
        if let Some(&l) = geometry_layers.iter().find(|&&l| l > n_layers) {
            return Err(Error::Config(format!("geometry layer {l} exceeds model depth {n_layers}")));
        }

        if self.data.train_per_direction == 0 || self.data.test_per_language == 0 {
            return Err(Error::Config("sample sizes must be positive".into()));
        }
        for (pattern, langs) in [
            (&self.data.train, sources.iter().chain([&target]).copied().collect::<Vec<_>>()),
            (&self.data.test, universe.members().to_vec()),
        ] {
            if !pattern.contains("{lang}") {
                return Err(Error::Config(format!("data pattern {pattern:?} lacks {{lang}}")));
            }
            for l in langs {
                let p = self.data_path(pattern, l);
                if !p.is_file() {
                    return Err(Error::Config(format!("data file {} does not exist", p.display())));
                }
            }
        }

        let surfaces = match &self.prompting.surfaces {
            Some(p) => SurfaceRegistry::load(&self.resolve(p)).map_err(as_config)?,
            None => SurfaceRegistry::builtin(),
        };
        let templates = match &self.prompting.templates {
            Some(p) => TemplateRegistry::load(&self.resolve(p)).map_err(as_config)?,
            None => TemplateRegistry::builtin(),
        };
        templates.translation(&self.prompting.template_id)?;
        templates.task_template(&self.prompting.template_id, self.task.kind)?;
        for lang in universe.iter() {
            surfaces.answer_surfaces(self.task.kind, lang, self.task.output_type)?;
        }
        if let Some(w) = &self.model.weights {
            if !self.resolve(w).is_file() {
                return Err(Error::Config(format!("weights file {} does not exist", w.display())));
            }
        }

        let mut tuning = self.tuning.clone();
        tuning.seed = self.seeds.training;
        tuning.validate()?;

        Ok(Experiment {
            config: self.clone(),
            universe,
            sources,
            target,
            lens_languages,
            geometry_languages,
            geometry_layers,
            tuning,
            surfaces,
            templates,
            hash: self.hash(),
        })
    }
}

fn as_config(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

impl Experiment {
    pub fn run_dir(&self) -> PathBuf {
        self.config.run_dir()
    }

    pub fn task(&self) -> TaskKind {
        self.config.task.kind
    }

    /// Base model handle described by the `[model]` section.
    pub fn base_handle(&self) -> Result<ModelHandle> {
        let m = &self.config.model;
        Ok(match m.backend {
            BackendKind::Random => ModelHandle::new(std::sync::Arc::new(RandomLogitBackend::new(m.seed))),
            BackendKind::Toy => {
                let model = match &m.weights {
                    Some(p) => ToyTransformer::load(&self.config.resolve(p))?,
                    None => ToyTransformer::new(ToyConfig {
                        n_layers: m.n_layers,
                        width: m.width,
                        n_heads: m.n_heads,
                        mlp_width: m.mlp_width,
                        vocab_size: 256,
                        max_context: m.max_context,
                        seed: m.seed,
                    })?,
                };
                ModelHandle::new(std::sync::Arc::new(model))
            }
        })
    }
}
