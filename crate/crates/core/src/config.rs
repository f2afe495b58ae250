//! Run configuration: a TOML file whose sections mirror the library's
//! configuration structs, overridable from the command line.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::CaseUnit;
use crate::featurizer::{LUNG_WINDOW_CENTER, LUNG_WINDOW_WIDTH};
use crate::generator::GeneratorBackend;
use crate::orchestrator::PipelineConfig;
use crate::retriever::CosFaceConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub manifest: PathBuf,
    pub features: PathBuf,
    pub index: PathBuf,
    pub head: PathBuf,
    /// Root for `image_ref`s; defaults to the manifest's directory.
    pub images: Option<PathBuf>,
    pub expert: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Directory of `<stem>.json` + `<stem>.raw` volumes for `corpus-build`.
    pub volumes: Option<PathBuf>,
    pub keep_list: Option<PathBuf>,
    /// JSON object mapping slice id to refined description.
    pub edits: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            manifest: "corpus/manifest.jsonl".into(),
            features: "corpus/features.bhdf".into(),
            index: "corpus/index.bhdx".into(),
            head: "corpus/head.bhdh".into(),
            images: None,
            expert: None,
            output_dir: "runs".into(),
            volumes: None,
            keep_list: None,
            edits: None,
        }
    }
}

impl Paths {
    pub fn image_root(&self) -> PathBuf {
        self.images.clone().unwrap_or_else(|| {
            self.manifest
                .parent()
                .map(Path::to_path_buf)
                .unwrap_or_else(|| PathBuf::from("."))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSettings {
    pub test_fraction: f64,
    pub min_gap: usize,
    pub stratify: bool,
    pub window_center: f64,
    pub window_width: f64,
}

impl Default for CorpusSettings {
    fn default() -> Self {
        Self {
            test_fraction: 0.2,
            min_gap: 2,
            stratify: true,
            window_center: LUNG_WINDOW_CENTER,
            window_width: LUNG_WINDOW_WIDTH,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    pub case_unit: CaseUnit,
    pub ks: Vec<usize>,
    pub write_prompts: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// When set, overrides the seeds of every section.
    pub seed: Option<u64>,
    pub run_id: Option<String>,
    pub paths: Paths,
    pub corpus: CorpusSettings,
    pub training: CosFaceConfig,
    pub pipeline: PipelineConfig,
    pub backend: GeneratorBackend,
    pub eval: EvalSettings,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(format!("bad config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::InvalidConfig(msg) => Error::InvalidConfig(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config is serializable")
    }

    /// Pushes the top-level seed into each section.
    pub fn resolve(mut self) -> Self {
        if let Some(seed) = self.seed {
            self.training.seed = seed;
            self.pipeline.seed = seed;
        }
        self
    }

    pub fn effective_seed(&self) -> u64 {
        self.seed.unwrap_or(self.training.seed)
    }

    pub fn validate(&self) -> Result<()> {
        self.training.validate()?;
        self.pipeline.validate()?;
        self.backend.validate()?;
        if !(self.corpus.test_fraction > 0.0 && self.corpus.test_fraction < 1.0) {
            return Err(Error::InvalidConfig("corpus.test_fraction must lie in (0, 1)".into()));
        }
        if self.corpus.min_gap == 0 {
            return Err(Error::InvalidConfig("corpus.min_gap must be at least 1".into()));
        }
        if self.eval.ks.contains(&0) {
            return Err(Error::InvalidConfig("every k in eval.ks must be at least 1".into()));
        }
        Ok(())
    }
}
