//! Experiment configuration: one JSON document with model, data, train and
//! eval sections. Unknown keys are rejected and omitted keys take their
//! defaults; the resolved form is what gets digested and echoed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{Difficulty, MatchKey, DEFAULT_FRACTIONS};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::{sha256_hex, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n: usize,
    /// Side of the generated images before resizing.
    #[serde(default = "default_synth_size")]
    pub size: usize,
    #[serde(default)]
    pub difficulty: Difficulty,
    /// Generator seed; defaults to the experiment seed.
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_synth_size() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Manifest CSV; mutually exclusive with `synth`.
    pub manifest: Option<PathBuf>,
    /// Where images are scanned for; defaults to the manifest's directory.
    pub images_root: Option<PathBuf>,
    pub match_key: MatchKey,
    /// Existing split file; computed from the seed when absent.
    pub split: Option<PathBuf>,
    pub synth: Option<SynthSpec>,
    pub fractions: [f64; 3],
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            manifest: None,
            images_root: None,
            match_key: MatchKey::FileStem,
            split: None,
            synth: None,
            fractions: DEFAULT_FRACTIONS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub threshold: f64,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { threshold: 0.5, batch_size: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_json_seeded(text, None)
    }

    /// Parses and resolves, with `seed` (when given) replacing the file's
    /// seed before any seed-derived default is filled.
    pub fn from_json_seeded(text: &str, seed: Option<u64>) -> Result<Self> {
        let mut cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("line {}: {e}", e.line())))?;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.resolved()
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::load_seeded(path, None)
    }

    pub fn load_seeded(path: &Path, seed: Option<u64>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_seeded(&text, seed).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Fills derived defaults and validates every section.
    pub fn resolved(mut self) -> Result<Self> {
        self.model = self.model.resolved();
        if let Some(s) = &mut self.data.synth {
            s.seed.get_or_insert(self.seed);
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        match (&self.data.manifest, &self.data.synth) {
            (Some(_), None) | (None, Some(_)) => {}
            _ => return Err(Error::Config("data needs exactly one of `manifest` or `synth`".into())),
        }
        if !(0.0..=1.0).contains(&self.eval.threshold) || self.eval.batch_size == 0 {
            return Err(Error::Config("eval threshold must lie in [0, 1] with a positive batch size".into()));
        }
        Ok(())
    }

    /// Canonical serialisation used for the digest and the echoed copy.
    pub fn canonical_json(&self) -> String {
        let value = serde_json::to_value(self).expect("config serialises");
        serde_json::to_string_pretty(&value).expect("value serialises") + "\n"
    }

    pub fn digest(&self) -> String {
        sha256_hex(self.canonical_json().as_bytes())
    }
}
