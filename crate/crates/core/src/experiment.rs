//! The experiment config file: every stage's settings plus artifact paths,
//! in TOML, with `section.key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::descent::DescentConfig;
use crate::error::{Error, Result};
use crate::evalbench::EvalConfig;
use crate::fingerprint::fingerprint_json;
use crate::synthdata::CorpusConfig;
use crate::training::TrainConfig;

/// Locations of stage outputs consumed by later stages.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArtifactPaths {
    /// Corpus root; `GLVD_DATA_DIR` is the fallback.
    pub corpus: Option<PathBuf>,
    /// Heatmap surrogate written by `train-heatmap`.
    pub heatmap: Option<PathBuf>,
    /// Pretrained f_v written by `pretrain-sdf`; random init when absent.
    pub encoder: Option<PathBuf>,
    /// Model checkpoint written by `train`.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub descent: DescentConfig,
    pub eval: EvalConfig,
    pub artifacts: ArtifactPaths,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.descent.validate()?;
        self.eval.validate()
    }

    pub fn fingerprint(&self) -> String {
        fingerprint_json(self)
    }

    /// Apply one `section.key=value` override. The value is read as a TOML
    /// value, falling back to a plain string; unknown sections and keys are
    /// rejected.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (key, raw) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{spec}` is not of the form section.key=value")))?;
        let (section, field) = key
            .trim()
            .split_once('.')
            .ok_or_else(|| Error::Config(format!("override key `{key}` must be section.key")))?;
        let raw = raw.trim();
        let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
            Ok(mut t) => t.remove("v").expect("parsed key"),
            Err(_) => toml::Value::String(raw.to_string()),
        };
        let mut doc = toml::Table::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let table = doc
            .get_mut(section)
            .and_then(toml::Value::as_table_mut)
            .ok_or_else(|| Error::Config(format!("unknown config section `{section}`")))?;
        table.insert(field.to_string(), value);
        *self = doc
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("override `{spec}`: {e}")))?;
        Ok(())
    }

    pub fn apply_overrides<S: AsRef<str>>(&mut self, specs: &[S]) -> Result<()> {
        specs.iter().try_for_each(|s| self.apply_override(s.as_ref()))
    }
}
