//! Experiment configuration: one TOML file with a section per component.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::AdapterConfig;
use crate::augment::AugmentConfig;
use crate::error::{Error, Result};
use crate::mil::MilConfig;
use crate::sampler::SamplerConfig;
use crate::ssl::SslConfig;
use crate::synth::SynthConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub manifest: Option<PathBuf>,
    /// Keep only tumor-class patches before sampling.
    pub filter_tumor: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            filter_tumor: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub k: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { k: 5, seed: 0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub sampler: SamplerConfig,
    pub augment: AugmentConfig,
    pub adapter: AdapterConfig,
    pub ssl: SslConfig,
    pub mil: MilConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub synthgen: SynthConfig,
}

fn parse_err(context: impl std::fmt::Display, e: impl std::fmt::Display) -> Error {
    Error::Config(format!("{context}: {e}"))
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| parse_err("invalid config", e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; a relative `data.manifest` is resolved against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self =
            toml::from_str(&text).map_err(|e| parse_err(format!("invalid config {}", path.display()), e))?;
        if let (Some(m), Some(dir)) = (&cfg.data.manifest, path.parent()) {
            if m.is_relative() {
                cfg.data.manifest = Some(dir.join(m));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.sampler.validate()?;
        self.augment.validate()?;
        self.ssl.validate()?;
        self.mil.validate()?;
        self.train.validate()?;
        self.synthgen.validate()?;
        if self.eval.k < 2 {
            return Err(Error::Config("eval.k must be >= 2".into()));
        }
        Ok(())
    }

    /// Applies `section.key=value`. The value is read as a TOML literal, or as
    /// a bare string if that fails; the result is re-checked against the schema.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not of the form key=value")))?;
        let key = key.trim();
        let raw = raw.trim();
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));

        let mut root = toml::Table::try_from(&*self).map_err(|e| parse_err("serialize config", e))?;
        let parts: Vec<&str> = key.split('.').collect();
        if parts.iter().any(|p| p.is_empty()) {
            return Err(Error::Config(format!("malformed override key `{key}`")));
        }
        let (last, path) = parts.split_last().expect("split yields at least one part");
        let mut table = &mut root;
        for part in path {
            table = match table.get_mut(*part) {
                Some(toml::Value::Table(t)) => t,
                _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
            };
        }
        table.insert(last.to_string(), value);
        let updated: Self = toml::Value::Table(root)
            .try_into()
            .map_err(|e| parse_err(format!("override `{key}`"), e))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }

    /// One seed for every stochastic component.
    pub fn set_seed(&mut self, seed: u64) {
        self.sampler.seed = seed;
        self.augment.seed = seed;
        self.train.seed = seed;
        self.eval.seed = seed;
        self.synthgen.seed = seed;
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| parse_err("serialize config", e))
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::AdapterKind;
    use crate::trainer::Schedule;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = ExperimentConfig::from_toml_str("[sampler]\nK = 64\n[adapter]\nkind = \"conv1d\"\n").unwrap();
        assert_eq!(cfg.sampler.max_instances, 64);
        assert_eq!(cfg.sampler.grid, 32);
        assert_eq!(cfg.adapter.kind, AdapterKind::Conv1d);
        assert_eq!(cfg.ssl.lambda, 0.1);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = ExperimentConfig::from_toml_str("[ssl]\nlamda = 0.2\n").unwrap_err();
        assert!(err.to_string().contains("lamda"), "{err}");
        assert_eq!(err.category(), "config");
    }

    #[test]
    fn overrides() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_override("ssl.lambda=0.25").unwrap();
        cfg.apply_override("train.schedule=joint").unwrap();
        cfg.apply_override("sampler.pad_to_K = true").unwrap();
        cfg.apply_override("adapter.hidden_dim=7").unwrap();
        assert_eq!(cfg.ssl.lambda, 0.25);
        assert_eq!(cfg.train.schedule, Schedule::Joint);
        assert!(cfg.sampler.pad_to_k);
        assert_eq!(cfg.adapter.hidden_dim, Some(7));

        let err = cfg.apply_override("ssl.bogus=1").unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
        let err = cfg.apply_override("nosuch.key=1").unwrap_err();
        assert!(err.to_string().contains("nosuch.key"), "{err}");
        let err = cfg.apply_override("sampler.K=many").unwrap_err();
        assert!(err.to_string().contains("sampler.K"), "{err}");
        assert!(cfg.apply_override("ssl.lambda").is_err());
        assert_eq!(cfg.ssl.lambda, 0.25);
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.set_seed(9);
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
