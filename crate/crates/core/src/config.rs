//! Pipeline configuration loaded from TOML with environment overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::gateway::RetryPolicy;

pub const ENV_ENDPOINT: &str = "CFD_ENDPOINT";
pub const ENV_API_KEY: &str = "CFD_API_KEY";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Scripted,
    Wire,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Scripted fixture file (JSON).
    pub fixture: Option<PathBuf>,
    pub endpoint: Option<String>,
    pub chat_model: String,
    pub embedding_model: String,
    pub timeout_secs: u64,
    /// Only ever read from the environment.
    #[serde(skip)]
    pub api_key: Option<String>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            kind: BackendKind::Scripted,
            fixture: None,
            endpoint: None,
            chat_model: "gpt-3.5-turbo".into(),
            embedding_model: "text-embedding-3-small".into(),
            timeout_secs: 60,
            api_key: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Initial CoTs per question.
    pub m: usize,
    /// Clusters.
    pub n: usize,
    /// Entities per knowledge passage.
    pub t: usize,
    /// CoTs per counterfactual variant.
    pub p: usize,
    /// Similarity threshold of the consistency gate.
    pub s: f64,
    /// InfoNCE temperature, used only by the alignment diagnostic.
    pub tau: f64,
    pub cot_temperature: f64,
    pub extraction_temperature: f64,
    pub max_tokens: u32,
    pub parallelism: usize,
    pub retry: RetryPolicy,
    pub seed: u64,
    pub template_version: String,
    pub cache_dir: Option<PathBuf>,
    pub fail_fast: bool,
    pub backend: BackendConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            m: 30,
            n: 5,
            t: 5,
            p: 5,
            s: 0.8,
            tau: 0.07,
            cot_temperature: 0.7,
            extraction_temperature: 0.0,
            max_tokens: 512,
            parallelism: 4,
            retry: RetryPolicy::default(),
            seed: 0,
            template_version: "v1".into(),
            cache_dir: None,
            fail_fast: false,
            backend: BackendConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: PipelineConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    /// Applies `CFD_ENDPOINT` and `CFD_API_KEY` when set.
    pub fn apply_env(&mut self) {
        self.apply_env_from(|k| std::env::var(k).ok());
    }

    pub fn apply_env_from(&mut self, get: impl Fn(&str) -> Option<String>) {
        if let Some(e) = get(ENV_ENDPOINT).filter(|e| !e.is_empty()) {
            self.backend.endpoint = Some(e);
        }
        if let Some(k) = get(ENV_API_KEY).filter(|k| !k.is_empty()) {
            self.backend.api_key = Some(k);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.n < 1 || self.m < self.n {
            return bad(format!("need m >= n >= 1, got m={} n={}", self.m, self.n));
        }
        if self.t < 2 {
            return bad(format!("need t >= 2, got {}", self.t));
        }
        if self.p < 1 {
            return bad("need p >= 1".into());
        }
        if self.s.is_nan() || self.s <= -1.0 || self.s >= 1.0 {
            return bad(format!("s must lie in (-1, 1), got {}", self.s));
        }
        if self.tau.is_nan() || self.tau <= 0.0 {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if self.parallelism < 1 {
            return bad("parallelism must be at least 1".into());
        }
        if self.retry.budget < 1 {
            return bad("retry budget must be at least 1".into());
        }
        for (name, v) in [
            ("cot_temperature", self.cot_temperature),
            ("extraction_temperature", self.extraction_temperature),
        ] {
            if !(0.0..=2.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 2], got {v}"));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form. Secrets are never serialized.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = PipelineConfig::default();
        assert_eq!((c.m, c.n, c.t, c.p), (30, 5, 5, 5));
        assert_eq!((c.s, c.tau), (0.8, 0.07));
        assert_eq!(c.retry.budget, 3);
        c.validate().unwrap();
    }

    #[test]
    fn toml_roundtrip_and_partial_files() {
        let c = PipelineConfig::from_toml("m = 10\nn = 2\n[backend]\nkind = \"wire\"\n").unwrap();
        assert_eq!((c.m, c.n, c.t), (10, 2, 5));
        assert_eq!(c.backend.kind, BackendKind::Wire);
        let again = PipelineConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(again, c);
        assert!(PipelineConfig::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn invariants_are_enforced() {
        for text in [
            "m = 3\nn = 4",
            "n = 0",
            "t = 1",
            "p = 0",
            "s = 1.0",
            "tau = 0.0",
            "parallelism = 0",
        ] {
            assert!(
                matches!(PipelineConfig::from_toml(text), Err(ConfigError::Invalid(_))),
                "{text}"
            );
        }
    }

    #[test]
    fn digest_ignores_secrets() {
        let mut c = PipelineConfig::default();
        let d = c.digest();
        c.apply_env_from(|k| (k == ENV_API_KEY).then(|| "sk-secret".to_string()));
        assert_eq!(c.backend.api_key.as_deref(), Some("sk-secret"));
        assert_eq!(c.digest(), d);
        assert!(!serde_json::to_string(&c).unwrap().contains("sk-secret"));
        c.apply_env_from(|k| (k == ENV_ENDPOINT).then(|| "http://x".to_string()));
        assert_ne!(c.digest(), d);
        c.seed = 1;
        assert_eq!(d.len(), 64);
    }
}
