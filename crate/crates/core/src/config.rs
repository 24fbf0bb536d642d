//! Run configuration: pipeline hyperparameters, condition and backends.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backend::BackendConfig;
use crate::error::{Error, Result};
use crate::judge::JudgeCondition;
use crate::text::fnv1a64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Hop-1 list length.
    pub k1: usize,
    /// SVO queries per question.
    pub n_svo: usize,
    /// Hits retrieved per SVO query.
    pub k2: usize,
    /// Merged SVO list length.
    pub svo_cap: usize,
    /// Hits retrieved per entity.
    pub entity_k: usize,
    pub pool_cap: usize,
    pub alpha: f64,
    pub condition: JudgeCondition,
    pub embedder: BackendConfig,
    pub chat: BackendConfig,
    /// Dimension of the hash embedder used in mock mode.
    pub mock_dim: usize,
    /// Seed for sampled splits and synthetic worlds.
    pub seed: u64,
    /// Queries processed concurrently by `run`.
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            k1: 5,
            n_svo: 3,
            k2: 10,
            svo_cap: 15,
            entity_k: 5,
            pool_cap: 20,
            alpha: 0.1,
            condition: JudgeCondition::Tripartite,
            embedder: BackendConfig::default(),
            chat: BackendConfig::default(),
            mock_dim: 4096,
            seed: 13,
            workers: 4,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("k1", self.k1),
            ("n_svo", self.n_svo),
            ("k2", self.k2),
            ("svo_cap", self.svo_cap),
            ("entity_k", self.entity_k),
            ("pool_cap", self.pool_cap),
            ("mock_dim", self.mock_dim),
            ("workers", self.workers),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        self.embedder.validate().map_err(|e| Error::Config(format!("embedder: {e}")))?;
        self.chat.validate().map_err(|e| Error::Config(format!("chat: {e}")))?;
        Ok(())
    }

    /// Stable hash of every setting that can change retrieval output. API keys,
    /// worker counts and the condition (recorded separately) are excluded.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.embedder.api_key = None;
        c.chat.api_key = None;
        c.workers = 1;
        c.condition = JudgeCondition::Tripartite;
        let json = serde_json::to_string(&c).expect("config serializes");
        format!("{:016x}", fnv1a64(json.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_published_hyperparameters() {
        let c = RunConfig::default();
        assert_eq!(
            (c.k1, c.n_svo, c.k2, c.svo_cap, c.entity_k, c.pool_cap, c.alpha),
            (5, 3, 10, 15, 5, 20, 0.1)
        );
        assert!(c.validate().is_ok());
    }

    #[test]
    fn partial_file_overrides_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"alpha": 0.15, "condition": "B", "chat": {"model_name": "m"}}"#).unwrap();
        let c = RunConfig::load(&path).unwrap();
        assert_eq!(c.alpha, 0.15);
        assert_eq!(c.condition, JudgeCondition::TwoWay);
        assert_eq!(c.chat.model_name, "m");
        assert_eq!(c.k2, 10);

        std::fs::write(&path, r#"{"alpah": 0.15}"#).unwrap();
        assert!(matches!(RunConfig::load(&path), Err(Error::Config(_))));
        std::fs::write(&path, r#"{"alpha": 2}"#).unwrap();
        assert!(matches!(RunConfig::load(&path), Err(Error::Config(_))));
    }

    #[test]
    fn fingerprint_ignores_secrets_and_workers() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.chat.api_key = Some("secret".into());
        b.workers = 9;
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.alpha = 0.2;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }
}
