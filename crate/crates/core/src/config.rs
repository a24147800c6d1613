//! Experiment configuration: one JSON document, unknown keys rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataio::read_json;
use crate::error::{NcdlError, Result};
use crate::evalkit::PostprocessConfig;
use crate::synth::SynthSpec;
use crate::trainer::{BootstrapConfig, DiscoveryConfig};

/// Environment variable that replaces every seed in a loaded config.
pub const SEED_ENV: &str = "NCDL_SEED";

/// Small-scale preset used by the synthetic benchmark.
pub const BENCHMARK_JSON: &str = include_str!("../configs/benchmark.json");

/// Input locations. Command-line flags take precedence.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub dataset: Option<PathBuf>,
    pub ground_truth: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub mapping: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seeds bootstrap initialization, head initialization and batch order.
    pub seed: u64,
    pub synth: SynthSpec,
    pub bootstrap: BootstrapConfig,
    pub discovery: DiscoveryConfig,
    pub postprocess: PostprocessConfig,
    pub paths: PathsConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            synth: SynthSpec::default(),
            bootstrap: BootstrapConfig::default(),
            discovery: DiscoveryConfig::default(),
            postprocess: PostprocessConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| NcdlError::Config {
            key: "<document>".into(),
            reason: e.to_string(),
        })
    }

    pub fn benchmark() -> Self {
        Self::from_json(BENCHMARK_JSON).expect("bundled preset parses")
    }

    /// Reads, applies [`SEED_ENV`] and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig = read_json(path).map_err(|e| match e {
            NcdlError::Json { path, source } => NcdlError::Config {
                key: "<document>".into(),
                reason: format!("{}: {source}", path.display()),
            },
            other => other,
        })?;
        if let Ok(v) = std::env::var(SEED_ENV) {
            let seed = v
                .trim()
                .parse()
                .map_err(|_| NcdlError::config(SEED_ENV, format!("not an unsigned integer: {v:?}")))?;
            cfg.set_seed(seed);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.synth.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.bootstrap.validate()?;
        self.discovery.validate()?;
        let pp = &self.postprocess;
        if !(0.0..=1.0).contains(&pp.score_threshold) {
            return Err(NcdlError::config("postprocess.score_threshold", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&pp.nms_iou) {
            return Err(NcdlError::config("postprocess.nms_iou", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(ExperimentConfig::from_json("{}").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"discovery": {"alpha": 1, "alhpa": 2}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"sed": 1}"#).is_err());
    }

    #[test]
    fn defaults_follow_published_settings() {
        let d = DiscoveryConfig::default();
        assert_eq!((d.lr_start, d.lr_peak, d.lr_end), (1e-5, 1e-2, 1e-3));
        assert_eq!((d.warmup_iters, d.memory_batches), (150, 100));
        assert_eq!(d.sinkhorn.lambda, 20.0);
        assert_eq!(d.num_novel, 3000);
        let pp = PostprocessConfig::default();
        assert_eq!((pp.score_threshold, pp.max_detections), (1e-4, 300));
    }

    #[test]
    fn benchmark_preset_is_valid() {
        let cfg = ExperimentConfig::benchmark();
        cfg.validate().unwrap();
        assert_eq!(cfg.discovery.total_iters, 15000);
        assert_eq!(cfg.synth, SynthSpec::default());
    }

    #[test]
    fn invalid_decay_names_key() {
        let cfg = ExperimentConfig::from_json(r#"{"synth": {"decay": 1.5}}"#).unwrap();
        match cfg.validate() {
            Err(NcdlError::Config { key, .. }) => assert_eq!(key, "synth.decay"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
