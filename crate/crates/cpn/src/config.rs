//! Run configuration: one JSON file describing paths, training stages,
//! episode shapes, and the synthetic-data block. Unknown fields are
//! rejected so typos fail loudly; omitted blocks fall back to the stated
//! defaults. Command-line flags override file values.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::AttributeLevel;
use crate::episodes::EpisodeSpec;
use crate::model::{GenInputMode, Variant};
use crate::synthgen::SynthConfig;
use crate::training::SgdConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Unreadable {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config parse: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("config: {0}")]
    Invalid(String),
}

/// How class attribute vectors are rescaled after loading.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttributeNorm {
    /// Divide each class vector by its maximum entry.
    Max,
    /// Use scores as stored.
    None,
}

/// Artifact locations. Inputs live under `data/`, outputs under `out/` by
/// default; every command creates missing parent directories on write.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub embeddings: PathBuf,
    pub attributes: PathBuf,
    pub split: PathBuf,
    pub truth: PathBuf,
    pub pretrain_checkpoint: PathBuf,
    pub meta_checkpoint: PathBuf,
    pub pretrain_log: PathBuf,
    pub meta_log: PathBuf,
    pub eval_report: PathBuf,
    pub ablation_report: PathBuf,
    pub viz: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            embeddings: "data/embeddings.bin".into(),
            attributes: "data/attributes.csv".into(),
            split: "data/split.json".into(),
            truth: "data/truth.bin".into(),
            pretrain_checkpoint: "out/pretrain.ckpt".into(),
            meta_checkpoint: "out/meta.ckpt".into(),
            pretrain_log: "out/pretrain_log.jsonl".into(),
            meta_log: "out/meta_log.jsonl".into(),
            eval_report: "out/eval.json".into(),
            ablation_report: "out/ablation.json".into(),
            viz: "out/viz.csv".into(),
        }
    }
}

/// Synthetic-data block: [`SynthConfig`] minus the seed, which always comes
/// from the run seed so one value governs the whole pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthBlock {
    pub m: usize,
    pub d: usize,
    pub n_base: usize,
    pub n_val: usize,
    pub n_novel: usize,
    pub per_class: usize,
    pub sigma: f64,
    pub sparsity: f64,
    pub min_angle: f64,
}

impl Default for SynthBlock {
    fn default() -> Self {
        let s = SynthConfig::default();
        SynthBlock {
            m: s.m,
            d: s.d,
            n_base: s.n_base,
            n_val: s.n_val,
            n_novel: s.n_novel,
            per_class: s.per_class,
            sigma: s.sigma,
            sparsity: s.sparsity,
            min_angle: s.min_angle,
        }
    }
}

impl SynthBlock {
    pub fn to_synth(self, seed: u64) -> SynthConfig {
        SynthConfig {
            m: self.m,
            d: self.d,
            n_base: self.n_base,
            n_val: self.n_val,
            n_novel: self.n_novel,
            per_class: self.per_class,
            sigma: self.sigma,
            sparsity: self.sparsity,
            min_angle: self.min_angle,
            seed,
        }
    }
}

/// Visualization export block. The episode is drawn from the novel split
/// using evaluation stream `episode_index`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VizConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
    pub episode_index: usize,
    pub variants: Vec<Variant>,
}

impl Default for VizConfig {
    fn default() -> Self {
        VizConfig {
            n_way: 5,
            k_shot: 1,
            n_query: 40,
            episode_index: 0,
            variants: vec![Variant::Vp, Variant::Lcp, Variant::Adaptive],
        }
    }
}

impl VizConfig {
    pub fn episode_spec(&self) -> Result<EpisodeSpec, ConfigError> {
        EpisodeSpec::new(self.n_way, self.k_shot, self.n_query)
            .map_err(|e| ConfigError::Invalid(format!("viz: {e}")))
    }
}

fn default_seed() -> u64 {
    0
}

fn default_eval_episodes() -> usize {
    5000
}

fn default_train_episode() -> EpisodeSpec {
    EpisodeSpec {
        n_way: 5,
        k_shot: 1,
        n_query: 15,
    }
}

fn default_eval_episode() -> EpisodeSpec {
    EpisodeSpec {
        n_way: 5,
        k_shot: 1,
        n_query: 15,
    }
}

fn default_variant() -> Variant {
    Variant::Adaptive
}

fn default_gen_input_mode() -> GenInputMode {
    GenInputMode::Comp
}

fn default_attribute_level() -> AttributeLevel {
    AttributeLevel::Category
}

fn default_attribute_norm() -> AttributeNorm {
    AttributeNorm::Max
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Rayon worker cap; absent means the machine core count.
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default = "default_variant")]
    pub variant: Variant,
    #[serde(default = "default_gen_input_mode")]
    pub gen_input_mode: GenInputMode,
    #[serde(default = "default_attribute_level")]
    pub attribute_level: AttributeLevel,
    #[serde(default = "default_attribute_norm")]
    pub normalize_attributes: AttributeNorm,
    #[serde(default)]
    pub paths: PathsConfig,
    #[serde(default = "SgdConfig::pretrain_default")]
    pub pretrain: SgdConfig,
    #[serde(default = "SgdConfig::meta_default")]
    pub meta: SgdConfig,
    #[serde(default = "default_train_episode")]
    pub train_episode: EpisodeSpec,
    #[serde(default = "default_eval_episode")]
    pub eval_episode: EpisodeSpec,
    #[serde(default = "default_eval_episodes")]
    pub eval_episodes: usize,
    #[serde(default)]
    pub synth: SynthBlock,
    #[serde(default)]
    pub viz: VizConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("every field has a default")
    }
}

impl RunConfig {
    /// Reads and validates a config file. A missing or malformed file is a
    /// configuration error, not an I/O error: the run cannot start.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Unreadable {
            path: path.to_path_buf(),
            source,
        })?;
        let cfg: RunConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let spec = |name: &str, s: &EpisodeSpec| {
            EpisodeSpec::new(s.n_way, s.k_shot, s.n_query)
                .map(|_| ())
                .map_err(|e| ConfigError::Invalid(format!("{name}: {e}")))
        };
        spec("train_episode", &self.train_episode)?;
        spec("eval_episode", &self.eval_episode)?;
        self.viz.episode_spec()?;
        if self.viz.variants.is_empty() {
            return Err(ConfigError::Invalid(
                "viz.variants must name at least one variant".into(),
            ));
        }
        if self.eval_episodes < 1 {
            return Err(ConfigError::Invalid(
                "eval_episodes must be at least 1".into(),
            ));
        }
        if let Some(0) = self.threads {
            return Err(ConfigError::Invalid("threads must be at least 1".into()));
        }
        self.pretrain
            .validate_pretrain()
            .map_err(|e| ConfigError::Invalid(format!("pretrain: {e}")))?;
        self.meta
            .validate_meta()
            .map_err(|e| ConfigError::Invalid(format!("meta: {e}")))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_yields_documented_defaults() {
        let cfg: RunConfig = serde_json::from_str("{}").unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.seed, 0);
        assert_eq!(cfg.variant, Variant::Adaptive);
        assert_eq!(cfg.gen_input_mode, GenInputMode::Comp);
        assert_eq!(cfg.pretrain.epochs, 30);
        assert_eq!(cfg.pretrain.lr, 0.01);
        assert_eq!(cfg.pretrain.batch_size, 128);
        assert_eq!(cfg.meta.epochs, 10);
        assert_eq!(cfg.meta.lr, 0.001);
        assert_eq!(cfg.meta.episodes_per_epoch, 100);
        assert_eq!(cfg.meta.val_episodes, 600);
        assert_eq!(cfg.eval_episode.n_way, 5);
        assert_eq!(cfg.eval_episode.n_query, 15);
        assert_eq!(cfg.eval_episodes, 5000);
        assert_eq!(cfg.viz.n_query, 40);
        assert_eq!(cfg.paths.embeddings, PathBuf::from("data/embeddings.bin"));
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn unknown_fields_are_rejected_by_name() {
        let err = serde_json::from_str::<RunConfig>(r#"{"sede": 1}"#).unwrap_err();
        assert!(err.to_string().contains("sede"), "{err}");
        let err =
            serde_json::from_str::<RunConfig>(r#"{"synth": {"seed": 3}}"#).unwrap_err();
        assert!(err.to_string().contains("seed"), "{err}");
    }

    #[test]
    fn invalid_values_name_their_field() {
        let cfg: RunConfig =
            serde_json::from_str(r#"{"train_episode": {"n_way": 1, "k_shot": 1, "n_query": 5}}"#)
                .unwrap();
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("train_episode"), "{err}");

        let mut cfg = RunConfig::default();
        cfg.meta.lr = -1.0;
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("meta"), "{err}");

        let cfg = RunConfig {
            threads: Some(0),
            ..RunConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn file_round_trip_preserves_every_field() {
        let mut cfg = RunConfig {
            seed: 99,
            variant: Variant::Lcp,
            ..RunConfig::default()
        };
        cfg.synth.sigma = 0.25;
        cfg.paths.viz = "elsewhere/viz.csv".into();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
        assert_eq!(RunConfig::load(&path).unwrap(), cfg);
    }

    #[test]
    fn missing_file_is_a_config_error() {
        let err = RunConfig::load(Path::new("/nonexistent/run.json")).unwrap_err();
        assert!(matches!(err, ConfigError::Unreadable { .. }));
    }

    #[test]
    fn synth_block_adopts_the_run_seed() {
        let block = SynthBlock::default();
        let synth = block.to_synth(7);
        assert_eq!(synth.seed, 7);
        assert_eq!(synth, SynthConfig { seed: 7, ..SynthConfig::default() });
    }
}
