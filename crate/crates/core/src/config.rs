//! Run configuration: one TOML file covering model, training, vocabulary,
//! data paths, generation and the synthetic corpus.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{SynthConfig, VocabPolicy};
use crate::mkd::DecodeOptions;
use crate::model::ModelConfig;
use crate::pipeline::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadInput {
    /// Mean-pooled projected patch features `I`.
    Image,
    /// Mean-pooled posterior features `I′`.
    Posterior,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without a validation BLEU-4 improvement before stopping.
    pub patience: usize,
    pub pretrain_epochs: usize,
    pub pretrain_learning_rate: f64,
    pub head_input: HeadInput,
    /// Skip validation decoding (and early stopping).
    pub skip_validation: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 16,
            epochs: 50,
            patience: 10,
            pretrain_epochs: 0,
            pretrain_learning_rate: 1e-3,
            head_input: HeadInput::Image,
            skip_validation: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabConfig {
    pub policy: VocabPolicy,
}

impl Default for VocabConfig {
    fn default() -> Self {
        Self {
            policy: VocabPolicy::MinFrequency(3),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub max_len: usize,
    pub beam_width: usize,
    pub suppress_unk: bool,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        let d = DecodeOptions::default();
        Self {
            max_len: d.max_len,
            beam_width: d.beam_width,
            suppress_unk: d.suppress_unk,
        }
    }
}

impl GenerateConfig {
    pub fn options(&self) -> DecodeOptions {
        DecodeOptions {
            max_len: self.max_len,
            beam_width: self.beam_width,
            suppress_unk: self.suppress_unk,
        }
    }
}

/// Artifact locations. Relative paths resolve against the config file's
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    pub corpus: PathBuf,
    pub features: PathBuf,
    pub manifest: PathBuf,
    pub index: PathBuf,
    /// Organ-group file for the knowledge graph; the built-in grouping when
    /// absent.
    pub graph: Option<PathBuf>,
    pub checkpoint_dir: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for DataPaths {
    fn default() -> Self {
        Self {
            corpus: "data/corpus.jsonl".into(),
            features: "data/features.bin".into(),
            manifest: "data/manifest.json".into(),
            index: "data/index.bin".into(),
            graph: None,
            checkpoint_dir: "checkpoints".into(),
            output_dir: "output".into(),
        }
    }
}

impl DataPaths {
    fn resolve(&mut self, base: &Path) {
        for p in [
            &mut self.corpus,
            &mut self.features,
            &mut self.manifest,
            &mut self.index,
            &mut self.checkpoint_dir,
            &mut self.output_dir,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(g) = self.graph.as_mut().filter(|g| g.is_relative()) {
            *g = base.join(&*g);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub vocab: VocabConfig,
    pub generate: GenerateConfig,
    pub data: DataPaths,
    pub synth: SynthConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.data.resolve(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| Error::Config(e.to_string()))?;
        let t = &self.train;
        if !(t.learning_rate > 0.0 && t.pretrain_learning_rate > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if t.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.generate.max_len == 0 {
            return Err(Error::Config("generate.max_len must be positive".into()));
        }
        Ok(())
    }

    /// `N_K` must leave at least one other record for every training query.
    pub fn check_train_size(&self, n_train: usize) -> Result<()> {
        if self.model.n_retrieved >= n_train {
            return Err(Error::Config(format!(
                "n_retrieved {} must be below the training split size {n_train} (queries exclude their own record)",
                self.model.n_retrieved
            )));
        }
        Ok(())
    }

    /// Fails with a config error naming the first missing input.
    pub fn require(paths: &[&Path]) -> Result<()> {
        for p in paths {
            if !p.exists() {
                return Err(Error::Config(format!("missing input {}", p.display())));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert_eq!(cfg.train.learning_rate, 1e-4);
        assert_eq!(cfg.train.batch_size, 16);
        assert_eq!((cfg.model.n_retrieved, cfg.model.n_heads), (100, 8));
    }

    #[test]
    fn partial_files_and_errors() {
        let cfg = RunConfig::from_toml("seed = 4\n[model]\nd_model = 32\nn_heads = 4\n[vocab]\npolicy = { top_k = 50 }\n").unwrap();
        assert_eq!((cfg.seed, cfg.model.d_model, cfg.vocab.policy), (4, 32, VocabPolicy::TopK(50)));
        assert!(matches!(RunConfig::from_toml("[model]\nd_model = 30\nn_heads = 4\n"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("[model]\nwidth = 3\n"), Err(Error::Config(_))));
        assert!(cfg.check_train_size(101).is_ok());
        assert!(cfg.check_train_size(100).is_err());
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let mut p = DataPaths::default();
        p.graph = Some("g.txt".into());
        p.resolve(Path::new("/runs/a"));
        assert_eq!(p.corpus, Path::new("/runs/a/data/corpus.jsonl"));
        assert_eq!(p.graph.unwrap(), Path::new("/runs/a/g.txt"));
    }
}
