//! Experiment configuration files: TOML with nested sections, every
//! field optional with desk-scale defaults.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::task::{TaskSizes, TaskSpec};
use crate::harness::{DiagConfig, Experiment, Regime, RegimeSpec, StrategySpec};
use crate::locator::LocatorConfig;
use crate::model::ModelConfig;

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk_default()
    }
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec::desk_default()
    }
}

/// Per-regime training budget as written in config files (the regime
/// name is the section key).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegimeBudget {
    pub source_epochs: usize,
    #[serde(default = "default_pretrain_lr")]
    pub lr: f64,
    #[serde(default = "default_pretrain_batch")]
    pub batch_size: usize,
}

fn default_pretrain_lr() -> f64 {
    2e-5
}

fn default_pretrain_batch() -> usize {
    32
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegimesConfig {
    pub under: RegimeBudget,
    pub over: RegimeBudget,
}

impl Default for RegimesConfig {
    fn default() -> Self {
        RegimesConfig {
            under: RegimeBudget {
                source_epochs: 1,
                lr: 2e-5,
                batch_size: 32,
            },
            over: RegimeBudget {
                source_epochs: 8,
                lr: 2e-5,
                batch_size: 32,
            },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct OutputConfig {
    #[serde(default = "default_out_dir")]
    pub dir: PathBuf,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_seeds() -> Vec<u64> {
    vec![42, 43, 44]
}

/// The full experiment file. Missing sections fall back to the
/// desk-scale defaults, so `{}` plus one override is a valid config.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub task: TaskSpec,
    #[serde(default)]
    pub sizes: TaskSizes,
    #[serde(default)]
    pub regimes: RegimesConfig,
    /// Ordered strategy list; defaults to all four.
    #[serde(default = "default_strategies", rename = "strategy")]
    pub strategies: Vec<StrategySpec>,
    #[serde(default)]
    pub locator: LocatorConfig,
    #[serde(default)]
    pub diagnostics: DiagConfig,
    #[serde(default)]
    pub output: OutputConfig,
    /// Free-form notes copied into artifact metadata.
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

fn default_strategies() -> Vec<StrategySpec> {
    vec![
        StrategySpec::shallow_top2(),
        StrategySpec::full(),
        StrategySpec::selective_lora(),
        StrategySpec::lora_everywhere(),
    ]
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seeds: default_seeds(),
            model: ModelConfig::default(),
            task: TaskSpec::default(),
            sizes: TaskSizes::default(),
            regimes: RegimesConfig::default(),
            strategies: default_strategies(),
            locator: LocatorConfig::default(),
            diagnostics: DiagConfig::default(),
            output: OutputConfig::default(),
            meta: BTreeMap::new(),
        }
    }
}

impl ExperimentConfig {
    /// Parse a TOML config file. An empty file is malformed by contract.
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Format(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<ExperimentConfig> {
        if text.trim().is_empty() {
            return Err(Error::Format("config file is empty".into()));
        }
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Format(format!("config parse: {e}")))?;
        cfg.to_experiment().validate()?;
        Ok(cfg)
    }

    /// Resolve into the runnable experiment description.
    pub fn to_experiment(&self) -> Experiment {
        Experiment {
            model: self.model.clone(),
            task: self.task.clone(),
            sizes: self.sizes,
            regimes: vec![
                RegimeSpec {
                    regime: Regime::Under,
                    source_epochs: self.regimes.under.source_epochs,
                    lr: self.regimes.under.lr,
                    batch_size: self.regimes.under.batch_size,
                },
                RegimeSpec {
                    regime: Regime::Over,
                    source_epochs: self.regimes.over.source_epochs,
                    lr: self.regimes.over.lr,
                    batch_size: self.regimes.over.batch_size,
                },
            ],
            strategies: self.strategies.clone(),
            seeds: self.seeds.clone(),
            locator: self.locator.clone(),
            diag: self.diagnostics.clone(),
        }
    }

    /// Serialize back to TOML (used to record the resolved config).
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Format(format!("config encode: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::StrategyKind;

    #[test]
    fn empty_config_is_malformed() {
        assert!(matches!(
            ExperimentConfig::parse(""),
            Err(Error::Format(_))
        ));
        assert!(matches!(
            ExperimentConfig::parse("   \n\t\n"),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn minimal_config_inherits_defaults() {
        let cfg = ExperimentConfig::parse("seeds = [7, 8]\n").unwrap();
        assert_eq!(cfg.seeds, vec![7, 8]);
        assert_eq!(cfg.model.num_layers, 6);
        assert_eq!(cfg.strategies.len(), 4);
        assert_eq!(cfg.regimes.over.source_epochs, 8);
        let exp = cfg.to_experiment();
        assert!(exp.validate().is_ok());
    }

    #[test]
    fn nested_sections_override() {
        let text = r#"
seeds = [1, 2]

[model]
num_layers = 5
num_heads = 2
d_model = 16
d_ff = 64
vocab_size = 40
max_seq_len = 20
num_classes = 2
dropout = 0.0

[task]
vocab_size = 39
seq_len = 19
num_classes = 2
family = "token-motif"
substitution_rate = 0.3
label_correlation = 1.0
seed = 5

[regimes.under]
source_epochs = 1

[regimes.over]
source_epochs = 4

[[strategy]]
kind = "shallow-top-k"
k = 1
steps = 10
lr = 2e-5
batch_size = 8

[[strategy]]
kind = "selective-lora"
steps = 10
lr = 2e-5
batch_size = 8

[locator]
method = "greedy"
alpha_mix = 0.5
threshold = 0.25
s = 1
"#;
        let cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(cfg.model.num_layers, 5);
        assert_eq!(cfg.regimes.over.source_epochs, 4);
        assert_eq!(cfg.strategies.len(), 2);
        assert_eq!(cfg.strategies[0].kind, StrategyKind::ShallowTopK);
        assert_eq!(cfg.strategies[0].k, 1);
        assert_eq!(cfg.task.substitution_rate, 0.3);
    }

    #[test]
    fn invalid_experiment_is_rejected_at_parse() {
        // model vocabulary too small for the task ids + [CLS]
        let text = "\n[model]\nnum_layers = 2\nnum_heads = 2\nd_model = 8\nd_ff = 16\nvocab_size = 10\nmax_seq_len = 20\nnum_classes = 2\ndropout = 0.0\n";
        assert!(ExperimentConfig::parse(text).is_err());
    }

    #[test]
    fn roundtrips_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml().unwrap();
        let back = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(back.seeds, cfg.seeds);
        assert_eq!(back.model, cfg.model);
        assert_eq!(back.strategies.len(), cfg.strategies.len());
    }
}
