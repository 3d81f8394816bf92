//! Experiment orchestration: regimes, strategies, run reports, and
//! multi-seed aggregation.
//!
//! A full experiment is the cross product (regime × strategy × seed):
//! pretrain one checkpoint per (regime, seed) on the source domain, then
//! fine-tune it on the target domain under each strategy with
//! diagnostics streaming, and aggregate final accuracies as mean ± std
//! per cell. Runs are isolated (fresh model state and graphs per run)
//! and fully seed-determined.

pub mod optim;
pub mod task;
mod train;

pub use optim::AdamW;
pub use train::{
    activation_grad_profile, calibrate_locator, entropy_profile, eval_stats, finetune, pretrain,
    train_steps, EvalStats, PretrainOutcome,
};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::diag::DiagnosticsLog;
use crate::error::{Error, Result};
use crate::locator::{LocatorConfig, SkiResult};
use crate::lora::LoraTarget;
use crate::model::ModelConfig;
use crate::probes::ProbeReport;

use task::{generate_task, TaskData, TaskSizes, TaskSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, Hash)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Under,
    Over,
}

impl Regime {
    pub fn as_str(&self) -> &'static str {
        match self {
            Regime::Under => "under",
            Regime::Over => "over",
        }
    }
}

/// Source-domain pretraining budget.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegimeSpec {
    pub regime: Regime,
    pub source_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl RegimeSpec {
    /// Short source training: 1 epoch at lr 2e-5, batch 32.
    pub fn under() -> RegimeSpec {
        RegimeSpec {
            regime: Regime::Under,
            source_epochs: 1,
            lr: 2e-5,
            batch_size: 32,
        }
    }

    /// Long source training toward over-confidence: 8 epochs.
    pub fn over() -> RegimeSpec {
        RegimeSpec {
            regime: Regime::Over,
            source_epochs: 8,
            lr: 2e-5,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, Hash)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyKind {
    ShallowTopK,
    Full,
    SelectiveLora,
    LoraEverywhere,
}

impl StrategyKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            StrategyKind::ShallowTopK => "shallow-top-k",
            StrategyKind::Full => "full",
            StrategyKind::SelectiveLora => "selective-lora",
            StrategyKind::LoraEverywhere => "lora-everywhere",
        }
    }
}

/// Adapter hyperparameters (the injection layers come from the locator
/// band or an explicit override).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LoraHyper {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub targets: Vec<LoraTarget>,
}

impl Default for LoraHyper {
    fn default() -> Self {
        LoraHyper {
            rank: 4,
            alpha: 16.0,
            dropout: 0.05,
            targets: LoraTarget::all().to_vec(),
        }
    }
}

fn default_ft_steps() -> usize {
    300
}

fn default_ft_lr() -> f64 {
    2e-5
}

fn default_ft_batch() -> usize {
    16
}

/// One fine-tuning strategy with its training budget.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StrategySpec {
    pub kind: StrategyKind,
    /// Unfrozen top blocks (shallow only).
    #[serde(default)]
    pub k: usize,
    #[serde(default)]
    pub lora: LoraHyper,
    /// Overrides the locator band when set.
    #[serde(default)]
    pub explicit_band: Option<Vec<usize>>,
    #[serde(default = "default_ft_steps")]
    pub steps: usize,
    #[serde(default = "default_ft_lr")]
    pub lr: f64,
    #[serde(default = "default_ft_batch")]
    pub batch_size: usize,
}

impl StrategySpec {
    fn base(kind: StrategyKind) -> StrategySpec {
        StrategySpec {
            kind,
            k: 0,
            lora: LoraHyper::default(),
            explicit_band: None,
            steps: 300,
            lr: 2e-5,
            batch_size: 16,
        }
    }

    /// Top-2 unfreezing at the stated fine-tuning budget.
    pub fn shallow_top2() -> StrategySpec {
        StrategySpec {
            k: 2,
            ..Self::base(StrategyKind::ShallowTopK)
        }
    }

    pub fn full() -> StrategySpec {
        Self::base(StrategyKind::Full)
    }

    pub fn selective_lora() -> StrategySpec {
        Self::base(StrategyKind::SelectiveLora)
    }

    pub fn lora_everywhere() -> StrategySpec {
        Self::base(StrategyKind::LoraEverywhere)
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if self.kind == StrategyKind::ShallowTopK && self.k > num_layers {
            return Err(Error::InvalidInput(format!(
                "shallow k {} exceeds {num_layers} layers",
                self.k
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidInput("batch size must be >= 1".into()));
        }
        if let Some(band) = &self.explicit_band {
            if band.iter().any(|&l| l >= num_layers) {
                return Err(Error::InvalidInput(
                    "explicit band layer out of range".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Measurement knobs shared by every run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiagConfig {
    /// Shared-PCA projection dimension for ΔCKA.
    pub pca_dim: usize,
    /// Validation samples cached for ΔCKA.
    pub cka_samples: usize,
    /// Classifier-only steps used to obtain locator profiles.
    pub calibration_steps: usize,
    pub probe_train: usize,
    pub probe_val: usize,
    /// MLP probe width; defaults to d_model.
    pub probe_hidden: Option<usize>,
    pub eval_batch: usize,
}

impl Default for DiagConfig {
    fn default() -> Self {
        DiagConfig {
            pca_dim: 16,
            cka_samples: 512,
            calibration_steps: 20,
            probe_train: 1000,
            probe_val: 512,
            probe_hidden: None,
            eval_batch: 64,
        }
    }
}

/// Everything one fine-tuning run produced.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub schema: String,
    pub seed: u64,
    pub regime: Option<Regime>,
    pub strategy: StrategySpec,
    pub trainable_params: usize,
    pub total_params: usize,
    pub steps: usize,
    pub locator: SkiResult,
    pub diagnostics: DiagnosticsLog,
    pub delta_cka: Vec<f64>,
    pub probe: ProbeReport,
    pub final_val_accuracy: f64,
    pub final_eval: EvalStats,
    /// Populated when the run could not complete.
    pub failed: Option<String>,
    pub meta: BTreeMap<String, String>,
}

/// Mean and sample standard deviation (n - 1 denominator; 0 for n < 2).
/// Identical inputs (duplicate runs) give exactly zero spread: the mean
/// short-circuits to the common value before any rounding can leak in.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    if xs.iter().all(|&x| x == xs[0]) {
        return (xs[0], 0.0);
    }
    let n = xs.len() as f64;
    let mut sum = 0.0;
    for &x in xs {
        sum += x;
    }
    let mean = sum / n;
    let mut ss = 0.0;
    for &x in xs {
        let d = x - mean;
        ss += d * d;
    }
    (mean, (ss / (n - 1.0)).sqrt())
}

fn mean_vectors(rows: &[Vec<f64>]) -> Vec<f64> {
    if rows.is_empty() {
        return Vec::new();
    }
    let mut acc = vec![0.0; rows[0].len()];
    for row in rows {
        for (a, &v) in acc.iter_mut().zip(row.iter()) {
            *a += v;
        }
    }
    for a in acc.iter_mut() {
        *a /= rows.len() as f64;
    }
    acc
}

/// Per-(regime, strategy) aggregate over seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateCell {
    pub regime: Regime,
    pub strategy: StrategyKind,
    pub seeds: Vec<u64>,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub trainable_params: usize,
    pub mean_entropy_per_layer: Vec<f64>,
    pub mean_act_grad_per_layer: Vec<f64>,
    pub mean_param_grad_per_layer: Vec<f64>,
    pub mean_delta_cka_per_layer: Vec<f64>,
    /// Locator band per seed, in seed order.
    pub bands: Vec<Vec<usize>>,
    /// True when every seed in this cell located the same band.
    pub band_consistent: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FailedRun {
    pub regime: Regime,
    pub strategy: StrategyKind,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Aggregate {
    pub seeds: Vec<u64>,
    pub cells: Vec<AggregateCell>,
    /// Set when any (cell, seed) run failed; those runs are listed.
    pub partial: bool,
    pub failed: Vec<FailedRun>,
}

/// Fold completed reports (plus failures) into per-cell statistics.
/// Reports are grouped by (regime, strategy) and sorted, so aggregation
/// order never depends on run completion order.
pub fn aggregate(reports: &[RunReport], failed: Vec<FailedRun>) -> Aggregate {
    let mut seeds: Vec<u64> = reports.iter().map(|r| r.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();

    let mut keys: Vec<(Regime, StrategyKind)> = reports
        .iter()
        .filter_map(|r| r.regime.map(|reg| (reg, r.strategy.kind)))
        .collect();
    keys.sort();
    keys.dedup();

    let mut cells = Vec::new();
    for (regime, strategy) in keys {
        let mut group: Vec<&RunReport> = reports
            .iter()
            .filter(|r| r.regime == Some(regime) && r.strategy.kind == strategy)
            .collect();
        group.sort_by_key(|r| r.seed);
        let accs: Vec<f64> = group.iter().map(|r| r.final_val_accuracy).collect();
        let (accuracy_mean, accuracy_std) = mean_std(&accs);
        let bands: Vec<Vec<usize>> = group.iter().map(|r| r.locator.band.clone()).collect();
        let band_consistent = bands.windows(2).all(|w| w[0] == w[1]);
        cells.push(AggregateCell {
            regime,
            strategy,
            seeds: group.iter().map(|r| r.seed).collect(),
            accuracy_mean,
            accuracy_std,
            trainable_params: group.first().map_or(0, |r| r.trainable_params),
            mean_entropy_per_layer: mean_vectors(
                &group
                    .iter()
                    .map(|r| r.diagnostics.mean_entropy())
                    .collect::<Vec<_>>(),
            ),
            mean_act_grad_per_layer: mean_vectors(
                &group
                    .iter()
                    .map(|r| r.diagnostics.mean_activation_grad())
                    .collect::<Vec<_>>(),
            ),
            mean_param_grad_per_layer: mean_vectors(
                &group
                    .iter()
                    .map(|r| r.diagnostics.mean_param_grad())
                    .collect::<Vec<_>>(),
            ),
            mean_delta_cka_per_layer: mean_vectors(
                &group.iter().map(|r| r.delta_cka.clone()).collect::<Vec<_>>(),
            ),
            bands,
            band_consistent,
        });
    }
    Aggregate {
        seeds,
        partial: !failed.is_empty(),
        failed,
        cells,
    }
}

/// The full experiment description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Experiment {
    pub model: ModelConfig,
    pub task: TaskSpec,
    pub sizes: TaskSizes,
    pub regimes: Vec<RegimeSpec>,
    pub strategies: Vec<StrategySpec>,
    pub seeds: Vec<u64>,
    pub locator: LocatorConfig,
    pub diag: DiagConfig,
}

impl Experiment {
    /// Desk-scale experiment: both regimes, all four strategies, seeds
    /// 42/43/44.
    pub fn desk_default() -> Experiment {
        Experiment {
            model: ModelConfig::desk_default(),
            task: TaskSpec::desk_default(),
            sizes: TaskSizes::default(),
            regimes: vec![RegimeSpec::under(), RegimeSpec::over()],
            strategies: vec![
                StrategySpec::shallow_top2(),
                StrategySpec::full(),
                StrategySpec::selective_lora(),
                StrategySpec::lora_everywhere(),
            ],
            seeds: vec![42, 43, 44],
            locator: LocatorConfig::default(),
            diag: DiagConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.task.validate()?;
        if self.model.vocab_size < self.task.vocab_size + 1 {
            return Err(Error::InvalidInput(format!(
                "model vocabulary {} cannot hold task ids up to {} plus [CLS]",
                self.model.vocab_size, self.task.vocab_size
            )));
        }
        if self.task.seq_len + 1 > self.model.max_seq_len {
            return Err(Error::InvalidInput(format!(
                "task sequences of {} (+[CLS]) exceed max_seq_len {}",
                self.task.seq_len, self.model.max_seq_len
            )));
        }
        if self.regimes.is_empty() || self.strategies.is_empty() || self.seeds.is_empty() {
            return Err(Error::InvalidInput(
                "need at least one regime, strategy, and seed".into(),
            ));
        }
        let mut regs: Vec<Regime> = self.regimes.iter().map(|r| r.regime).collect();
        regs.sort();
        regs.dedup();
        if regs.len() != self.regimes.len() {
            return Err(Error::InvalidInput("duplicate regime entries".into()));
        }
        if let (Some(under), Some(over)) = (
            self.regimes.iter().find(|r| r.regime == Regime::Under),
            self.regimes.iter().find(|r| r.regime == Regime::Over),
        ) {
            if over.source_epochs <= under.source_epochs {
                return Err(Error::InvalidInput(format!(
                    "over epochs {} must exceed under epochs {}",
                    over.source_epochs, under.source_epochs
                )));
            }
        }
        for s in &self.strategies {
            s.validate(self.model.num_layers)?;
        }
        Ok(())
    }
}

/// Everything a full matrix run produced.
#[derive(Debug)]
pub struct MatrixOutcome {
    pub task: TaskData,
    pub pretrains: Vec<PretrainOutcome>,
    pub reports: Vec<RunReport>,
    pub aggregate: Aggregate,
}

/// Run the full (regime × seed × strategy) matrix sequentially and
/// deterministically. Individual fine-tune failures are collected in
/// the aggregate instead of aborting the matrix.
pub fn run_matrix(exp: &Experiment) -> Result<MatrixOutcome> {
    exp.validate()?;
    let task = generate_task(&exp.task, &exp.sizes)?;
    let mut pretrains = Vec::new();
    let mut reports = Vec::new();
    let mut failed = Vec::new();
    for regime in &exp.regimes {
        for &seed in &exp.seeds {
            let out = pretrain(&exp.model, &task, regime, seed)?;
            for strategy in &exp.strategies {
                match finetune(&out.state, &task, strategy, &exp.locator, &exp.diag, seed) {
                    Ok(mut report) => {
                        report.regime = Some(regime.regime);
                        reports.push(report);
                    }
                    Err(e) => failed.push(FailedRun {
                        regime: regime.regime,
                        strategy: strategy.kind,
                        seed,
                        error: e.to_string(),
                    }),
                }
            }
            pretrains.push(out);
        }
    }
    let agg = aggregate(&reports, failed);
    Ok(MatrixOutcome {
        task,
        pretrains,
        reports,
        aggregate: agg,
    })
}

/// Multi-seed entry point per the experiment contract: at least two
/// seeds, mean ± std per cell, per-seed reports retained.
pub fn multi_seed(exp: &Experiment) -> Result<MatrixOutcome> {
    if exp.seeds.len() < 2 {
        return Err(Error::InvalidInput(
            "multi-seed aggregation needs >= 2 seeds".into(),
        ));
    }
    run_matrix(exp)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_matches_hand_arithmetic() {
        let (m, s) = mean_std(&[0.90, 0.92]);
        assert!((m - 0.91).abs() < 1e-12);
        assert!((s - 0.0141421356).abs() < 1e-9);
        let (m1, s1) = mean_std(&[0.5]);
        assert_eq!((m1, s1), (0.5, 0.0));
    }

    #[test]
    fn identical_runs_have_zero_std() {
        let (_, s) = mean_std(&[0.75, 0.75, 0.75]);
        assert_eq!(s, 0.0);
    }

    #[test]
    fn experiment_validation_catches_mismatches() {
        let mut exp = Experiment::desk_default();
        assert!(exp.validate().is_ok());
        exp.task.vocab_size = exp.model.vocab_size; // no room for [CLS]
        assert!(exp.validate().is_err());
        let mut exp = Experiment::desk_default();
        exp.regimes[1].source_epochs = 1; // over must exceed under
        assert!(exp.validate().is_err());
        let mut exp = Experiment::desk_default();
        exp.seeds.clear();
        assert!(exp.validate().is_err());
    }

    #[test]
    fn failed_runs_mark_the_aggregate_partial() {
        let failed = vec![FailedRun {
            regime: Regime::Over,
            strategy: StrategyKind::Full,
            seed: 43,
            error: "synthetic".into(),
        }];
        let agg = aggregate(&[], failed);
        assert!(agg.partial);
        assert_eq!(agg.failed.len(), 1);
        let clean = aggregate(&[], Vec::new());
        assert!(!clean.partial);
    }

    #[test]
    fn multi_seed_requires_two_seeds() {
        let mut exp = Experiment::desk_default();
        exp.seeds = vec![42];
        assert!(matches!(multi_seed(&exp), Err(Error::InvalidInput(_))));
    }
}
