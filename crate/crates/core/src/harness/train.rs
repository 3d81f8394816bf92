//! Pretraining, calibration, and fine-tuning loops with streaming
//! diagnostics, plus batched evaluation helpers.

use std::collections::BTreeMap;

use crate::diag::{delta_cka, row_entropy_mean, DiagnosticsLog};
use crate::error::{Error, Result};
use crate::locator::{locate, LocatorConfig, SkiResult};
use crate::lora::LoraSpec;
use crate::model::{ModelConfig, ModelState, Session, Strategy};
use crate::probes::{probe_sweep, ProbeData, ProbeReport};
use crate::rng::{stream_seed, Rng};
use crate::tensor::{softmax_row, Tensor};

use super::task::{Dataset, TaskData};
use super::{DiagConfig, Regime, RegimeSpec, RunReport, StrategyKind, StrategySpec};
use super::optim::AdamW;

/// Aggregate statistics of one evaluation pass.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalStats {
    pub accuracy: f64,
    /// Mean over samples of the winning-class softmax probability.
    pub mean_max_softmax: f64,
    pub mean_loss: f64,
    pub samples: usize,
}

fn batch_sizes(n: usize, batch: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut left = n;
    while left > 0 {
        let b = batch.min(left);
        out.push(b);
        left -= b;
    }
    out
}

/// Run `f` over the dataset in batches with eval-mode sessions (dropout
/// off). Sessions are rebuilt only when the batch size changes.
fn for_each_eval_batch<F>(state: &ModelState, ds: &Dataset, batch: usize, mut f: F) -> Result<()>
where
    F: FnMut(&Session, &[usize]) -> Result<()>,
{
    if ds.is_empty() {
        return Err(Error::InvalidInput("empty dataset".into()));
    }
    let seq = ds.tokens[0].len();
    let mut sess: Option<Session> = None;
    let mut offset = 0usize;
    for b in batch_sizes(ds.len(), batch) {
        let rebuild = sess.as_ref().map(|s| s.batch() != b).unwrap_or(true);
        if rebuild {
            sess = Some(Session::build(state, b, seq, false, 0)?);
        }
        let sess = sess.as_mut().unwrap();
        let flat: Vec<usize> = ds.tokens[offset..offset + b]
            .iter()
            .flat_map(|r| r.iter().copied())
            .collect();
        let labels = &ds.labels[offset..offset + b];
        sess.load_batch(&flat, labels)?;
        sess.forward()?;
        f(sess, labels)?;
        offset += b;
    }
    Ok(())
}

/// Accuracy, confidence, and loss of a model on a dataset.
pub fn eval_stats(state: &ModelState, ds: &Dataset, batch: usize) -> Result<EvalStats> {
    let classes = state.config.num_classes;
    let mut hits = 0usize;
    let mut conf = 0.0;
    let mut loss = 0.0;
    let mut batches = 0usize;
    for_each_eval_batch(state, ds, batch, |sess, labels| {
        let logits = sess.logits();
        let mut probs = vec![0.0; classes];
        for (row, &label) in logits.chunks(classes).zip(labels.iter()) {
            softmax_row(row, &mut probs);
            let mut best = 0;
            for (i, &p) in probs.iter().enumerate() {
                if p > probs[best] {
                    best = i;
                }
            }
            if best == label {
                hits += 1;
            }
            conf += probs[best];
        }
        loss += sess.loss() * labels.len() as f64;
        batches += 1;
        Ok(())
    })?;
    let n = ds.len();
    Ok(EvalStats {
        accuracy: hits as f64 / n as f64,
        mean_max_softmax: conf / n as f64,
        mean_loss: loss / n as f64,
        samples: n,
    })
}

/// Mean attention entropy per layer over a dataset (row-weighted).
pub fn entropy_profile(state: &ModelState, ds: &Dataset, batch: usize) -> Result<Vec<f64>> {
    let l = state.config.num_layers;
    let mut acc = vec![0.0; l];
    let mut rows = 0usize;
    for_each_eval_batch(state, ds, batch, |sess, labels| {
        for (layer, slot) in acc.iter_mut().enumerate() {
            let support = sess.seq();
            let h = row_entropy_mean(sess.attention_values(layer), support)?;
            *slot += h * labels.len() as f64;
        }
        rows += labels.len();
        Ok(())
    })?;
    for slot in acc.iter_mut() {
        *slot /= rows as f64;
    }
    Ok(acc)
}

/// Mean activation-gradient norm per layer over the first `n_batches`
/// batches of a dataset, without updating any parameter. Taps make this
/// observable regardless of the trainability mask.
pub fn activation_grad_profile(
    state: &ModelState,
    ds: &Dataset,
    batch: usize,
    n_batches: usize,
) -> Result<Vec<f64>> {
    if ds.len() < batch || n_batches == 0 {
        return Err(Error::InvalidInput("dataset smaller than one batch".into()));
    }
    let seq = ds.tokens[0].len();
    let l = state.config.num_layers;
    let mut sess = Session::build(state, batch, seq, false, 0)?;
    let mut acc = vec![0.0; l];
    let n_batches = n_batches.min(ds.len() / batch);
    for bi in 0..n_batches {
        let lo = bi * batch;
        let flat: Vec<usize> = ds.tokens[lo..lo + batch]
            .iter()
            .flat_map(|r| r.iter().copied())
            .collect();
        sess.load_batch(&flat, &ds.labels[lo..lo + batch])?;
        sess.forward()?;
        sess.backward()?;
        for (layer, slot) in acc.iter_mut().enumerate() {
            *slot += sess.activation_grad_norm(layer)?;
        }
    }
    for slot in acc.iter_mut() {
        *slot /= n_batches as f64;
    }
    Ok(acc)
}

/// Per-layer [CLS] representations of the first `n` rows of a dataset.
fn cls_representations(state: &ModelState, ds: &Dataset, n: usize, batch: usize) -> Result<Vec<Tensor>> {
    let n = n.min(ds.len());
    state.layer_cls_representations(&ds.tokens[..n], batch)
}

/// Deterministic epoch-cycling batch sampler over a dataset.
struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    rng: Rng,
}

impl BatchSampler {
    fn new(n: usize, seed: u64) -> BatchSampler {
        let mut s = BatchSampler {
            order: (0..n).collect(),
            cursor: 0,
            rng: Rng::new(seed),
        };
        s.rng.shuffle(&mut s.order);
        s
    }

    fn next_indices(&mut self, batch: usize, out: &mut Vec<usize>) {
        out.clear();
        while out.len() < batch {
            if self.cursor == self.order.len() {
                self.rng.shuffle(&mut self.order);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
    }
}

/// Train `state` in place for `steps` batches; optionally stream
/// per-step diagnostics. Returns the per-step loss trajectory.
pub fn train_steps(
    state: &mut ModelState,
    ds: &Dataset,
    steps: usize,
    batch: usize,
    lr: f64,
    seed: u64,
    stream: &str,
    mut diagnostics: Option<&mut DiagnosticsLog>,
) -> Result<Vec<f64>> {
    if steps == 0 {
        return Ok(Vec::new());
    }
    if ds.len() < batch {
        return Err(Error::InvalidInput(format!(
            "dataset of {} rows cannot fill batches of {batch}",
            ds.len()
        )));
    }
    let seq = ds.tokens[0].len();
    let l = state.config.num_layers;
    let mut sess = Session::build(
        state,
        batch,
        seq,
        true,
        stream_seed(seed, &format!("{stream}.dropout")),
    )?;
    // divergence surfaces as a non-finite loss within one step; the
    // per-node scan is too expensive for the hot loop
    sess.graph_mut().set_finite_checks(false);
    let mut opt = AdamW::new(sess.graph(), sess.trainable_nodes(), lr, 0.0);
    let mut sampler = BatchSampler::new(ds.len(), stream_seed(seed, &format!("{stream}.shuffle")));
    let mut idx = Vec::with_capacity(batch);
    let mut flat = Vec::with_capacity(batch * seq);
    let mut labels = Vec::with_capacity(batch);
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        sampler.next_indices(batch, &mut idx);
        flat.clear();
        labels.clear();
        for &i in &idx {
            flat.extend_from_slice(&ds.tokens[i]);
            labels.push(ds.labels[i]);
        }
        sess.load_batch(&flat, &labels)?;
        let run = (|| -> Result<f64> {
            sess.forward()?;
            sess.backward()?;
            let loss = sess.loss();
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("loss is {loss}")));
            }
            Ok(loss)
        })();
        let loss = run.map_err(|e| {
            Error::RunFailure(format!(
                "training diverged at step {step} ({stream}): {e}; last losses {:?}",
                &losses[losses.len().saturating_sub(5)..]
            ))
        })?;
        losses.push(loss);
        if let Some(log) = diagnostics.as_deref_mut() {
            let mut entropy = Vec::with_capacity(l);
            let mut act = Vec::with_capacity(l);
            for layer in 0..l {
                entropy.push(row_entropy_mean(
                    sess.attention_values(layer),
                    sess.seq(),
                )?);
                act.push(sess.activation_grad_norm(layer)?);
            }
            let par: Vec<f64> = sess
                .param_grad_sq_per_layer(state)
                .into_iter()
                .map(f64::sqrt)
                .collect();
            log.record_step(&entropy, &act, &par)?;
        }
        opt.step(sess.graph_mut())?;
    }
    sess.write_back(state)?;
    Ok(losses)
}

/// A pretrained checkpoint with its source-domain measurements.
#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub state: ModelState,
    pub regime: Regime,
    pub seed: u64,
    pub losses: Vec<f64>,
    pub source_val: EvalStats,
    /// Mean attention entropy per layer on held-out source data.
    pub entropy_per_layer: Vec<f64>,
    pub min_entropy: f64,
}

/// Train a fresh model on the source domain under a regime. The model
/// initialization and data order depend only on the seed, so UNDER and
/// OVER at a matched seed share a trajectory prefix.
pub fn pretrain(
    model_cfg: &ModelConfig,
    task: &TaskData,
    regime: &RegimeSpec,
    seed: u64,
) -> Result<PretrainOutcome> {
    let mut state = ModelState::init(model_cfg.clone(), seed)?;
    state.set_strategy(Strategy::Full)?;
    let steps_per_epoch = task.source_train.len() / regime.batch_size;
    if steps_per_epoch == 0 {
        return Err(Error::InvalidInput(
            "source split smaller than one batch".into(),
        ));
    }
    let steps = regime.source_epochs * steps_per_epoch;
    let losses = train_steps(
        &mut state,
        &task.source_train,
        steps,
        regime.batch_size,
        regime.lr,
        seed,
        "pretrain",
        None,
    )?;
    let source_val = eval_stats(&state, &task.source_val, 64)?;
    let entropy_per_layer = entropy_profile(&state, &task.source_val, 64)?;
    let min_entropy = entropy_per_layer
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    Ok(PretrainOutcome {
        state,
        regime: regime.regime,
        seed,
        losses,
        source_val,
        entropy_per_layer,
        min_entropy,
    })
}

/// Calibration: short classifier-only training on the target domain to
/// obtain entropy/gradient profiles before choosing injection layers.
/// Runs on a clone; the checkpoint is untouched.
pub fn calibrate_locator(
    checkpoint: &ModelState,
    task: &TaskData,
    strategy: &StrategySpec,
    locator_cfg: &LocatorConfig,
    calibration_steps: usize,
    seed: u64,
) -> Result<(SkiResult, bool)> {
    let mut probe_state = checkpoint.clone();
    probe_state.set_strategy(Strategy::FrozenBackbone)?;
    let mut log = DiagnosticsLog::new(probe_state.config.num_layers);
    train_steps(
        &mut probe_state,
        &task.target_train,
        calibration_steps,
        strategy.batch_size,
        strategy.lr,
        seed,
        "calibrate",
        Some(&mut log),
    )?;
    let h = log.mean_entropy();
    let g = log.mean_activation_grad();
    match locate(&h, &g, locator_cfg) {
        Ok(r) => Ok((r, false)),
        Err(Error::Degenerate(_)) => {
            // fall back to every layer, flagged
            let l = probe_state.config.num_layers;
            let all: Vec<usize> = (0..l).collect();
            Ok((
                SkiResult {
                    h: h.clone(),
                    g: g.clone(),
                    h_tilde: vec![0.0; l],
                    g_tilde: vec![0.0; l],
                    ski: vec![0.0; l],
                    alpha_mix: locator_cfg.alpha_mix,
                    candidates: all.clone(),
                    band: all,
                    s: locator_cfg.s,
                    method: locator_cfg.method,
                    entropy_min_layer: None,
                    grad_below_layer: None,
                    grad_threshold: Some(locator_cfg.threshold),
                    grad_below_missing: true,
                },
                true,
            ))
        }
        Err(e) => Err(e),
    }
}

/// One fine-tuning run: locate (for adapter strategies), apply the
/// strategy, stream diagnostics for every step, measure ΔCKA between
/// cached before/after representations, evaluate, and probe.
pub fn finetune(
    checkpoint: &ModelState,
    task: &TaskData,
    strategy: &StrategySpec,
    locator_cfg: &LocatorConfig,
    diag_cfg: &DiagConfig,
    seed: u64,
) -> Result<RunReport> {
    let cfg = &checkpoint.config;
    let l = cfg.num_layers;

    let (locator_record, locator_fallback) = calibrate_locator(
        checkpoint,
        task,
        strategy,
        locator_cfg,
        diag_cfg.calibration_steps,
        seed,
    )?;

    let mut state = checkpoint.clone();
    let band: Vec<usize> = match (&strategy.kind, &strategy.explicit_band) {
        (_, Some(explicit)) => explicit.clone(),
        (StrategyKind::LoraEverywhere, None) => (0..l).collect(),
        _ => locator_record.band.clone(),
    };
    match strategy.kind {
        StrategyKind::ShallowTopK => state.set_strategy(Strategy::ShallowTopK(strategy.k))?,
        StrategyKind::Full => state.set_strategy(Strategy::Full)?,
        StrategyKind::SelectiveLora | StrategyKind::LoraEverywhere => {
            let hyper = &strategy.lora;
            let spec = LoraSpec {
                rank: hyper.rank,
                alpha: hyper.alpha,
                dropout: hyper.dropout,
                targets: hyper.targets.clone(),
                layers: band.clone(),
            };
            state.mount_lora(&spec, stream_seed(seed, "lora.mount"))?;
        }
    }
    let trainable_params = state.count_trainable();
    let total_params = state.total_params();
    let frozen_before = state.frozen_checksum();

    let cka_n = diag_cfg.cka_samples.min(task.target_val.len());
    let before_reps = cls_representations(&state, &task.target_val, cka_n, diag_cfg.eval_batch)?;

    let mut diagnostics = DiagnosticsLog::new(l);
    let losses = train_steps(
        &mut state,
        &task.target_train,
        strategy.steps,
        strategy.batch_size,
        strategy.lr,
        seed,
        "finetune",
        Some(&mut diagnostics),
    )?;

    let frozen_after = state.frozen_checksum();
    if frozen_before != frozen_after {
        return Err(Error::RunFailure(
            "frozen parameters changed during fine-tuning".into(),
        ));
    }

    let after_reps = cls_representations(&state, &task.target_val, cka_n, diag_cfg.eval_batch)?;
    let mut delta = Vec::with_capacity(l);
    for layer in 0..l {
        delta.push(delta_cka(
            &before_reps[layer],
            &after_reps[layer],
            diag_cfg.pca_dim,
        )?);
    }

    let final_eval = eval_stats(&state, &task.target_val, diag_cfg.eval_batch)?;

    let probe_train = diag_cfg.probe_train.min(task.target_train.len());
    let probe_val = diag_cfg.probe_val.min(task.target_val.len());
    let probe_report: ProbeReport = probe_sweep(
        &state,
        &ProbeData {
            train_tokens: &task.target_train.tokens[..probe_train],
            train_labels: &task.target_train.labels[..probe_train],
            val_tokens: &task.target_val.tokens[..probe_val],
            val_labels: &task.target_val.labels[..probe_val],
        },
        diag_cfg.probe_hidden.unwrap_or(cfg.d_model),
        stream_seed(seed, "probes"),
    )?;

    let mut meta = BTreeMap::new();
    meta.insert("seed".into(), seed.to_string());
    meta.insert("entropy_unit".into(), "nats".into());
    meta.insert("optimizer".into(), "adamw(lr fixed, wd 0)".into());
    meta.insert(
        "lora_multiplier_convention".into(),
        "alpha / rank".into(),
    );
    meta.insert("band".into(), format!("{band:?}"));
    if locator_fallback {
        meta.insert(
            "locator_fallback".into(),
            "degenerate profiles; band fell back to all layers".into(),
        );
    }
    if !losses.is_empty() {
        meta.insert("final_train_loss".into(), losses[losses.len() - 1].to_string());
    }

    Ok(RunReport {
        schema: "skidiag.run/1".into(),
        seed,
        regime: None,
        strategy: strategy.clone(),
        trainable_params,
        total_params,
        steps: strategy.steps,
        locator: locator_record,
        diagnostics,
        delta_cka: delta,
        probe: probe_report,
        final_val_accuracy: final_eval.accuracy,
        final_eval,
        failed: None,
        meta,
    })
}
