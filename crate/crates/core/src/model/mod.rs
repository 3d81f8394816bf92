//! The miniature transformer encoder: configuration, parameter state,
//! trainability strategies, and checkpointing.
//!
//! Architecture: token + learned positional embeddings, `L` post-norm
//! blocks (multi-head self-attention, GELU feed-forward, residuals,
//! layernorm after each sub-layer), and a linear classifier over the
//! [CLS] position. [CLS] is a reserved token id prepended to every
//! sequence; each layer's [CLS] vector is its block output at position 0.

mod build;
mod checkpoint;

pub use build::{ForwardTrace, Session};
pub use checkpoint::{load_checkpoint, save_checkpoint};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{init_adapters, LoraSet, LoraSpec, LoraTarget};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Reserved token id for the classification position.
pub const CLS_TOKEN_ID: usize = 0;

fn default_layernorm_eps() -> f64 {
    1e-5
}

fn default_logit_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub num_classes: usize,
    pub dropout: f64,
    #[serde(default = "default_layernorm_eps")]
    pub layernorm_eps: f64,
    /// Fixed multiplier on the classifier logits. Small desk models
    /// trained from scratch at tiny learning rates cannot otherwise
    /// reach the saturated-output regime in the stated budgets.
    #[serde(default = "default_logit_scale")]
    pub logit_scale: f64,
}

impl ModelConfig {
    /// Desk-scale default: six layers, four heads, 32-dim model. Large
    /// enough to exhibit a mid-depth band, small enough for minutes-scale
    /// single-core runs.
    pub fn desk_default() -> ModelConfig {
        ModelConfig {
            num_layers: 6,
            num_heads: 4,
            d_model: 32,
            d_ff: 128,
            vocab_size: 40,
            max_seq_len: 20,
            num_classes: 2,
            dropout: 0.0,
            layernorm_eps: 1e-5,
            logit_scale: 16.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers < 1 {
            return Err(Error::InvalidInput("num_layers must be >= 1".into()));
        }
        if self.num_heads == 0 || self.d_model % self.num_heads != 0 {
            return Err(Error::InvalidInput(format!(
                "d_model {} not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidInput("num_classes must be >= 2".into()));
        }
        if self.vocab_size < 2 || self.max_seq_len < 2 || self.d_ff == 0 || self.d_model == 0 {
            return Err(Error::InvalidInput("degenerate model dimensions".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidInput(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if !(self.logit_scale.is_finite() && self.logit_scale > 0.0) {
            return Err(Error::InvalidInput(format!(
                "logit scale {} must be positive",
                self.logit_scale
            )));
        }
        Ok(())
    }
}

/// Shape and attribution of one named parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    /// Encoder block this parameter belongs to; `None` for embeddings
    /// and the classifier head.
    pub layer: Option<usize>,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Deterministic parameter layout for a config. Names are stable; the
/// order here is the storage and checkpoint order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let d = cfg.d_model;
    let mut specs = vec![
        ParamSpec {
            name: "embed.tok".into(),
            shape: vec![cfg.vocab_size, d],
            layer: None,
        },
        ParamSpec {
            name: "embed.pos".into(),
            shape: vec![cfg.max_seq_len, d],
            layer: None,
        },
    ];
    for l in 0..cfg.num_layers {
        let layer = Some(l);
        let mut push = |name: String, shape: Vec<usize>| {
            specs.push(ParamSpec { name, shape, layer });
        };
        for t in ["q", "k", "v", "o"] {
            push(format!("layer.{l}.attn.w{t}"), vec![d, d]);
            push(format!("layer.{l}.attn.b{t}"), vec![d]);
        }
        push(format!("layer.{l}.ln1.gamma"), vec![d]);
        push(format!("layer.{l}.ln1.beta"), vec![d]);
        push(format!("layer.{l}.ffn.w1"), vec![cfg.d_ff, d]);
        push(format!("layer.{l}.ffn.b1"), vec![cfg.d_ff]);
        push(format!("layer.{l}.ffn.w2"), vec![d, cfg.d_ff]);
        push(format!("layer.{l}.ffn.b2"), vec![d]);
        push(format!("layer.{l}.ln2.gamma"), vec![d]);
        push(format!("layer.{l}.ln2.beta"), vec![d]);
    }
    specs.push(ParamSpec {
        name: "head.w".into(),
        shape: vec![cfg.num_classes, d],
        layer: None,
    });
    specs.push(ParamSpec {
        name: "head.b".into(),
        shape: vec![cfg.num_classes],
        layer: None,
    });
    specs
}

/// Total parameter count implied by a config, without allocating anything.
pub fn total_param_count(cfg: &ModelConfig) -> usize {
    param_specs(cfg).iter().map(|s| s.numel()).sum()
}

/// Adapter parameter count for `m` layers with `t` targets at rank `r`:
/// each adapter holds `A: [r, d]` and `B: [d, r]`.
pub fn lora_param_count(layers: usize, targets: usize, rank: usize, d_model: usize) -> usize {
    layers * targets * 2 * rank * d_model
}

#[derive(Debug, Clone)]
pub struct Param {
    pub spec: ParamSpec,
    pub values: Vec<f64>,
    pub trainable: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Which parameters a fine-tuning run may update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// Top-k encoder blocks plus the classifier head.
    ShallowTopK(usize),
    /// Every parameter, embeddings included.
    Full,
    /// Classifier head only; mounted adapters add their own trainables.
    FrozenBackbone,
}

#[derive(Debug, Clone)]
pub struct ModelState {
    pub config: ModelConfig,
    params: Vec<Param>,
    pub adapters: Option<LoraSet>,
    pub mode: Mode,
}

impl ModelState {
    /// Fresh model with seeded initialization: embeddings are Gaussian,
    /// projection weights Xavier-normal, biases and classifier head zero,
    /// layernorm at identity.
    pub fn init(config: ModelConfig, seed: u64) -> Result<ModelState> {
        config.validate()?;
        let mut rng = Rng::from_stream(seed, "model.init");
        let params = param_specs(&config)
            .into_iter()
            .map(|spec| {
                let n = spec.numel();
                let values = if spec.name.starts_with("embed.") {
                    (0..n).map(|_| rng.normal_scaled(0.5)).collect()
                } else if spec.name.ends_with(".gamma") {
                    vec![1.0; n]
                } else if spec.name == "head.w" {
                    // small but nonzero so gradients reach the encoder
                    // from the first step
                    (0..n).map(|_| rng.normal_scaled(0.02)).collect()
                } else if spec.name.ends_with(".attn.wq") || spec.name.ends_with(".attn.wk") {
                    // near-uniform initial attention: entropy starts at
                    // its ceiling and sharpens only through training
                    (0..n).map(|_| rng.normal_scaled(0.05)).collect()
                } else if spec.shape.len() == 2 {
                    let std = (2.0 / (spec.shape[0] + spec.shape[1]) as f64).sqrt();
                    (0..n).map(|_| rng.normal_scaled(std)).collect()
                } else {
                    // biases and layernorm shifts
                    vec![0.0; n]
                };
                Param {
                    spec,
                    values,
                    trainable: true,
                }
            })
            .collect();
        Ok(ModelState {
            config,
            params,
            adapters: None,
            mode: Mode::Train,
        })
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.spec.name == name)
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.spec.name == name)
    }

    pub fn param_values_mut(&mut self, name: &str) -> Option<&mut Vec<f64>> {
        self.params
            .iter_mut()
            .find(|p| p.spec.name == name)
            .map(|p| &mut p.values)
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub(crate) fn push_raw(config: ModelConfig, params: Vec<Param>) -> ModelState {
        ModelState {
            config,
            params,
            adapters: None,
            mode: Mode::Train,
        }
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// Apply a trainability strategy to the parameter mask.
    pub fn set_strategy(&mut self, strategy: Strategy) -> Result<()> {
        let l = self.config.num_layers;
        match strategy {
            Strategy::ShallowTopK(k) => {
                if k > l {
                    return Err(Error::InvalidInput(format!(
                        "shallow top-{k} exceeds {l} layers"
                    )));
                }
                for p in &mut self.params {
                    p.trainable = match p.spec.layer {
                        Some(layer) => layer >= l - k,
                        None => p.spec.name.starts_with("head."),
                    };
                }
            }
            Strategy::Full => {
                for p in &mut self.params {
                    p.trainable = true;
                }
            }
            Strategy::FrozenBackbone => {
                for p in &mut self.params {
                    p.trainable = p.spec.name.starts_with("head.");
                }
            }
        }
        Ok(())
    }

    /// Exact count of trainable parameters, mounted adapters included.
    pub fn count_trainable(&self) -> usize {
        let base: usize = self
            .params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.values.len())
            .sum();
        base + self.adapters.as_ref().map_or(0, |a| a.num_params())
    }

    pub fn total_params(&self) -> usize {
        self.params.iter().map(|p| p.values.len()).sum()
    }

    /// FNV-1a over the little-endian bytes of every frozen parameter, in
    /// storage order. Stable across optimizer steps by contract.
    pub fn frozen_checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in &self.params {
            if p.trainable {
                continue;
            }
            for v in &p.values {
                for b in v.to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    /// Mount adapters: freezes the backbone (classifier stays trainable)
    /// and attaches zero-initialized-B adapters, so the forward output at
    /// mount time is bitwise unchanged.
    pub fn mount_lora(&mut self, spec: &LoraSpec, seed: u64) -> Result<()> {
        spec.validate(self.config.num_layers)?;
        if let Some(existing) = &self.adapters {
            for &layer in &spec.layers {
                for &target in &spec.targets {
                    if existing.get(layer, target).is_some() {
                        return Err(Error::Conflict(format!(
                            "adapter already mounted on layer {layer} target {}",
                            target.as_str()
                        )));
                    }
                }
            }
        }
        let fresh = init_adapters(spec, self.config.d_model, self.config.num_layers, seed)?;
        self.set_strategy(Strategy::FrozenBackbone)?;
        match &mut self.adapters {
            Some(set) => {
                set.adapters.extend(fresh.adapters);
                set.adapters.sort_by_key(|a| (a.layer, a.target));
            }
            None => self.adapters = Some(fresh),
        }
        Ok(())
    }

    /// Fold every adapter into its base weight (`W += multiplier * B·A`)
    /// and drop the adapter set. Requires eval mode when any adapter was
    /// mounted with dropout, and errors when nothing is mounted.
    pub fn merge_lora(&mut self) -> Result<()> {
        let set = self.adapters.take().ok_or_else(|| {
            Error::InvalidState("no adapters mounted (already merged?)".into())
        })?;
        if self.mode == Mode::Train && set.adapters.iter().any(|a| a.dropout > 0.0) {
            self.adapters = Some(set);
            return Err(Error::InvalidState(
                "cannot merge while training-mode dropout is active; switch to eval".into(),
            ));
        }
        for ad in &set.adapters {
            let delta = ad.dense_delta();
            let name = format!("layer.{}.attn.w{}", ad.layer, ad.target.as_str());
            let w = self
                .param_values_mut(&name)
                .ok_or_else(|| Error::InvalidState(format!("missing weight {name}")))?;
            for (wv, dv) in w.iter_mut().zip(delta.values().iter()) {
                *wv += dv;
            }
        }
        Ok(())
    }

    /// Per-layer [CLS] representations for a set of sequences, batched
    /// internally. Returns one `[n, d_model]` tensor per layer.
    pub fn layer_cls_representations(
        &self,
        tokens: &[Vec<usize>],
        batch_size: usize,
    ) -> Result<Vec<Tensor>> {
        if tokens.is_empty() {
            return Err(Error::InvalidInput("no sequences given".into()));
        }
        let n = tokens.len();
        let d = self.config.d_model;
        let l = self.config.num_layers;
        let seq = tokens[0].len();
        let mut out = vec![vec![0.0; n * d]; l];
        let mut done = 0;
        while done < n {
            let b = batch_size.min(n - done);
            let mut sess = Session::build(self, b, seq, false, 0)?;
            let flat: Vec<usize> = tokens[done..done + b]
                .iter()
                .flat_map(|row| row.iter().copied())
                .collect();
            sess.load_batch(&flat, &vec![0; b])?;
            sess.forward()?;
            for layer in 0..l {
                for (i, row) in sess.cls_rows(layer).enumerate() {
                    out[layer][(done + i) * d..(done + i + 1) * d].copy_from_slice(row);
                }
            }
            done += b;
        }
        out.into_iter()
            .map(|v| Tensor::new(vec![n, d], v))
            .collect()
    }
}

/// Map a (layer, target) pair to the base weight parameter name.
pub fn projection_weight_name(layer: usize, target: LoraTarget) -> String {
    format!("layer.{layer}.attn.w{}", target.as_str())
}
