//! Synthetic source/target classification tasks with a controllable
//! distribution shift.
//!
//! Token-motif family: each class plants a handful of class-specific
//! motif tokens into background noise; the target domain substitutes
//! source motifs with disjoint target motifs at a configurable rate.
//! Positional-motif family: a marker token's position (first vs second
//! half) carries the label; the shift substitutes the marker identity.
//!
//! Token id 0 is reserved for [CLS]; data ids run from 1 to
//! `vocab_size` inclusive, so a model consuming these sequences needs a
//! vocabulary of at least `vocab_size + 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_seed, Rng};

/// Motif tokens planted per sequence.
const MOTIF_PLANTS: usize = 3;
/// Distinct motif token ids per (class, domain) set.
const MOTIF_SET_SIZE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PatternFamily {
    TokenMotif,
    PositionalMotif,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskSpec {
    /// Number of data token ids (1..=vocab_size; id 0 stays reserved).
    pub vocab_size: usize,
    /// Data tokens per sequence (before the [CLS] prepend).
    pub seq_len: usize,
    pub num_classes: usize,
    pub family: PatternFamily,
    /// Probability each planted motif token is drawn from the target
    /// motif set instead of the source set. 0 reproduces the source
    /// distribution; 1 substitutes every motif.
    pub substitution_rate: f64,
    /// Probability the planted motif matches the true label; the Bayes
    /// accuracy of the task.
    pub label_correlation: f64,
    pub seed: u64,
}

impl TaskSpec {
    pub fn desk_default() -> TaskSpec {
        TaskSpec {
            vocab_size: 39,
            seq_len: 19,
            num_classes: 2,
            family: PatternFamily::TokenMotif,
            substitution_rate: 0.15,
            label_correlation: 1.0,
            seed: 1234,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes != 2 {
            return Err(Error::InvalidInput(
                "task generator currently supports exactly 2 classes".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.substitution_rate) {
            return Err(Error::InvalidInput(format!(
                "substitution rate {} outside [0, 1]",
                self.substitution_rate
            )));
        }
        if self.label_correlation <= 0.0 || self.label_correlation > 1.0 {
            return Err(Error::InvalidInput(format!(
                "label correlation {} outside (0, 1]",
                self.label_correlation
            )));
        }
        match self.family {
            PatternFamily::TokenMotif => {
                if self.seq_len < MOTIF_PLANTS {
                    return Err(Error::InvalidInput(format!(
                        "motif of {MOTIF_PLANTS} plants does not fit a {}-token sequence",
                        self.seq_len
                    )));
                }
                // 2 classes x {source, target} motif sets + background pool
                let reserved = 4 * MOTIF_SET_SIZE;
                if self.vocab_size < reserved + 4 {
                    return Err(Error::InvalidInput(format!(
                        "vocabulary of {} cannot hold {} motif ids plus background",
                        self.vocab_size, reserved
                    )));
                }
            }
            PatternFamily::PositionalMotif => {
                if self.seq_len < 2 {
                    return Err(Error::InvalidInput(
                        "positional motif needs at least 2 positions".into(),
                    ));
                }
                if self.vocab_size < 6 {
                    return Err(Error::InvalidInput(
                        "vocabulary too small for markers plus background".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Motif ids for (class, domain): carved from the top of the
    /// vocabulary, all four sets disjoint.
    fn motif_set(&self, class: usize, target_domain: bool) -> Vec<usize> {
        let top = self.vocab_size; // ids are 1..=vocab_size
        let set_index = class * 2 + usize::from(target_domain);
        let hi = top - set_index * MOTIF_SET_SIZE;
        ((hi - MOTIF_SET_SIZE + 1)..=hi).collect()
    }

    fn background_limit(&self) -> usize {
        match self.family {
            PatternFamily::TokenMotif => self.vocab_size - 4 * MOTIF_SET_SIZE,
            PatternFamily::PositionalMotif => self.vocab_size - 2,
        }
    }

    /// Marker ids for the positional family: (source, target).
    fn markers(&self) -> (usize, usize) {
        (self.vocab_size - 1, self.vocab_size)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub tokens: Vec<Vec<usize>>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Fraction of rows per class.
    pub fn class_balance(&self) -> Vec<f64> {
        let classes = self.labels.iter().copied().max().unwrap_or(0) + 1;
        let mut counts = vec![0usize; classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
            .into_iter()
            .map(|c| c as f64 / self.labels.len() as f64)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TaskSizes {
    pub source_train: usize,
    pub source_val: usize,
    pub target_train: usize,
    pub target_val: usize,
}

impl Default for TaskSizes {
    fn default() -> Self {
        TaskSizes {
            source_train: 2048,
            source_val: 512,
            target_train: 2048,
            target_val: 512,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TaskData {
    pub source_train: Dataset,
    pub source_val: Dataset,
    pub target_train: Dataset,
    pub target_val: Dataset,
}

fn generate_split(spec: &TaskSpec, n: usize, target_domain: bool, stream: &str) -> Dataset {
    let mut rng = Rng::new(stream_seed(spec.seed, stream));
    let bg_limit = spec.background_limit();
    let mut tokens = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let sub_rate = if target_domain { spec.substitution_rate } else { 0.0 };
    for i in 0..n {
        // exactly balanced labels, order shuffled below
        let label = i % 2;
        let mut row = vec![0usize; spec.seq_len];
        for slot in row.iter_mut() {
            *slot = 1 + rng.below(bg_limit);
        }
        // the motif class matches the label with probability rho
        let motif_class = if rng.bernoulli(spec.label_correlation) {
            label
        } else {
            1 - label
        };
        match spec.family {
            PatternFamily::TokenMotif => {
                let src = spec.motif_set(motif_class, false);
                let tgt = spec.motif_set(motif_class, true);
                let mut planted = 0;
                while planted < MOTIF_PLANTS {
                    let pos = rng.below(spec.seq_len);
                    // draw the domain per plant; rng consumption is
                    // identical for every substitution rate
                    let use_target = rng.bernoulli(sub_rate);
                    let set = if use_target { &tgt } else { &src };
                    row[pos] = set[rng.below(set.len())];
                    planted += 1;
                }
            }
            PatternFamily::PositionalMotif => {
                let (src_marker, tgt_marker) = spec.markers();
                let half = spec.seq_len / 2;
                let pos = if motif_class == 0 {
                    rng.below(half.max(1))
                } else {
                    half + rng.below((spec.seq_len - half).max(1))
                };
                let use_target = rng.bernoulli(sub_rate);
                row[pos] = if use_target { tgt_marker } else { src_marker };
            }
        }
        tokens.push(row);
        labels.push(label);
    }
    // deterministic joint shuffle
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let tokens = order.iter().map(|&i| tokens[i].clone()).collect();
    let labels = order.iter().map(|&i| labels[i]).collect();
    Dataset { tokens, labels }
}

/// Build all four splits. Source and target share the vocabulary and
/// label space; the target differs from the source exactly by the
/// declared motif substitution. Deterministic per seed.
pub fn generate_task(spec: &TaskSpec, sizes: &TaskSizes) -> Result<TaskData> {
    spec.validate()?;
    if sizes.source_train == 0 || sizes.target_train == 0 {
        return Err(Error::InvalidInput("empty training split".into()));
    }
    Ok(TaskData {
        source_train: generate_split(spec, sizes.source_train, false, "data.source.train"),
        source_val: generate_split(spec, sizes.source_val, false, "data.source.val"),
        target_train: generate_split(spec, sizes.target_train, true, "data.target.train"),
        target_val: generate_split(spec, sizes.target_val, true, "data.target.val"),
    })
}

/// Bag-of-tokens count features for the reference classifier: one count
/// per vocabulary id (ids 1..=vocab).
pub fn bag_of_tokens(ds: &Dataset, vocab_size: usize) -> crate::tensor::Tensor {
    let n = ds.len();
    let mut out = vec![0.0; n * vocab_size];
    for (i, row) in ds.tokens.iter().enumerate() {
        for &t in row {
            out[i * vocab_size + (t - 1)] += 1.0;
        }
    }
    crate::tensor::Tensor::new(vec![n, vocab_size], out).expect("finite counts")
}

/// Accuracy of the motif-set oracle: counts source-motif tokens per
/// class and predicts the larger count (class 0 on ties). An upper
/// reference on source-domain data, chance on fully substituted targets.
pub fn oracle_accuracy(spec: &TaskSpec, ds: &Dataset) -> f64 {
    let set0 = spec.motif_set(0, false);
    let set1 = spec.motif_set(1, false);
    let mut hits = 0usize;
    for (row, &label) in ds.tokens.iter().zip(ds.labels.iter()) {
        let c0 = row.iter().filter(|t| set0.contains(t)).count();
        let c1 = row.iter().filter(|t| set1.contains(t)).count();
        let pred = usize::from(c1 > c0);
        if pred == label {
            hits += 1;
        }
    }
    hits as f64 / ds.len() as f64
}
