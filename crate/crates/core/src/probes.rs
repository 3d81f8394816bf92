//! Task-separability probes: linear and 2-layer MLP classifiers trained
//! on frozen per-layer [CLS] representations.
//!
//! Probes train with decoupled-weight-decay Adam at a fixed step size,
//! no early stopping. Everything is seeded: shuffling, initialization,
//! and MLP dropout, so a (config, seed) pair reproduces accuracies to
//! the last bit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::AdamW;
use crate::model::ModelState;
use crate::rng::{stream_seed, Rng};
use crate::tensor::{Graph, NodeId, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeKind {
    Linear,
    Mlp,
}

impl ProbeKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ProbeKind::Linear => "linear",
            ProbeKind::Mlp => "mlp",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub kind: ProbeKind,
    /// Hidden width (MLP only).
    pub hidden_dim: usize,
    /// Hidden-layer dropout (MLP only).
    pub dropout: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl ProbeConfig {
    /// Stated probe protocol: 20 epochs, batch 128, lr 3e-3, weight
    /// decay 1e-4, MLP dropout 0.1.
    pub fn new(kind: ProbeKind, hidden_dim: usize, seed: u64) -> ProbeConfig {
        ProbeConfig {
            kind,
            hidden_dim,
            dropout: 0.1,
            epochs: 20,
            batch_size: 128,
            learning_rate: 3e-3,
            weight_decay: 1e-4,
            seed,
        }
    }
}

/// A trained probe; holds its weights for later evaluation.
#[derive(Debug, Clone)]
pub struct Probe {
    pub kind: ProbeKind,
    pub num_classes: usize,
    /// Linear: `[(w, b)]`; MLP: `[(w1, b1), (w2, b2)]`.
    pub layers: Vec<(Tensor, Tensor)>,
}

impl Probe {
    /// Class predictions (argmax, lowest index on ties). Dropout is off.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        if x.shape().len() != 2 {
            return Err(Error::InvalidInput("expected [n, d] inputs".into()));
        }
        let n = x.shape()[0];
        let mut cur: Vec<f64> = x.values().to_vec();
        let mut cur_d = x.shape()[1];
        for (i, (w, b)) in self.layers.iter().enumerate() {
            let out_d = w.shape()[0];
            if w.shape()[1] != cur_d {
                return Err(Error::InvalidInput(format!(
                    "probe layer {i} expects {} features, got {cur_d}",
                    w.shape()[1]
                )));
            }
            let mut next = vec![0.0; n * out_d];
            for (orow, xrow) in next.chunks_mut(out_d).zip(cur.chunks(cur_d)) {
                for (j, o) in orow.iter_mut().enumerate() {
                    let wrow = &w.values()[j * cur_d..(j + 1) * cur_d];
                    let mut acc = 0.0;
                    for (xv, wv) in xrow.iter().zip(wrow.iter()) {
                        acc += xv * wv;
                    }
                    *o = acc + b.values()[j];
                }
            }
            let last = i + 1 == self.layers.len();
            if !last {
                for v in next.iter_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            cur = next;
            cur_d = out_d;
        }
        Ok(cur
            .chunks(self.num_classes)
            .map(|row| {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect())
    }

    /// Fraction of correct predictions.
    pub fn accuracy(&self, x: &Tensor, y: &[usize]) -> Result<f64> {
        let preds = self.predict(x)?;
        if preds.len() != y.len() {
            return Err(Error::InvalidInput("label count mismatch".into()));
        }
        let hits = preds.iter().zip(y.iter()).filter(|(p, t)| p == t).count();
        Ok(hits as f64 / y.len() as f64)
    }
}

struct ProbeGraph {
    graph: Graph,
    x: NodeId,
    y: NodeId,
    loss: NodeId,
    params: Vec<NodeId>,
}

fn build_probe_graph(
    cfg: &ProbeConfig,
    batch: usize,
    d: usize,
    classes: usize,
    init: &[(Vec<f64>, Vec<f64>)],
    training: bool,
) -> Result<ProbeGraph> {
    let mut g = Graph::new();
    g.set_training(training);
    g.set_dropout_seed(stream_seed(cfg.seed, "probe.dropout"));
    let x = g.input(&[batch, d]);
    let y = g.input(&[batch]);
    let mut params = Vec::new();
    let mut cur = x;
    let dims: Vec<(usize, usize)> = match cfg.kind {
        ProbeKind::Linear => vec![(classes, d)],
        ProbeKind::Mlp => vec![(cfg.hidden_dim, d), (classes, cfg.hidden_dim)],
    };
    for (i, &(out_d, in_d)) in dims.iter().enumerate() {
        let w = g.param(&[out_d, in_d], init[i].0.clone(), true)?;
        let b = g.param(&[out_d], init[i].1.clone(), true)?;
        params.push(w);
        params.push(b);
        let m = g.matmul_nt(cur, w)?;
        cur = g.add_bias(m, b)?;
        if i + 1 < dims.len() {
            cur = g.relu(cur)?;
            if cfg.dropout > 0.0 {
                cur = g.dropout(cur, cfg.dropout)?;
            }
        }
    }
    let loss = g.cross_entropy(cur, y)?;
    Ok(ProbeGraph {
        graph: g,
        x,
        y,
        loss,
        params,
    })
}

/// Train one probe on frozen representations and report accuracy on the
/// validation split.
pub fn train_probe(
    train_x: &Tensor,
    train_y: &[usize],
    val_x: &Tensor,
    val_y: &[usize],
    cfg: &ProbeConfig,
) -> Result<(Probe, f64)> {
    if train_x.shape().len() != 2 || val_x.shape().len() != 2 {
        return Err(Error::InvalidInput("expected [n, d] representations".into()));
    }
    let (n, d) = (train_x.shape()[0], train_x.shape()[1]);
    if n != train_y.len() || val_x.shape()[0] != val_y.len() {
        return Err(Error::InvalidInput("label count mismatch".into()));
    }
    if n < 2 {
        return Err(Error::InvalidInput("need at least 2 training samples".into()));
    }
    let classes = train_y.iter().copied().max().unwrap_or(0) + 1;
    let classes = classes.max(2);
    if train_y.iter().all(|&c| c == train_y[0]) {
        return Err(Error::InvalidInput(
            "single-class training labels; probe undefined".into(),
        ));
    }
    if cfg.kind == ProbeKind::Mlp && cfg.hidden_dim == 0 {
        return Err(Error::InvalidInput("mlp probe needs hidden_dim >= 1".into()));
    }

    // seeded init shared by every batch-size instantiation
    let mut rng = Rng::new(stream_seed(cfg.seed, "probe.init"));
    let dims: Vec<(usize, usize)> = match cfg.kind {
        ProbeKind::Linear => vec![(classes, d)],
        ProbeKind::Mlp => vec![(cfg.hidden_dim, d), (classes, cfg.hidden_dim)],
    };
    // small seeded init: breaks MLP symmetry without letting the random
    // initial hyperplane dominate what little the data can teach
    let init: Vec<(Vec<f64>, Vec<f64>)> = dims
        .iter()
        .map(|&(o, i)| {
            let w: Vec<f64> = (0..o * i).map(|_| rng.normal_scaled(0.1)).collect();
            (w, vec![0.0; o])
        })
        .collect();

    let batch = cfg.batch_size.min(n);
    let mut pg = build_probe_graph(cfg, batch, d, classes, &init, true)?;
    let mut opt = AdamW::new(
        &pg.graph,
        pg.params.clone(),
        cfg.learning_rate,
        cfg.weight_decay,
    );

    let mut order: Vec<usize> = (0..n).collect();
    let mut shuffle_rng = Rng::new(stream_seed(cfg.seed, "probe.shuffle"));
    let mut xbuf = vec![0.0; batch * d];
    let mut ybuf = vec![0.0; batch];
    for _epoch in 0..cfg.epochs {
        shuffle_rng.shuffle(&mut order);
        for chunk in order.chunks_exact(batch) {
            for (row, &src) in chunk.iter().enumerate() {
                xbuf[row * d..(row + 1) * d]
                    .copy_from_slice(&train_x.values()[src * d..(src + 1) * d]);
                ybuf[row] = train_y[src] as f64;
            }
            pg.graph.set_input(pg.x, &xbuf)?;
            pg.graph.set_input(pg.y, &ybuf)?;
            pg.graph.forward()?;
            pg.graph.backward(pg.loss)?;
            opt.step(&mut pg.graph)?;
        }
    }

    // extract weights
    let mut layers = Vec::new();
    for pair in pg.params.chunks(2) {
        let w_shape = pg.graph.shape(pair[0]).to_vec();
        let w = Tensor::new(w_shape, pg.graph.value(pair[0]).to_vec())?;
        let b_shape = pg.graph.shape(pair[1]).to_vec();
        let b = Tensor::new(b_shape, pg.graph.value(pair[1]).to_vec())?;
        layers.push((w, b));
    }
    let probe = Probe {
        kind: cfg.kind,
        num_classes: classes,
        layers,
    };
    let acc = probe.accuracy(val_x, val_y)?;
    Ok((probe, acc))
}

/// Per-layer probe accuracies for one model.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ProbeReport {
    /// Validation accuracy per layer, linear probes.
    pub linear: Vec<f64>,
    /// Validation accuracy per layer, MLP probes.
    pub mlp: Vec<f64>,
    pub train_size: usize,
    pub val_size: usize,
    pub seed: u64,
}

/// Token sequences and labels used to extract probe representations.
pub struct ProbeData<'a> {
    pub train_tokens: &'a [Vec<usize>],
    pub train_labels: &'a [usize],
    pub val_tokens: &'a [Vec<usize>],
    pub val_labels: &'a [usize],
}

/// Train linear and MLP probes on every layer's [CLS] representations.
pub fn probe_sweep(
    state: &ModelState,
    data: &ProbeData<'_>,
    hidden_dim: usize,
    seed: u64,
) -> Result<ProbeReport> {
    let train_reps = state.layer_cls_representations(data.train_tokens, 64)?;
    let val_reps = state.layer_cls_representations(data.val_tokens, 64)?;
    let l = state.config.num_layers;
    let mut linear = Vec::with_capacity(l);
    let mut mlp = Vec::with_capacity(l);
    for layer in 0..l {
        for kind in [ProbeKind::Linear, ProbeKind::Mlp] {
            let cfg = ProbeConfig::new(
                kind,
                hidden_dim,
                stream_seed(seed, &format!("probe.layer{layer}.{}", kind.as_str())),
            );
            let (_, acc) = train_probe(
                &train_reps[layer],
                data.train_labels,
                &val_reps[layer],
                data.val_labels,
                &cfg,
            )?;
            match kind {
                ProbeKind::Linear => linear.push(acc),
                ProbeKind::Mlp => mlp.push(acc),
            }
        }
    }
    Ok(ProbeReport {
        linear,
        mlp,
        train_size: data.train_tokens.len(),
        val_size: data.val_tokens.len(),
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(n: usize, separation: f64, seed: u64) -> (Tensor, Vec<usize>) {
        let mut rng = Rng::new(seed);
        let mut x = Vec::with_capacity(n * 2);
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let label = i % 2;
            let cx = if label == 0 { -separation } else { separation };
            x.push(cx + rng.normal_scaled(0.5));
            x.push(rng.normal_scaled(0.5));
            y.push(label);
        }
        (Tensor::new(vec![n, 2], x).unwrap(), y)
    }

    fn xor_clusters(n: usize, seed: u64) -> (Tensor, Vec<usize>) {
        let mut rng = Rng::new(seed);
        let mut x = Vec::with_capacity(n * 2);
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            let sx = if rng.bernoulli(0.5) { 1.0 } else { -1.0 };
            let sy = if rng.bernoulli(0.5) { 1.0 } else { -1.0 };
            x.push(sx + rng.normal_scaled(0.2));
            x.push(sy + rng.normal_scaled(0.2));
            y.push(if (sx > 0.0) ^ (sy > 0.0) { 1 } else { 0 });
        }
        (Tensor::new(vec![n, 2], x).unwrap(), y)
    }

    #[test]
    fn linear_probe_solves_separable_blobs() {
        let (tx, ty) = blobs(400, 3.0, 1);
        let (vx, vy) = blobs(200, 3.0, 2);
        let cfg = ProbeConfig::new(ProbeKind::Linear, 0, 7);
        let (_, acc) = train_probe(&tx, &ty, &vx, &vy, &cfg).unwrap();
        assert_eq!(acc, 1.0);
    }

    // Label-permuted data: shuffling both splits' labels severs every
    // feature-label relationship, so accuracy sits at chance within
    // binomial noise.
    #[test]
    fn permuted_labels_sit_at_chance() {
        let (tx, mut ty) = blobs(1000, 3.0, 3);
        let (vx, mut vy) = blobs(512, 3.0, 4);
        let mut rng = Rng::new(99);
        rng.shuffle(&mut ty);
        rng.shuffle(&mut vy);
        let cfg = ProbeConfig::new(ProbeKind::Linear, 0, 11);
        let (_, acc) = train_probe(&tx, &ty, &vx, &vy, &cfg).unwrap();
        assert!((acc - 0.5).abs() < 0.05, "accuracy {acc}");
    }

    // Classic nonlinear-separability control: XOR defeats the linear
    // probe but not the MLP.
    #[test]
    fn xor_separates_linear_from_mlp() {
        let (tx, ty) = xor_clusters(1000, 5);
        let (vx, vy) = xor_clusters(512, 6);
        let lin = ProbeConfig::new(ProbeKind::Linear, 0, 13);
        let (_, lin_acc) = train_probe(&tx, &ty, &vx, &vy, &lin).unwrap();
        let mlp = ProbeConfig::new(ProbeKind::Mlp, 16, 13);
        let (_, mlp_acc) = train_probe(&tx, &ty, &vx, &vy, &mlp).unwrap();
        assert!(lin_acc < 0.6, "linear {lin_acc}");
        assert!(mlp_acc > 0.9, "mlp {mlp_acc}");
    }

    #[test]
    fn single_class_labels_are_invalid() {
        let (tx, _) = blobs(50, 1.0, 8);
        let ty = vec![0usize; 50];
        let (vx, vy) = blobs(10, 1.0, 9);
        let cfg = ProbeConfig::new(ProbeKind::Linear, 0, 1);
        assert!(matches!(
            train_probe(&tx, &ty, &vx, &vy, &cfg),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn probe_training_is_bitwise_deterministic() {
        let (tx, ty) = xor_clusters(300, 21);
        let (vx, vy) = xor_clusters(100, 22);
        let cfg = ProbeConfig::new(ProbeKind::Mlp, 8, 17);
        let (_, a1) = train_probe(&tx, &ty, &vx, &vy, &cfg).unwrap();
        let (_, a2) = train_probe(&tx, &ty, &vx, &vy, &cfg).unwrap();
        assert_eq!(a1.to_bits(), a2.to_bits());
    }

    // Appending the label as a feature makes the task trivially solvable.
    #[test]
    fn label_as_feature_drives_accuracy_to_one() {
        let mut rng = Rng::new(31);
        let n = 400;
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for _ in 0..n {
            let y = rng.below(2);
            xs.push(rng.normal());
            xs.push(rng.normal());
            xs.push(y as f64 * 2.0 - 1.0);
            ys.push(y);
        }
        let x = Tensor::new(vec![n, 3], xs).unwrap();
        let cfg = ProbeConfig::new(ProbeKind::Linear, 0, 23);
        let (_, acc) = train_probe(&x, &ys, &x, &ys, &cfg).unwrap();
        assert_eq!(acc, 1.0);
    }
}
