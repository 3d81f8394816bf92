//! Re-executable compute graph with reverse-mode differentiation.
//!
//! A [`Graph`] is built once (topology fixed, inputs precede consumers by
//! construction), then driven many times: set inputs, `forward`,
//! `backward`, read gradients, update parameters in place. Buffers are
//! preallocated and reused across steps.
//!
//! Gradient visibility after `backward`:
//! * trainable parameters always end up with a populated gradient buffer
//!   (zero if the loss does not depend on them),
//! * frozen parameters never do,
//! * tapped nodes always do, even when nothing below them is trainable,
//! * untapped intermediate gradients are not retained.

use crate::error::{Error, Result};
use crate::rng::Rng;

use super::ops;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param,
    MatMul { a: NodeId, b: NodeId },
    /// a · b^T over the last two dims; the natural layout for
    /// `[out, in]` weight matrices and attention scores.
    MatMulNT { a: NodeId, b: NodeId },
    Transpose { x: NodeId },
    Reshape { x: NodeId },
    Add { a: NodeId, b: NodeId },
    AddBias { x: NodeId, bias: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: f64 },
    Relu { x: NodeId },
    Gelu { x: NodeId },
    Sigmoid { x: NodeId },
    Softmax { x: NodeId },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, eps: f64 },
    Dropout { x: NodeId, p: f64 },
    Embedding { table: NodeId, ids: NodeId },
    AddPositional { x: NodeId, table: NodeId },
    TakeToken { x: NodeId, index: usize },
    SplitHeads { x: NodeId, heads: usize },
    MergeHeads { x: NodeId },
    Sum { x: NodeId },
    CrossEntropy { logits: NodeId, labels: NodeId },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param => "param",
            Op::MatMul { .. } => "matmul",
            Op::MatMulNT { .. } => "matmul_nt",
            Op::Transpose { .. } => "transpose",
            Op::Reshape { .. } => "reshape",
            Op::Add { .. } => "add",
            Op::AddBias { .. } => "add_bias",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Relu { .. } => "relu",
            Op::Gelu { .. } => "gelu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Dropout { .. } => "dropout",
            Op::Embedding { .. } => "embedding",
            Op::AddPositional { .. } => "add_positional",
            Op::TakeToken { .. } => "take_token",
            Op::SplitHeads { .. } => "split_heads",
            Op::MergeHeads { .. } => "merge_heads",
            Op::Sum { .. } => "sum",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }

    /// Writes the ids of this op's inputs into `out`; returns how many.
    fn inputs(&self, out: &mut [usize; 3]) -> usize {
        match *self {
            Op::Input | Op::Param => 0,
            Op::Transpose { x }
            | Op::Reshape { x }
            | Op::Scale { x, .. }
            | Op::Relu { x }
            | Op::Gelu { x }
            | Op::Sigmoid { x }
            | Op::Softmax { x }
            | Op::Dropout { x, .. }
            | Op::TakeToken { x, .. }
            | Op::SplitHeads { x, .. }
            | Op::MergeHeads { x }
            | Op::Sum { x } => {
                out[0] = x.0;
                1
            }
            Op::MatMul { a, b } | Op::MatMulNT { a, b } | Op::Add { a, b } | Op::Mul { a, b } => {
                out[0] = a.0;
                out[1] = b.0;
                2
            }
            Op::AddBias { x, bias } => {
                out[0] = x.0;
                out[1] = bias.0;
                2
            }
            Op::Embedding { table, ids } => {
                out[0] = table.0;
                out[1] = ids.0;
                2
            }
            Op::AddPositional { x, table } => {
                out[0] = x.0;
                out[1] = table.0;
                2
            }
            Op::CrossEntropy { logits, labels } => {
                out[0] = logits.0;
                out[1] = labels.0;
                2
            }
            Op::LayerNorm { x, gamma, beta, .. } => {
                out[0] = x.0;
                out[1] = gamma.0;
                out[2] = beta.0;
                3
            }
        }
    }
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f64>,
    grad: Vec<f64>,
    grad_present: bool,
    aux: Vec<f64>,
    trainable: bool,
    tapped: bool,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Two distinct mutable node references out of one slice.
fn two_mut(nodes: &mut [Node], a: usize, b: usize) -> (&mut Node, &mut Node) {
    debug_assert_ne!(a, b);
    if a < b {
        let (lo, hi) = nodes.split_at_mut(b);
        (&mut lo[a], &mut hi[0])
    } else {
        let (lo, hi) = nodes.split_at_mut(a);
        (&mut hi[0], &mut lo[b])
    }
}

/// Gradient sink for a node: `None` when the node must not accumulate
/// (frozen parameter), otherwise its zeroed gradient buffer.
fn sink(node: &mut Node) -> Option<&mut [f64]> {
    if matches!(node.op, Op::Param) && !node.trainable {
        return None;
    }
    debug_assert_eq!(node.grad.len(), node.value.len());
    Some(&mut node.grad)
}

pub struct Graph {
    nodes: Vec<Node>,
    training: bool,
    dropout_rng: Rng,
    forward_done: bool,
    reach_cache: Option<(usize, Vec<bool>)>,
    check_finite: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Graph {
        Graph {
            nodes: Vec::new(),
            training: false,
            dropout_rng: Rng::new(0),
            forward_done: false,
            reach_cache: None,
            check_finite: true,
        }
    }

    /// Scan every node output for NaN/Inf during forward (default on).
    /// Hot training loops may disable it and watch the loss instead;
    /// non-finite values always surface there within a step.
    pub fn set_finite_checks(&mut self, on: bool) {
        self.check_finite = on;
    }

    /// Enable train-mode behavior (dropout active) and seed its mask stream.
    pub fn set_training(&mut self, training: bool) {
        self.training = training;
    }

    pub fn set_dropout_seed(&mut self, seed: u64) {
        self.dropout_rng = Rng::new(seed);
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// True when any dropout node would actually draw masks right now.
    pub fn has_active_dropout(&self) -> bool {
        self.training
            && self
                .nodes
                .iter()
                .any(|n| matches!(n.op, Op::Dropout { p, .. } if p > 0.0))
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        let n = numel(&shape);
        self.nodes.push(Node {
            op,
            shape,
            value: vec![0.0; n],
            grad: Vec::new(),
            grad_present: false,
            aux: Vec::new(),
            trainable: false,
            tapped: false,
        });
        self.reach_cache = None;
        NodeId(self.nodes.len() - 1)
    }

    fn check_id(&self, id: NodeId) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(Error::InvalidInput(format!("unknown node id {}", id.0)));
        }
        Ok(())
    }

    // ── Leaves ───────────────────────────────────────────────────────

    pub fn input(&mut self, shape: &[usize]) -> NodeId {
        self.push(Op::Input, shape.to_vec())
    }

    pub fn param(&mut self, shape: &[usize], values: Vec<f64>, trainable: bool) -> Result<NodeId> {
        if numel(shape) != values.len() {
            return Err(Error::InvalidInput(format!(
                "param shape {:?} vs {} values",
                shape,
                values.len()
            )));
        }
        let id = self.push(Op::Param, shape.to_vec());
        self.nodes[id.0].value = values;
        self.nodes[id.0].trainable = trainable;
        Ok(id)
    }

    // ── Structural ops ───────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_id(a)?;
        self.check_id(b)?;
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "matmul needs rank >= 2, got {:?} x {:?}",
                sa, sb
            )));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(Error::InvalidInput(format!(
                "matmul inner dims differ: {:?} x {:?}",
                sa, sb
            )));
        }
        let lead_a = &sa[..sa.len() - 2];
        let lead_b = &sb[..sb.len() - 2];
        if !(lead_b.is_empty() || lead_b == lead_a) {
            return Err(Error::InvalidInput(format!(
                "matmul batch dims differ: {:?} x {:?}",
                sa, sb
            )));
        }
        let mut shape = lead_a.to_vec();
        shape.push(m);
        shape.push(n);
        Ok(self.push(Op::MatMul { a, b }, shape))
    }

    /// `a · b^T`: `a: [..., m, k]` with `b: [n, k]` (2-D, broadcast over
    /// leading dims) or `b: [..., n, k]` (batched).
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_id(a)?;
        self.check_id(b)?;
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "matmul_nt needs rank >= 2, got {:?} x {:?}",
                sa, sb
            )));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (n, kb) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(Error::InvalidInput(format!(
                "matmul_nt inner dims differ: {:?} x {:?}^T",
                sa, sb
            )));
        }
        let lead_a = &sa[..sa.len() - 2];
        let lead_b = &sb[..sb.len() - 2];
        if !(lead_b.is_empty() || lead_b == lead_a) {
            return Err(Error::InvalidInput(format!(
                "matmul_nt batch dims differ: {:?} x {:?}",
                sa, sb
            )));
        }
        let mut shape = lead_a.to_vec();
        shape.push(m);
        shape.push(n);
        Ok(self.push(Op::MatMulNT { a, b }, shape))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        self.check_id(x)?;
        let s = &self.nodes[x.0].shape;
        if s.len() < 2 {
            return Err(Error::InvalidInput("transpose needs rank >= 2".into()));
        }
        let mut shape = s.clone();
        let l = shape.len();
        shape.swap(l - 2, l - 1);
        Ok(self.push(Op::Transpose { x }, shape))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.check_id(x)?;
        if numel(shape) != self.nodes[x.0].value.len() {
            return Err(Error::InvalidInput(format!(
                "reshape {:?} -> {:?} changes element count",
                self.nodes[x.0].shape, shape
            )));
        }
        Ok(self.push(Op::Reshape { x }, shape.to_vec()))
    }

    pub fn split_heads(&mut self, x: NodeId, heads: usize) -> Result<NodeId> {
        self.check_id(x)?;
        let s = &self.nodes[x.0].shape;
        if s.len() != 3 || heads == 0 || s[2] % heads != 0 {
            return Err(Error::InvalidInput(format!(
                "split_heads expects [batch, seq, d] with d divisible by {heads}, got {:?}",
                s
            )));
        }
        let shape = vec![s[0], heads, s[1], s[2] / heads];
        Ok(self.push(Op::SplitHeads { x, heads }, shape))
    }

    pub fn merge_heads(&mut self, x: NodeId) -> Result<NodeId> {
        self.check_id(x)?;
        let s = &self.nodes[x.0].shape;
        if s.len() != 4 {
            return Err(Error::InvalidInput(format!(
                "merge_heads expects [batch, heads, seq, hd], got {:?}",
                s
            )));
        }
        let shape = vec![s[0], s[2], s[1] * s[3]];
        Ok(self.push(Op::MergeHeads { x }, shape))
    }

    pub fn take_token(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        self.check_id(x)?;
        let s = &self.nodes[x.0].shape;
        if s.len() != 3 || index >= s[1] {
            return Err(Error::InvalidInput(format!(
                "take_token index {index} out of range for shape {:?}",
                s
            )));
        }
        let shape = vec![s[0], s[2]];
        Ok(self.push(Op::TakeToken { x, index }, shape))
    }

    // ── Elementwise and reductions ───────────────────────────────────

    fn same_shape_binary(&mut self, a: NodeId, b: NodeId, what: &str) -> Result<Vec<usize>> {
        self.check_id(a)?;
        self.check_id(b)?;
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::InvalidInput(format!(
                "{what} shape mismatch: {:?} vs {:?}",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        Ok(self.nodes[a.0].shape.clone())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.same_shape_binary(a, b, "add")?;
        Ok(self.push(Op::Add { a, b }, shape))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.same_shape_binary(a, b, "mul")?;
        Ok(self.push(Op::Mul { a, b }, shape))
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        self.check_id(x)?;
        self.check_id(bias)?;
        let sx = self.nodes[x.0].shape.clone();
        let sb = &self.nodes[bias.0].shape;
        if sx.is_empty() || sb.len() != 1 || sb[0] != *sx.last().unwrap() {
            return Err(Error::InvalidInput(format!(
                "add_bias: bias {:?} does not match last dim of {:?}",
                sb, sx
            )));
        }
        Ok(self.push(Op::AddBias { x, bias }, sx))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.check_id(x)?;
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(Op::Scale { x, c }, shape))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.check_id(x)?;
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(Op::Relu { x }, shape))
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        self.check_id(x)?;
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(Op::Gelu { x }, shape))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.check_id(x)?;
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(Op::Sigmoid { x }, shape))
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.check_id(x)?;
        let shape = self.nodes[x.0].shape.clone();
        if shape.is_empty() {
            return Err(Error::InvalidInput("softmax needs rank >= 1".into()));
        }
        Ok(self.push(Op::Softmax { x }, shape))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        self.check_id(x)?;
        self.check_id(gamma)?;
        self.check_id(beta)?;
        let sx = self.nodes[x.0].shape.clone();
        let d = *sx.last().ok_or_else(|| {
            Error::InvalidInput("layer_norm needs rank >= 1".into())
        })?;
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            let s = &self.nodes[id.0].shape;
            if s.len() != 1 || s[0] != d {
                return Err(Error::InvalidInput(format!(
                    "layer_norm {name} must be [{d}], got {:?}",
                    s
                )));
            }
        }
        Ok(self.push(Op::LayerNorm { x, gamma, beta, eps }, sx))
    }

    pub fn dropout(&mut self, x: NodeId, p: f64) -> Result<NodeId> {
        self.check_id(x)?;
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidInput(format!(
                "dropout probability {p} outside [0, 1)"
            )));
        }
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(Op::Dropout { x, p }, shape))
    }

    pub fn embedding(&mut self, table: NodeId, ids: NodeId) -> Result<NodeId> {
        self.check_id(table)?;
        self.check_id(ids)?;
        let st = &self.nodes[table.0].shape;
        if st.len() != 2 {
            return Err(Error::InvalidInput(format!(
                "embedding table must be [vocab, d], got {:?}",
                st
            )));
        }
        let d = st[1];
        let mut shape = self.nodes[ids.0].shape.clone();
        shape.push(d);
        Ok(self.push(Op::Embedding { table, ids }, shape))
    }

    pub fn add_positional(&mut self, x: NodeId, table: NodeId) -> Result<NodeId> {
        self.check_id(x)?;
        self.check_id(table)?;
        let sx = self.nodes[x.0].shape.clone();
        let st = &self.nodes[table.0].shape;
        if sx.len() != 3 || st.len() != 2 || st[1] != sx[2] || st[0] < sx[1] {
            return Err(Error::InvalidInput(format!(
                "add_positional: x {:?} vs table {:?}",
                sx, st
            )));
        }
        Ok(self.push(Op::AddPositional { x, table }, sx))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.check_id(x)?;
        Ok(self.push(Op::Sum { x }, vec![]))
    }

    pub fn cross_entropy(&mut self, logits: NodeId, labels: NodeId) -> Result<NodeId> {
        self.check_id(logits)?;
        self.check_id(labels)?;
        let sl = &self.nodes[logits.0].shape;
        if sl.len() < 2 || *sl.last().unwrap() < 2 {
            return Err(Error::InvalidInput(format!(
                "cross_entropy expects [..., classes >= 2] logits, got {:?}",
                sl
            )));
        }
        let rows: usize = sl[..sl.len() - 1].iter().product();
        if numel(&self.nodes[labels.0].shape) != rows {
            return Err(Error::InvalidInput(format!(
                "cross_entropy: {} label slots for {} logit rows",
                numel(&self.nodes[labels.0].shape),
                rows
            )));
        }
        Ok(self.push(Op::CrossEntropy { logits, labels }, vec![]))
    }

    // ── Data movement in and out ─────────────────────────────────────

    pub fn set_input(&mut self, id: NodeId, values: &[f64]) -> Result<()> {
        self.check_id(id)?;
        let node = &mut self.nodes[id.0];
        if !matches!(node.op, Op::Input) {
            return Err(Error::InvalidInput(format!(
                "node {} is not an input",
                id.0
            )));
        }
        if values.len() != node.value.len() {
            return Err(Error::InvalidInput(format!(
                "input length {} != expected {}",
                values.len(),
                node.value.len()
            )));
        }
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite input value at index {bad}"
            )));
        }
        node.value.copy_from_slice(values);
        Ok(())
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        let n = &self.nodes[id.0];
        if n.grad_present {
            Some(&n.grad)
        } else {
            None
        }
    }

    pub fn is_trainable(&self, id: NodeId) -> bool {
        self.nodes[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: NodeId, trainable: bool) -> Result<()> {
        self.check_id(id)?;
        if !matches!(self.nodes[id.0].op, Op::Param) {
            return Err(Error::InvalidInput(format!(
                "node {} is not a parameter",
                id.0
            )));
        }
        self.nodes[id.0].trainable = trainable;
        Ok(())
    }

    /// Mutable view of a parameter's values (for optimizer updates and
    /// finite-difference perturbation).
    pub fn param_values_mut(&mut self, id: NodeId) -> Result<&mut [f64]> {
        self.check_id(id)?;
        if !matches!(self.nodes[id.0].op, Op::Param) {
            return Err(Error::InvalidInput(format!(
                "node {} is not a parameter",
                id.0
            )));
        }
        Ok(&mut self.nodes[id.0].value)
    }

    /// Parameter values (mutable) together with the gradient from the
    /// last backward pass, for in-place optimizer updates.
    pub fn param_value_grad_mut(
        &mut self,
        id: NodeId,
    ) -> Result<(&mut [f64], Option<&[f64]>)> {
        self.check_id(id)?;
        let node = &mut self.nodes[id.0];
        if !matches!(node.op, Op::Param) {
            return Err(Error::InvalidInput(format!(
                "node {} is not a parameter",
                id.0
            )));
        }
        let Node {
            value,
            grad,
            grad_present,
            ..
        } = node;
        let g = if *grad_present { Some(&grad[..]) } else { None };
        Ok((&mut value[..], g))
    }

    /// Mark a node's gradient for retention after backward.
    pub fn tap(&mut self, id: NodeId) -> Result<()> {
        self.check_id(id)?;
        self.nodes[id.0].tapped = true;
        Ok(())
    }

    pub fn is_tapped(&self, id: NodeId) -> bool {
        self.nodes[id.0].tapped
    }

    // ── Execution ────────────────────────────────────────────────────

    /// Forward with per-op-kind wall time, for performance triage.
    #[doc(hidden)]
    pub fn forward_timed(&mut self) -> Result<Vec<(&'static str, f64)>> {
        use std::time::Instant;
        let mut acc: std::collections::BTreeMap<&'static str, f64> = Default::default();
        for id in 0..self.nodes.len() {
            let t = Instant::now();
            self.forward_node(id)?;
            *acc.entry(self.nodes[id].op.name()).or_insert(0.0) += t.elapsed().as_secs_f64();
        }
        self.forward_done = true;
        let mut out: Vec<_> = acc.into_iter().collect();
        out.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        Ok(out)
    }

    pub fn forward(&mut self) -> Result<()> {
        for id in 0..self.nodes.len() {
            self.forward_node(id)?;
            if self.check_finite {
                let node = &self.nodes[id];
                if let Some(bad) = node.value.iter().position(|v| !v.is_finite()) {
                    return Err(Error::Numeric(format!(
                        "non-finite value in node {} ({}) at flat index {}",
                        id,
                        node.op.name(),
                        bad
                    )));
                }
            }
        }
        self.forward_done = true;
        Ok(())
    }

    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        self.check_id(loss)?;
        if !self.forward_done {
            return Err(Error::State("backward called before forward".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::InvalidInput(format!(
                "loss node must be scalar, has shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.ensure_reach(loss);
        let reach = self.reach_cache.as_ref().map(|(_, r)| r.clone()).unwrap();

        // Zero buffers for every node that participates: anything on the
        // loss path, anything tapped, and every trainable parameter (so
        // loss-independent taps/params read as exactly zero).
        for (i, node) in self.nodes.iter_mut().enumerate() {
            let frozen_param = matches!(node.op, Op::Param) && !node.trainable;
            let participates = (reach[i] && !frozen_param)
                || node.tapped
                || (matches!(node.op, Op::Param) && node.trainable);
            if participates {
                node.grad.resize(node.value.len(), 0.0);
                node.grad.fill(0.0);
            }
            node.grad_present = false;
        }
        self.nodes[loss.0].grad[0] = 1.0;

        for id in (0..=loss.0).rev() {
            if reach[id] {
                self.backward_node(id);
            }
        }

        for node in self.nodes.iter_mut() {
            let trainable_param = matches!(node.op, Op::Param) && node.trainable;
            node.grad_present = node.tapped || trainable_param;
        }
        Ok(())
    }

    fn ensure_reach(&mut self, loss: NodeId) {
        if let Some((cached_loss, r)) = &self.reach_cache {
            if *cached_loss == loss.0 && r.len() == self.nodes.len() {
                return;
            }
        }
        let mut reach = vec![false; self.nodes.len()];
        reach[loss.0] = true;
        let mut buf = [0usize; 3];
        for id in (0..=loss.0).rev() {
            if !reach[id] {
                continue;
            }
            let n = self.nodes[id].op.inputs(&mut buf);
            for &input in &buf[..n] {
                reach[input] = true;
            }
        }
        self.reach_cache = Some((loss.0, reach));
    }

    fn forward_node(&mut self, id: usize) -> Result<()> {
        let (before, rest) = self.nodes.split_at_mut(id);
        let node = &mut rest[0];
        match node.op {
            Op::Input | Op::Param => {}
            Op::MatMul { a, b } => {
                let (sa, sb) = (&before[a.0].shape, &before[b.0].shape);
                let m = sa[sa.len() - 2];
                let k = sa[sa.len() - 1];
                let n = sb[sb.len() - 1];
                let batches = node.value.len() / (m * n);
                let b_stride = if sb.len() == 2 && sa.len() > 2 { 0 } else { k * n };
                let av = &before[a.0].value;
                let bv = &before[b.0].value;
                node.value.fill(0.0);
                for t in 0..batches {
                    ops::matmul_acc(
                        &av[t * m * k..(t + 1) * m * k],
                        &bv[t * b_stride..t * b_stride + k * n],
                        &mut node.value[t * m * n..(t + 1) * m * n],
                        m,
                        k,
                        n,
                    );
                }
            }
            Op::MatMulNT { a, b } => {
                let (sa, sb) = (&before[a.0].shape, &before[b.0].shape);
                let m = sa[sa.len() - 2];
                let k = sa[sa.len() - 1];
                let n = sb[sb.len() - 2];
                let batches = node.value.len() / (m * n);
                let b_stride = if sb.len() == 2 && sa.len() > 2 { 0 } else { n * k };
                let av = &before[a.0].value;
                let bv = &before[b.0].value;
                node.value.fill(0.0);
                for t in 0..batches {
                    ops::matmul_nt_acc(
                        &av[t * m * k..(t + 1) * m * k],
                        &bv[t * b_stride..t * b_stride + n * k],
                        &mut node.value[t * m * n..(t + 1) * m * n],
                        m,
                        k,
                        n,
                    );
                }
            }
            Op::Transpose { x } => {
                let sx = &before[x.0].shape;
                let r = sx[sx.len() - 2];
                let c = sx[sx.len() - 1];
                let xv = &before[x.0].value;
                let batches = xv.len() / (r * c);
                for t in 0..batches {
                    ops::transpose_into(
                        &xv[t * r * c..(t + 1) * r * c],
                        &mut node.value[t * r * c..(t + 1) * r * c],
                        r,
                        c,
                    );
                }
            }
            Op::Reshape { x } => node.value.copy_from_slice(&before[x.0].value),
            Op::Add { a, b } => {
                let (av, bv) = (&before[a.0].value, &before[b.0].value);
                for ((o, &x), &y) in node.value.iter_mut().zip(av.iter()).zip(bv.iter()) {
                    *o = x + y;
                }
            }
            Op::AddBias { x, bias } => {
                let xv = &before[x.0].value;
                let bv = &before[bias.0].value;
                let d = bv.len();
                for (orow, xrow) in node.value.chunks_mut(d).zip(xv.chunks(d)) {
                    for ((o, &x), &b) in orow.iter_mut().zip(xrow.iter()).zip(bv.iter()) {
                        *o = x + b;
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (&before[a.0].value, &before[b.0].value);
                for ((o, &x), &y) in node.value.iter_mut().zip(av.iter()).zip(bv.iter()) {
                    *o = x * y;
                }
            }
            Op::Scale { x, c } => {
                for (o, &v) in node.value.iter_mut().zip(before[x.0].value.iter()) {
                    *o = c * v;
                }
            }
            Op::Relu { x } => {
                for (o, &v) in node.value.iter_mut().zip(before[x.0].value.iter()) {
                    *o = if v > 0.0 { v } else { 0.0 };
                }
            }
            Op::Gelu { x } => {
                let n = node.value.len();
                node.aux.resize(n, 0.0);
                for i in 0..n {
                    let (y, t) = ops::gelu_fwd(before[x.0].value[i]);
                    node.value[i] = y;
                    node.aux[i] = t;
                }
            }
            Op::Sigmoid { x } => {
                for (o, &v) in node.value.iter_mut().zip(before[x.0].value.iter()) {
                    *o = 1.0 / (1.0 + (-v).exp());
                }
            }
            Op::Softmax { x } => {
                let d = *node.shape.last().unwrap();
                let xv = &before[x.0].value;
                for (orow, xrow) in node.value.chunks_mut(d).zip(xv.chunks(d)) {
                    super::softmax_row(xrow, orow);
                }
            }
            Op::LayerNorm { x, eps, gamma, beta } => {
                let d = *node.shape.last().unwrap();
                let rows = node.value.len() / d;
                node.aux.resize(node.value.len() + rows, 0.0);
                let xv = &before[x.0].value;
                let gv = &before[gamma.0].value;
                let bv = &before[beta.0].value;
                let (xhat, inv_buf) = node.aux.split_at_mut(rows * d);
                for r in 0..rows {
                    let xrow = &xv[r * d..(r + 1) * d];
                    let mut mean = 0.0;
                    for &v in xrow {
                        mean += v;
                    }
                    mean /= d as f64;
                    let mut var = 0.0;
                    for &v in xrow {
                        let c = v - mean;
                        var += c * c;
                    }
                    var /= d as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    inv_buf[r] = inv;
                    let hrow = &mut xhat[r * d..(r + 1) * d];
                    let orow = &mut node.value[r * d..(r + 1) * d];
                    for j in 0..d {
                        let h = (xrow[j] - mean) * inv;
                        hrow[j] = h;
                        orow[j] = gv[j] * h + bv[j];
                    }
                }
            }
            Op::Dropout { x, p } => {
                let xv = &before[x.0].value;
                if self.training && p > 0.0 {
                    let n = node.value.len();
                    node.aux.resize(n, 0.0);
                    let keep = 1.0 / (1.0 - p);
                    for i in 0..n {
                        let m = if self.dropout_rng.uniform() >= p { keep } else { 0.0 };
                        node.aux[i] = m;
                        node.value[i] = xv[i] * m;
                    }
                } else {
                    node.aux.clear();
                    node.value.copy_from_slice(xv);
                }
            }
            Op::Embedding { table, ids } => {
                let d = before[table.0].shape[1];
                let vocab = before[table.0].shape[0];
                let tv = &before[table.0].value;
                let idv = &before[ids.0].value;
                for (r, &idf) in idv.iter().enumerate() {
                    if idf < 0.0 || idf.fract() != 0.0 || idf as usize >= vocab {
                        return Err(Error::InvalidInput(format!(
                            "token id {idf} out of vocabulary of size {vocab}"
                        )));
                    }
                    let idx = idf as usize;
                    node.value[r * d..(r + 1) * d].copy_from_slice(&tv[idx * d..(idx + 1) * d]);
                }
            }
            Op::AddPositional { x, table } => {
                let (b, t, d) = (node.shape[0], node.shape[1], node.shape[2]);
                let xv = &before[x.0].value;
                let tv = &before[table.0].value;
                for bi in 0..b {
                    for ti in 0..t {
                        let off = (bi * t + ti) * d;
                        let orow = &mut node.value[off..off + d];
                        let xrow = &xv[off..off + d];
                        let prow = &tv[ti * d..(ti + 1) * d];
                        for j in 0..d {
                            orow[j] = xrow[j] + prow[j];
                        }
                    }
                }
            }
            Op::TakeToken { x, index } => {
                let sx = &before[x.0].shape;
                let (t, d) = (sx[1], sx[2]);
                let xv = &before[x.0].value;
                for bi in 0..node.shape[0] {
                    let src = (bi * t + index) * d;
                    node.value[bi * d..(bi + 1) * d].copy_from_slice(&xv[src..src + d]);
                }
            }
            Op::SplitHeads { x, heads } => {
                let sx = &before[x.0].shape;
                let (b, t, d) = (sx[0], sx[1], sx[2]);
                let hd = d / heads;
                let xv = &before[x.0].value;
                for bi in 0..b {
                    for h in 0..heads {
                        for ti in 0..t {
                            let dst = (((bi * heads + h) * t) + ti) * hd;
                            let src = (bi * t + ti) * d + h * hd;
                            node.value[dst..dst + hd].copy_from_slice(&xv[src..src + hd]);
                        }
                    }
                }
            }
            Op::MergeHeads { x } => {
                let sx = &before[x.0].shape;
                let (b, heads, t, hd) = (sx[0], sx[1], sx[2], sx[3]);
                let xv = &before[x.0].value;
                for bi in 0..b {
                    for h in 0..heads {
                        for ti in 0..t {
                            let src = (((bi * heads + h) * t) + ti) * hd;
                            let dst = (bi * t + ti) * heads * hd + h * hd;
                            node.value[dst..dst + hd].copy_from_slice(&xv[src..src + hd]);
                        }
                    }
                }
            }
            Op::Sum { x } => {
                let mut acc = 0.0;
                for &v in &before[x.0].value {
                    acc += v;
                }
                node.value[0] = acc;
            }
            Op::CrossEntropy { logits, labels } => {
                let sl = &before[logits.0].shape;
                let c = *sl.last().unwrap();
                let rows = before[logits.0].value.len() / c;
                node.aux.resize(rows * c, 0.0);
                let lv = &before[logits.0].value;
                let labv = &before[labels.0].value;
                let mut loss_sum = 0.0;
                for r in 0..rows {
                    let labf = labv[r];
                    if labf < 0.0 || labf.fract() != 0.0 || labf as usize >= c {
                        return Err(Error::InvalidInput(format!(
                            "label {labf} out of range for {c} classes"
                        )));
                    }
                    let probs = &mut node.aux[r * c..(r + 1) * c];
                    super::softmax_row(&lv[r * c..(r + 1) * c], probs);
                    loss_sum += -(probs[labf as usize]).ln();
                }
                node.value[0] = loss_sum / rows as f64;
            }
        }
        Ok(())
    }

    fn backward_node(&mut self, id: usize) {
        let (before, rest) = self.nodes.split_at_mut(id);
        let node = &mut rest[0];
        if node.grad.is_empty() {
            return;
        }
        // The output gradient and any cached forward state live on `node`;
        // accumulation targets live in `before`.
        match node.op {
            Op::Input | Op::Param => {}
            Op::MatMul { a, b } => {
                let g = &node.grad;
                let (m, n) = {
                    let s = &node.shape;
                    (s[s.len() - 2], s[s.len() - 1])
                };
                let k = {
                    let sa = &before[a.0].shape;
                    sa[sa.len() - 1]
                };
                let batches = node.value.len() / (m * n);
                let b_is_2d = before[b.0].shape.len() == 2 && node.shape.len() > 2;
                let b_stride = if b_is_2d { 0 } else { k * n };
                if a.0 != b.0 {
                    let (na, nb) = two_mut(before, a.0, b.0);
                    if let Some(da) = sink(na) {
                        let bv = &nb.value;
                        for t in 0..batches {
                            ops::matmul_grad_lhs(
                                &g[t * m * n..(t + 1) * m * n],
                                &bv[t * b_stride..t * b_stride + k * n],
                                &mut da[t * m * k..(t + 1) * m * k],
                                m,
                                k,
                                n,
                            );
                        }
                    }
                    if let Some(db) = sink(nb) {
                        let av = &na.value;
                        for t in 0..batches {
                            ops::matmul_grad_rhs(
                                &av[t * m * k..(t + 1) * m * k],
                                &g[t * m * n..(t + 1) * m * n],
                                &mut db[t * b_stride..t * b_stride + k * n],
                                m,
                                k,
                                n,
                            );
                        }
                    }
                } else {
                    let na = &mut before[a.0];
                    let (values, grads) = (&na.value, &mut na.grad);
                    if !(matches!(na.op, Op::Param) && !na.trainable) {
                        for t in 0..batches {
                            ops::matmul_grad_lhs(
                                &g[t * m * n..(t + 1) * m * n],
                                &values[t * b_stride..t * b_stride + k * n],
                                &mut grads[t * m * k..(t + 1) * m * k],
                                m,
                                k,
                                n,
                            );
                            ops::matmul_grad_rhs(
                                &values[t * m * k..(t + 1) * m * k],
                                &g[t * m * n..(t + 1) * m * n],
                                &mut grads[t * b_stride..t * b_stride + k * n],
                                m,
                                k,
                                n,
                            );
                        }
                    }
                }
            }
            Op::MatMulNT { a, b } => {
                let g = &node.grad;
                let (m, n) = {
                    let s = &node.shape;
                    (s[s.len() - 2], s[s.len() - 1])
                };
                let k = {
                    let sa = &before[a.0].shape;
                    sa[sa.len() - 1]
                };
                let batches = node.value.len() / (m * n);
                let b_is_2d = before[b.0].shape.len() == 2 && node.shape.len() > 2;
                let b_stride = if b_is_2d { 0 } else { n * k };
                if a.0 != b.0 {
                    let (na, nb) = two_mut(before, a.0, b.0);
                    if let Some(da) = sink(na) {
                        let bv = &nb.value;
                        for t in 0..batches {
                            ops::matmul_nt_grad_lhs(
                                &g[t * m * n..(t + 1) * m * n],
                                &bv[t * b_stride..t * b_stride + n * k],
                                &mut da[t * m * k..(t + 1) * m * k],
                                m,
                                k,
                                n,
                            );
                        }
                    }
                    if let Some(db) = sink(nb) {
                        let av = &na.value;
                        for t in 0..batches {
                            ops::matmul_nt_grad_rhs(
                                &av[t * m * k..(t + 1) * m * k],
                                &g[t * m * n..(t + 1) * m * n],
                                &mut db[t * b_stride..t * b_stride + n * k],
                                m,
                                k,
                                n,
                            );
                        }
                    }
                } else {
                    let na = &mut before[a.0];
                    let (values, grads) = (&na.value, &mut na.grad);
                    if !(matches!(na.op, Op::Param) && !na.trainable) {
                        for t in 0..batches {
                            ops::matmul_nt_grad_lhs(
                                &g[t * m * n..(t + 1) * m * n],
                                &values[t * b_stride..t * b_stride + n * k],
                                &mut grads[t * m * k..(t + 1) * m * k],
                                m,
                                k,
                                n,
                            );
                            ops::matmul_nt_grad_rhs(
                                &values[t * m * k..(t + 1) * m * k],
                                &g[t * m * n..(t + 1) * m * n],
                                &mut grads[t * b_stride..t * b_stride + n * k],
                                m,
                                k,
                                n,
                            );
                        }
                    }
                }
            }
            Op::Transpose { x } => {
                if let Some(dx) = sink(&mut before[x.0]) {
                    let s = &node.shape;
                    let (r_out, c_out) = (s[s.len() - 2], s[s.len() - 1]);
                    let batches = node.value.len() / (r_out * c_out);
                    let g = &node.grad;
                    for t in 0..batches {
                        let gb = &g[t * r_out * c_out..(t + 1) * r_out * c_out];
                        let dxb = &mut dx[t * r_out * c_out..(t + 1) * r_out * c_out];
                        // g has shape [c, r] relative to x's [r, c]
                        for ro in 0..r_out {
                            for co in 0..c_out {
                                dxb[co * r_out + ro] += gb[ro * c_out + co];
                            }
                        }
                    }
                }
            }
            Op::Reshape { x } => {
                if let Some(dx) = sink(&mut before[x.0]) {
                    for (d, &g) in dx.iter_mut().zip(node.grad.iter()) {
                        *d += g;
                    }
                }
            }
            Op::Add { a, b } => {
                for id in [a, b] {
                    if let Some(d) = sink(&mut before[id.0]) {
                        for (o, &g) in d.iter_mut().zip(node.grad.iter()) {
                            *o += g;
                        }
                    }
                }
            }
            Op::AddBias { x, bias } => {
                if let Some(dx) = sink(&mut before[x.0]) {
                    for (o, &g) in dx.iter_mut().zip(node.grad.iter()) {
                        *o += g;
                    }
                }
                if let Some(db) = sink(&mut before[bias.0]) {
                    let d = db.len();
                    for grow in node.grad.chunks(d) {
                        for (o, &g) in db.iter_mut().zip(grow.iter()) {
                            *o += g;
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                if a.0 != b.0 {
                    let (na, nb) = two_mut(before, a.0, b.0);
                    if let Some(da) = sink(na) {
                        for ((o, &g), &bv) in da.iter_mut().zip(node.grad.iter()).zip(nb.value.iter()) {
                            *o += g * bv;
                        }
                    }
                    if let Some(db) = sink(nb) {
                        for ((o, &g), &av) in db.iter_mut().zip(node.grad.iter()).zip(na.value.iter()) {
                            *o += g * av;
                        }
                    }
                } else {
                    let na = &mut before[a.0];
                    let (values, grads) = (&na.value, &mut na.grad);
                    if !(matches!(na.op, Op::Param) && !na.trainable) {
                        for ((o, &g), &v) in grads.iter_mut().zip(node.grad.iter()).zip(values.iter()) {
                            *o += 2.0 * g * v;
                        }
                    }
                }
            }
            Op::Scale { x, c } => {
                if let Some(dx) = sink(&mut before[x.0]) {
                    for (o, &g) in dx.iter_mut().zip(node.grad.iter()) {
                        *o += c * g;
                    }
                }
            }
            Op::Relu { x } => {
                let nx = &mut before[x.0];
                let (values, grads) = (&nx.value, &mut nx.grad);
                if !(matches!(nx.op, Op::Param) && !nx.trainable) {
                    for ((o, &g), &v) in grads.iter_mut().zip(node.grad.iter()).zip(values.iter()) {
                        if v > 0.0 {
                            *o += g;
                        }
                    }
                }
            }
            Op::Gelu { x } => {
                let nx = &mut before[x.0];
                let (values, grads) = (&nx.value, &mut nx.grad);
                if !(matches!(nx.op, Op::Param) && !nx.trainable) {
                    for i in 0..grads.len() {
                        grads[i] += node.grad[i] * ops::gelu_bwd(values[i], node.aux[i]);
                    }
                }
            }
            Op::Sigmoid { x } => {
                if let Some(dx) = sink(&mut before[x.0]) {
                    for ((o, &g), &y) in dx.iter_mut().zip(node.grad.iter()).zip(node.value.iter()) {
                        *o += g * y * (1.0 - y);
                    }
                }
            }
            Op::Softmax { x } => {
                if let Some(dx) = sink(&mut before[x.0]) {
                    let d = *node.shape.last().unwrap();
                    for ((dxrow, grow), yrow) in dx
                        .chunks_mut(d)
                        .zip(node.grad.chunks(d))
                        .zip(node.value.chunks(d))
                    {
                        let mut dot = 0.0;
                        for (&g, &y) in grow.iter().zip(yrow.iter()) {
                            dot += g * y;
                        }
                        for j in 0..d {
                            dxrow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, .. } => {
                let d = *node.shape.last().unwrap();
                let rows = node.value.len() / d;
                let (xhat, inv_buf) = node.aux.split_at(rows * d);
                // dL/dx needs gamma's values alongside x's gradient buffer.
                {
                    let (nx, ng) = two_mut(before, x.0, gamma.0);
                    if let Some(dx) = sink(nx) {
                        let gv = &ng.value;
                        for r in 0..rows {
                            let grow = &node.grad[r * d..(r + 1) * d];
                            let hrow = &xhat[r * d..(r + 1) * d];
                            let dxrow = &mut dx[r * d..(r + 1) * d];
                            let inv = inv_buf[r];
                            let mut m1 = 0.0;
                            let mut m2 = 0.0;
                            for j in 0..d {
                                let dh = grow[j] * gv[j];
                                m1 += dh;
                                m2 += dh * hrow[j];
                            }
                            m1 /= d as f64;
                            m2 /= d as f64;
                            for j in 0..d {
                                let dh = grow[j] * gv[j];
                                dxrow[j] += inv * (dh - m1 - hrow[j] * m2);
                            }
                        }
                    }
                }
                if let Some(dg) = sink(&mut before[gamma.0]) {
                    for r in 0..rows {
                        let grow = &node.grad[r * d..(r + 1) * d];
                        let hrow = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dg[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if let Some(db) = sink(&mut before[beta.0]) {
                    for grow in node.grad.chunks(d) {
                        for (o, &g) in db.iter_mut().zip(grow.iter()) {
                            *o += g;
                        }
                    }
                }
            }
            Op::Dropout { x, .. } => {
                if let Some(dx) = sink(&mut before[x.0]) {
                    if node.aux.is_empty() {
                        for (o, &g) in dx.iter_mut().zip(node.grad.iter()) {
                            *o += g;
                        }
                    } else {
                        for ((o, &g), &m) in dx.iter_mut().zip(node.grad.iter()).zip(node.aux.iter()) {
                            *o += g * m;
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let (ntab, nids) = two_mut(before, table.0, ids.0);
                let d = ntab.shape[1];
                if let Some(dt) = sink(ntab) {
                    for (r, &idf) in nids.value.iter().enumerate() {
                        let idx = idf as usize;
                        let grow = &node.grad[r * d..(r + 1) * d];
                        let drow = &mut dt[idx * d..(idx + 1) * d];
                        for (o, &g) in drow.iter_mut().zip(grow.iter()) {
                            *o += g;
                        }
                    }
                }
            }
            Op::AddPositional { x, table } => {
                let (b, t, d) = (node.shape[0], node.shape[1], node.shape[2]);
                if let Some(dx) = sink(&mut before[x.0]) {
                    for (o, &g) in dx.iter_mut().zip(node.grad.iter()) {
                        *o += g;
                    }
                }
                if let Some(dt) = sink(&mut before[table.0]) {
                    for bi in 0..b {
                        for ti in 0..t {
                            let off = (bi * t + ti) * d;
                            let grow = &node.grad[off..off + d];
                            let drow = &mut dt[ti * d..(ti + 1) * d];
                            for (o, &g) in drow.iter_mut().zip(grow.iter()) {
                                *o += g;
                            }
                        }
                    }
                }
            }
            Op::TakeToken { x, index } => {
                let (b, t, d) = {
                    let sx = &before[x.0].shape;
                    (sx[0], sx[1], sx[2])
                };
                if let Some(dx) = sink(&mut before[x.0]) {
                    for bi in 0..b {
                        let grow = &node.grad[bi * d..(bi + 1) * d];
                        let dst = (bi * t + index) * d;
                        let drow = &mut dx[dst..dst + d];
                        for (o, &g) in drow.iter_mut().zip(grow.iter()) {
                            *o += g;
                        }
                    }
                }
            }
            Op::SplitHeads { x, heads } => {
                if let Some(dx) = sink(&mut before[x.0]) {
                    let (b, _, t, hd) = (node.shape[0], node.shape[1], node.shape[2], node.shape[3]);
                    let d = heads * hd;
                    for bi in 0..b {
                        for h in 0..heads {
                            for ti in 0..t {
                                let src = (((bi * heads + h) * t) + ti) * hd;
                                let dst = (bi * t + ti) * d + h * hd;
                                let grow = &node.grad[src..src + hd];
                                let drow = &mut dx[dst..dst + hd];
                                for (o, &g) in drow.iter_mut().zip(grow.iter()) {
                                    *o += g;
                                }
                            }
                        }
                    }
                }
            }
            Op::MergeHeads { x } => {
                let (b, heads, t, hd) = {
                    let sx = &before[x.0].shape;
                    (sx[0], sx[1], sx[2], sx[3])
                };
                if let Some(dx) = sink(&mut before[x.0]) {
                    let d = heads * hd;
                    for bi in 0..b {
                        for h in 0..heads {
                            for ti in 0..t {
                                let dst = (((bi * heads + h) * t) + ti) * hd;
                                let src = (bi * t + ti) * d + h * hd;
                                let grow = &node.grad[src..src + hd];
                                let drow = &mut dx[dst..dst + hd];
                                for (o, &g) in drow.iter_mut().zip(grow.iter()) {
                                    *o += g;
                                }
                            }
                        }
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(dx) = sink(&mut before[x.0]) {
                    let g = node.grad[0];
                    for o in dx.iter_mut() {
                        *o += g;
                    }
                }
            }
            Op::CrossEntropy { logits, labels } => {
                let (nl, nlab) = two_mut(before, logits.0, labels.0);
                let c = *nl.shape.last().unwrap();
                let rows = nl.value.len() / c;
                if let Some(dl) = sink(nl) {
                    let g = node.grad[0] / rows as f64;
                    for r in 0..rows {
                        let label = nlab.value[r] as usize;
                        let probs = &node.aux[r * c..(r + 1) * c];
                        let drow = &mut dl[r * c..(r + 1) * c];
                        for j in 0..c {
                            let y = if j == label { 1.0 } else { 0.0 };
                            drow[j] += g * (probs[j] - y);
                        }
                    }
                }
            }
        }
    }
}
