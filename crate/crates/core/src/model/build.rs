//! Graph construction: binds a [`ModelState`] into an executable
//! [`Session`] for a fixed batch size and sequence length.
//!
//! A session owns a working copy of the parameters inside its graph;
//! training mutates the graph copy and [`Session::write_back`] syncs the
//! state at run boundaries. Block outputs are tapped so activation
//! gradients are observable on every layer regardless of trainability.

use crate::error::{Error, Result};
use crate::lora::LoraTarget;
use crate::tensor::{Graph, NodeId, Tensor};

use super::{Mode, ModelState, CLS_TOKEN_ID};

/// Per-layer artifacts of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Attention distributions, one `[batch, heads, seq, seq]` tensor per layer.
    pub attention: Vec<Tensor>,
    /// Block outputs h^(l), one `[batch, seq, d_model]` tensor per layer.
    pub block_outputs: Vec<Tensor>,
    /// [CLS] vectors per layer, `[batch, d_model]`.
    pub cls: Vec<Tensor>,
    /// Classifier logits, `[batch, num_classes]`.
    pub logits: Tensor,
}

pub struct Session {
    graph: Graph,
    batch: usize,
    /// Tokens supplied per row; the model input is `data_seq + 1` after
    /// the [CLS] prepend.
    data_seq: usize,
    seq: usize,
    vocab: usize,
    num_classes: usize,
    tokens: NodeId,
    labels: NodeId,
    attn_nodes: Vec<NodeId>,
    block_nodes: Vec<NodeId>,
    logits_node: NodeId,
    loss_node: NodeId,
    /// Graph node per state parameter, in state storage order.
    param_nodes: Vec<NodeId>,
    /// Graph (a, b) node pair per mounted adapter, in adapter order.
    adapter_nodes: Vec<(NodeId, NodeId)>,
    token_buf: Vec<f64>,
    label_buf: Vec<f64>,
}

impl Session {
    /// Build an executable graph for `batch` rows of `data_seq` tokens.
    /// `training` enables dropout (masks drawn from `dropout_seed`).
    pub fn build(
        state: &ModelState,
        batch: usize,
        data_seq: usize,
        training: bool,
        dropout_seed: u64,
    ) -> Result<Session> {
        let cfg = &state.config;
        cfg.validate()?;
        let seq = data_seq + 1;
        if batch == 0 || data_seq == 0 {
            return Err(Error::InvalidInput("empty batch or sequence".into()));
        }
        if seq > cfg.max_seq_len {
            return Err(Error::InvalidInput(format!(
                "sequence length {seq} (with [CLS]) exceeds max {}",
                cfg.max_seq_len
            )));
        }
        let mut g = Graph::new();
        g.set_training(training && state.mode == Mode::Train);
        g.set_dropout_seed(dropout_seed);

        let tokens = g.input(&[batch, seq]);
        let labels = g.input(&[batch]);

        // Bind parameters as graph leaves in state order.
        let mut param_nodes = Vec::with_capacity(state.params().len());
        for p in state.params() {
            param_nodes.push(g.param(&p.spec.shape, p.values.clone(), p.trainable)?);
        }
        let idx = |name: &str| -> Result<NodeId> {
            state
                .param_index(name)
                .map(|i| param_nodes[i])
                .ok_or_else(|| Error::InvalidState(format!("missing parameter {name}")))
        };

        let mut adapter_nodes = Vec::new();
        if let Some(set) = &state.adapters {
            for ad in &set.adapters {
                let a = g.param(ad.a.shape(), ad.a.values().to_vec(), true)?;
                let b = g.param(ad.b.shape(), ad.b.values().to_vec(), true)?;
                adapter_nodes.push((a, b));
            }
        }

        let emb = g.embedding(idx("embed.tok")?, tokens)?;
        let mut x = g.add_positional(emb, idx("embed.pos")?)?;
        if cfg.dropout > 0.0 {
            x = g.dropout(x, cfg.dropout)?;
        }

        let heads = cfg.num_heads;
        let head_dim = cfg.d_model / heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut attn_nodes = Vec::with_capacity(cfg.num_layers);
        let mut block_nodes = Vec::with_capacity(cfg.num_layers);

        for l in 0..cfg.num_layers {
            // Projections, with the low-rank path added where mounted.
            let proj = |g: &mut Graph, target: LoraTarget| -> Result<NodeId> {
                let t = target.as_str();
                let w = idx(&format!("layer.{l}.attn.w{t}"))?;
                let b = idx(&format!("layer.{l}.attn.b{t}"))?;
                let base = g.matmul_nt(x, w)?;
                let mut y = g.add_bias(base, b)?;
                if let Some(set) = &state.adapters {
                    if let Some(pos) = set
                        .adapters
                        .iter()
                        .position(|a| a.layer == l && a.target == target)
                    {
                        let ad = &set.adapters[pos];
                        let (an, bn) = adapter_nodes[pos];
                        let ad_in = if ad.dropout > 0.0 {
                            g.dropout(x, ad.dropout)?
                        } else {
                            x
                        };
                        let u = g.matmul_nt(ad_in, an)?;
                        let v = g.matmul_nt(u, bn)?;
                        let scaled = g.scale(v, ad.multiplier())?;
                        y = g.add(y, scaled)?;
                    }
                }
                Ok(y)
            };
            let q = proj(&mut g, LoraTarget::Q)?;
            let k = proj(&mut g, LoraTarget::K)?;
            let v = proj(&mut g, LoraTarget::V)?;

            let qh = g.split_heads(q, heads)?;
            let kh = g.split_heads(k, heads)?;
            let vh = g.split_heads(v, heads)?;
            let scores = g.matmul_nt(qh, kh)?;
            let scaled = g.scale(scores, scale)?;
            let attn = g.softmax(scaled)?;
            attn_nodes.push(attn);
            let attn_used = if cfg.dropout > 0.0 {
                g.dropout(attn, cfg.dropout)?
            } else {
                attn
            };
            let ctx = g.matmul(attn_used, vh)?;
            let merged = g.merge_heads(ctx)?;
            let wo = idx(&format!("layer.{l}.attn.wo"))?;
            let bo = idx(&format!("layer.{l}.attn.bo"))?;
            let om = g.matmul_nt(merged, wo)?;
            let mut attn_out = g.add_bias(om, bo)?;
            if cfg.dropout > 0.0 {
                attn_out = g.dropout(attn_out, cfg.dropout)?;
            }
            let res1 = g.add(x, attn_out)?;
            let h1 = g.layer_norm(
                res1,
                idx(&format!("layer.{l}.ln1.gamma"))?,
                idx(&format!("layer.{l}.ln1.beta"))?,
                cfg.layernorm_eps,
            )?;

            let w1 = idx(&format!("layer.{l}.ffn.w1"))?;
            let b1 = idx(&format!("layer.{l}.ffn.b1"))?;
            let f1m = g.matmul_nt(h1, w1)?;
            let f1 = g.add_bias(f1m, b1)?;
            let act = g.gelu(f1)?;
            let w2 = idx(&format!("layer.{l}.ffn.w2"))?;
            let b2 = idx(&format!("layer.{l}.ffn.b2"))?;
            let f2m = g.matmul_nt(act, w2)?;
            let mut f2 = g.add_bias(f2m, b2)?;
            if cfg.dropout > 0.0 {
                f2 = g.dropout(f2, cfg.dropout)?;
            }
            let res2 = g.add(h1, f2)?;
            let h2 = g.layer_norm(
                res2,
                idx(&format!("layer.{l}.ln2.gamma"))?,
                idx(&format!("layer.{l}.ln2.beta"))?,
                cfg.layernorm_eps,
            )?;
            g.tap(h2)?;
            block_nodes.push(h2);
            x = h2;
        }

        let cls = g.take_token(x, 0)?;
        let hw = idx("head.w")?;
        let hb = idx("head.b")?;
        let lm = g.matmul_nt(cls, hw)?;
        let raw_logits = g.add_bias(lm, hb)?;
        let logits_node = if cfg.logit_scale != 1.0 {
            g.scale(raw_logits, cfg.logit_scale)?
        } else {
            raw_logits
        };
        let loss_node = g.cross_entropy(logits_node, labels)?;

        Ok(Session {
            graph: g,
            batch,
            data_seq,
            seq,
            vocab: cfg.vocab_size,
            num_classes: cfg.num_classes,
            tokens,
            labels,
            attn_nodes,
            block_nodes,
            logits_node,
            loss_node,
            param_nodes,
            adapter_nodes,
            token_buf: vec![0.0; batch * seq],
            label_buf: vec![0.0; batch],
        })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn seq(&self) -> usize {
        self.seq
    }

    /// Load `batch * data_seq` data tokens (row-major) and one label per
    /// row. The [CLS] token is prepended to each row here.
    pub fn load_batch(&mut self, tokens: &[usize], labels: &[usize]) -> Result<()> {
        if tokens.len() != self.batch * self.data_seq {
            return Err(Error::InvalidInput(format!(
                "expected {} tokens, got {}",
                self.batch * self.data_seq,
                tokens.len()
            )));
        }
        if labels.len() != self.batch {
            return Err(Error::InvalidInput(format!(
                "expected {} labels, got {}",
                self.batch,
                labels.len()
            )));
        }
        for &t in tokens {
            if t >= self.vocab {
                return Err(Error::InvalidInput(format!(
                    "token id {t} out of vocabulary of size {}",
                    self.vocab
                )));
            }
        }
        for &l in labels {
            if l >= self.num_classes {
                return Err(Error::InvalidInput(format!(
                    "label {l} out of range for {} classes",
                    self.num_classes
                )));
            }
        }
        for b in 0..self.batch {
            self.token_buf[b * self.seq] = CLS_TOKEN_ID as f64;
            for (i, &t) in tokens[b * self.data_seq..(b + 1) * self.data_seq]
                .iter()
                .enumerate()
            {
                self.token_buf[b * self.seq + 1 + i] = t as f64;
            }
            self.label_buf[b] = labels[b] as f64;
        }
        let tb = std::mem::take(&mut self.token_buf);
        self.graph.set_input(self.tokens, &tb)?;
        self.token_buf = tb;
        let lb = std::mem::take(&mut self.label_buf);
        self.graph.set_input(self.labels, &lb)?;
        self.label_buf = lb;
        Ok(())
    }

    pub fn forward(&mut self) -> Result<()> {
        self.graph.forward()
    }

    pub fn backward(&mut self) -> Result<()> {
        self.graph.backward(self.loss_node)
    }

    pub fn loss(&self) -> f64 {
        self.graph.value(self.loss_node)[0]
    }

    pub fn logits(&self) -> &[f64] {
        self.graph.value(self.logits_node)
    }

    pub fn num_layers(&self) -> usize {
        self.block_nodes.len()
    }

    /// Raw attention values for a layer, shape `[batch, heads, seq, seq]`.
    pub fn attention_values(&self, layer: usize) -> &[f64] {
        self.graph.value(self.attn_nodes[layer])
    }

    pub fn attention_shape(&self, layer: usize) -> &[usize] {
        self.graph.shape(self.attn_nodes[layer])
    }

    /// Gradient of the loss w.r.t. a block output, populated after
    /// backward (the block nodes are tapped).
    pub fn block_grad(&self, layer: usize) -> Option<&[f64]> {
        self.graph.grad(self.block_nodes[layer])
    }

    pub fn block_values(&self, layer: usize) -> &[f64] {
        self.graph.value(self.block_nodes[layer])
    }

    /// Iterator over per-row [CLS] vectors of a layer's block output.
    pub fn cls_rows(&self, layer: usize) -> impl Iterator<Item = &[f64]> {
        let v = self.graph.value(self.block_nodes[layer]);
        let seq = self.seq;
        let d = v.len() / (self.batch * seq);
        (0..self.batch).map(move |b| &v[b * seq * d..b * seq * d + d])
    }

    /// Euclidean norm of the loss gradient w.r.t. h^(layer), flattened
    /// over the whole batch.
    pub fn activation_grad_norm(&self, layer: usize) -> Result<f64> {
        let g = self.block_grad(layer).ok_or_else(|| {
            Error::State(format!(
                "no gradient tapped on block {layer}; run backward first"
            ))
        })?;
        let mut acc = 0.0;
        for &v in g {
            acc += v * v;
        }
        Ok(acc.sqrt())
    }

    /// Per-layer squared parameter-gradient mass; exactly 0.0 for layers
    /// with no trainable parameters and no adapters.
    pub fn param_grad_sq_per_layer(&self, state: &ModelState) -> Vec<f64> {
        let l = state.config.num_layers;
        let mut acc = vec![0.0; l];
        for (p, &node) in state.params().iter().zip(self.param_nodes.iter()) {
            if let (Some(layer), Some(g)) = (p.spec.layer, self.graph.grad(node)) {
                let s: f64 = g.iter().map(|v| v * v).sum();
                acc[layer] += s;
            }
        }
        if let Some(set) = &state.adapters {
            for (ad, &(an, bn)) in set.adapters.iter().zip(self.adapter_nodes.iter()) {
                for node in [an, bn] {
                    if let Some(g) = self.graph.grad(node) {
                        let s: f64 = g.iter().map(|v| v * v).sum();
                        acc[ad.layer] += s;
                    }
                }
            }
        }
        acc
    }

    /// Trainable parameter nodes (base then adapters) in stable order,
    /// for the optimizer.
    pub fn trainable_nodes(&self) -> Vec<NodeId> {
        let mut out: Vec<NodeId> = self
            .param_nodes
            .iter()
            .copied()
            .filter(|&n| self.graph.is_trainable(n))
            .collect();
        for &(a, b) in &self.adapter_nodes {
            out.push(a);
            out.push(b);
        }
        out
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn graph_mut(&mut self) -> &mut Graph {
        &mut self.graph
    }

    pub fn loss_node(&self) -> NodeId {
        self.loss_node
    }

    pub fn param_node(&self, state: &ModelState, name: &str) -> Option<NodeId> {
        state.param_index(name).map(|i| self.param_nodes[i])
    }

    /// Copy the graph's (possibly trained) parameter and adapter values
    /// back into the state.
    pub fn write_back(&mut self, state: &mut ModelState) -> Result<()> {
        for i in 0..self.param_nodes.len() {
            let node = self.param_nodes[i];
            let values = self.graph.param_values_mut(node)?.to_vec();
            state.params_mut()[i].values = values;
        }
        if let Some(set) = &mut state.adapters {
            for (i, ad) in set.adapters.iter_mut().enumerate() {
                let (an, bn) = self.adapter_nodes[i];
                let av = self.graph.param_values_mut(an)?.to_vec();
                let bv = self.graph.param_values_mut(bn)?.to_vec();
                ad.a = Tensor::new(ad.a.shape().to_vec(), av)?;
                ad.b = Tensor::new(ad.b.shape().to_vec(), bv)?;
            }
        }
        Ok(())
    }

    /// Copy out the full per-layer trace of the last forward pass.
    pub fn trace(&self) -> Result<ForwardTrace> {
        let l = self.block_nodes.len();
        let mut attention = Vec::with_capacity(l);
        let mut block_outputs = Vec::with_capacity(l);
        let mut cls = Vec::with_capacity(l);
        let d = {
            let s = self.graph.shape(self.block_nodes[0]);
            s[2]
        };
        for layer in 0..l {
            attention.push(Tensor::new(
                self.attention_shape(layer).to_vec(),
                self.attention_values(layer).to_vec(),
            )?);
            block_outputs.push(Tensor::new(
                self.graph.shape(self.block_nodes[layer]).to_vec(),
                self.block_values(layer).to_vec(),
            )?);
            let mut c = vec![0.0; self.batch * d];
            for (b, row) in self.cls_rows(layer).enumerate() {
                c[b * d..(b + 1) * d].copy_from_slice(row);
            }
            cls.push(Tensor::new(vec![self.batch, d], c)?);
        }
        let logits = Tensor::new(
            vec![self.batch, self.num_classes],
            self.logits().to_vec(),
        )?;
        Ok(ForwardTrace {
            attention,
            block_outputs,
            cls,
            logits,
        })
    }
}
