//! Adam with decoupled weight decay, fixed learning rate, no schedule.
//! Operates in place on a graph's trainable parameter nodes; moment
//! buffers are keyed by node order, so a given (graph, seed) pair steps
//! bitwise identically every run.

use crate::error::Result;
use crate::tensor::{Graph, NodeId};

pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u32,
    nodes: Vec<NodeId>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(graph: &Graph, nodes: Vec<NodeId>, lr: f64, weight_decay: f64) -> AdamW {
        let m = nodes.iter().map(|&n| vec![0.0; graph.value(n).len()]).collect();
        let v = nodes.iter().map(|&n| vec![0.0; graph.value(n).len()]).collect();
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            nodes,
            m,
            v,
        }
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }

    /// One update from the gradients of the last backward pass. Nodes
    /// whose gradient is absent (loss-independent) are left untouched.
    pub fn step(&mut self, graph: &mut Graph) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, &node) in self.nodes.iter().enumerate() {
            let (w, grad) = graph.param_value_grad_mut(node)?;
            let Some(g) = grad else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..w.len() {
                let gj = g[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                w[j] -= self.lr * mhat / (vhat.sqrt() + self.eps) + self.lr * self.weight_decay * w[j];
            }
        }
        Ok(())
    }
}
