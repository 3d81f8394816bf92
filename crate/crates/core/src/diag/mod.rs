//! Layer-wise observables: attention entropy, activation and parameter
//! gradient norms, and representation change (ΔCKA under a shared PCA
//! basis).
//!
//! Gradient norms are computed per training batch and arithmetic-meaned
//! over steps for reports. Entropy is in nats.

mod cka;
mod entropy;
mod pca;

pub use cka::{delta_cka, linear_cka};
pub use entropy::{attention_entropy, row_entropy_mean};
pub use pca::{project, shared_pca_basis, PcaInfo};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-layer time series of the three streaming observables.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LayerDiagnostics {
    pub layer: usize,
    /// Mean attention entropy per step (nats).
    pub entropy: Vec<f64>,
    /// ||dL/dh^(layer)||_2 per step, over the whole batch tensor.
    pub activation_grad_norm: Vec<f64>,
    /// ||grad of layer parameters||_2 per step; exactly 0 for frozen,
    /// non-adapted layers.
    pub param_grad_norm: Vec<f64>,
}

/// Streaming recorder: one entry per layer, one sample per step.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DiagnosticsLog {
    pub layers: Vec<LayerDiagnostics>,
}

impl DiagnosticsLog {
    pub fn new(num_layers: usize) -> DiagnosticsLog {
        DiagnosticsLog {
            layers: (0..num_layers)
                .map(|layer| LayerDiagnostics {
                    layer,
                    entropy: Vec::new(),
                    activation_grad_norm: Vec::new(),
                    param_grad_norm: Vec::new(),
                })
                .collect(),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn steps(&self) -> usize {
        self.layers.first().map_or(0, |l| l.entropy.len())
    }

    /// Record one step; every slice must carry exactly one value per layer.
    pub fn record_step(&mut self, entropy: &[f64], act_grad: &[f64], param_grad: &[f64]) -> Result<()> {
        let l = self.layers.len();
        if entropy.len() != l || act_grad.len() != l || param_grad.len() != l {
            return Err(Error::InvalidInput(format!(
                "expected {l} values per metric, got {}/{}/{}",
                entropy.len(),
                act_grad.len(),
                param_grad.len()
            )));
        }
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.entropy.push(entropy[i]);
            layer.activation_grad_norm.push(act_grad[i]);
            layer.param_grad_norm.push(param_grad[i]);
        }
        Ok(())
    }

    fn mean(xs: &[f64]) -> f64 {
        if xs.is_empty() {
            return 0.0;
        }
        let mut acc = 0.0;
        for &x in xs {
            acc += x;
        }
        acc / xs.len() as f64
    }

    /// Step-averaged entropy per layer.
    pub fn mean_entropy(&self) -> Vec<f64> {
        self.layers.iter().map(|l| Self::mean(&l.entropy)).collect()
    }

    /// Step-averaged activation gradient norm per layer.
    pub fn mean_activation_grad(&self) -> Vec<f64> {
        self.layers
            .iter()
            .map(|l| Self::mean(&l.activation_grad_norm))
            .collect()
    }

    /// Step-averaged parameter gradient norm per layer.
    pub fn mean_param_grad(&self) -> Vec<f64> {
        self.layers
            .iter()
            .map(|l| Self::mean(&l.param_grad_norm))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_shape_is_enforced() {
        let mut log = DiagnosticsLog::new(3);
        assert!(log.record_step(&[1.0, 2.0], &[0.0; 3], &[0.0; 3]).is_err());
        log.record_step(&[1.0, 2.0, 3.0], &[0.1, 0.2, 0.3], &[0.0, 0.0, 1.0])
            .unwrap();
        log.record_step(&[3.0, 2.0, 1.0], &[0.3, 0.2, 0.1], &[0.0, 0.0, 3.0])
            .unwrap();
        assert_eq!(log.steps(), 2);
        assert_eq!(log.mean_entropy(), vec![2.0, 2.0, 2.0]);
        assert_eq!(log.mean_activation_grad(), vec![0.2, 0.2, 0.2]);
        assert_eq!(log.mean_param_grad(), vec![0.0, 0.0, 2.0]);
    }

    #[test]
    fn empty_log_means_are_empty_zeroes() {
        let log = DiagnosticsLog::new(2);
        assert_eq!(log.steps(), 0);
        assert_eq!(log.mean_entropy(), vec![0.0, 0.0]);
    }
}
