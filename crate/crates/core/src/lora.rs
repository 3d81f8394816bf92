//! Low-rank adapters: ΔW = B·A mounted on attention projection matrices.
//!
//! `B` starts at zero so mounting never changes model outputs; `A` is
//! seeded small-uniform. The effective update is scaled by `alpha / rank`.
//! Adapters train with a frozen backbone and can be merged into the base
//! weights for inference.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Which projection matrix an adapter attaches to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, Hash)]
#[serde(rename_all = "lowercase")]
pub enum LoraTarget {
    Q,
    K,
    V,
}

impl LoraTarget {
    pub fn all() -> [LoraTarget; 3] {
        [LoraTarget::Q, LoraTarget::K, LoraTarget::V]
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            LoraTarget::Q => "q",
            LoraTarget::K => "k",
            LoraTarget::V => "v",
        }
    }
}

/// Mount-time description of an adapter set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoraSpec {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub targets: Vec<LoraTarget>,
    pub layers: Vec<usize>,
}

impl LoraSpec {
    /// Standard hyperparameters on the given layers: rank 4, scale 16,
    /// dropout 0.05, Q/K/V targets.
    pub fn with_layers(layers: Vec<usize>) -> LoraSpec {
        LoraSpec {
            rank: 4,
            alpha: 16.0,
            dropout: 0.05,
            targets: LoraTarget::all().to_vec(),
            layers,
        }
    }

    /// Effective multiplier applied to B·A: `alpha / rank`.
    pub fn multiplier(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::InvalidInput("adapter rank must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidInput(format!(
                "adapter dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if self.targets.is_empty() {
            return Err(Error::InvalidInput("adapter target set is empty".into()));
        }
        if self.layers.is_empty() {
            return Err(Error::InvalidInput("adapter layer set is empty".into()));
        }
        for &l in &self.layers {
            if l >= num_layers {
                return Err(Error::InvalidInput(format!(
                    "adapter layer {l} out of range for {num_layers} layers"
                )));
            }
        }
        let mut seen = self.layers.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.layers.len() {
            return Err(Error::InvalidInput("duplicate adapter layers".into()));
        }
        Ok(())
    }
}

/// One mounted adapter: `A: [rank, d_in]`, `B: [d_out, rank]`, plus the
/// hyperparameters it was mounted with.
#[derive(Debug, Clone)]
pub struct LoraAdapter {
    pub layer: usize,
    pub target: LoraTarget,
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub a: Tensor,
    pub b: Tensor,
}

impl LoraAdapter {
    pub fn multiplier(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn num_params(&self) -> usize {
        self.a.numel() + self.b.numel()
    }

    /// Dense ΔW = multiplier * B·A, shape `[d_out, d_in]`.
    pub fn dense_delta(&self) -> Tensor {
        let r = self.rank;
        let d_in = self.a.shape()[1];
        let d_out = self.b.shape()[0];
        let mult = self.multiplier();
        let mut out = vec![0.0; d_out * d_in];
        for i in 0..d_out {
            for p in 0..r {
                let bv = self.b.values()[i * r + p];
                if bv == 0.0 {
                    continue;
                }
                let arow = &self.a.values()[p * d_in..(p + 1) * d_in];
                let orow = &mut out[i * d_in..(i + 1) * d_in];
                for (o, &av) in orow.iter_mut().zip(arow.iter()) {
                    *o += mult * bv * av;
                }
            }
        }
        Tensor::new(vec![d_out, d_in], out).expect("finite adapter product")
    }
}

/// All adapters mounted on a model, sorted by (layer, target).
#[derive(Debug, Clone, Default)]
pub struct LoraSet {
    pub adapters: Vec<LoraAdapter>,
}

impl LoraSet {
    pub fn num_params(&self) -> usize {
        self.adapters.iter().map(|a| a.num_params()).sum()
    }

    pub fn get(&self, layer: usize, target: LoraTarget) -> Option<&LoraAdapter> {
        self.adapters
            .iter()
            .find(|a| a.layer == layer && a.target == target)
    }

    pub fn layers(&self) -> Vec<usize> {
        let mut ls: Vec<usize> = self.adapters.iter().map(|a| a.layer).collect();
        ls.sort_unstable();
        ls.dedup();
        ls
    }
}

/// Build freshly initialized adapters for a spec: `A ~ U(-1/sqrt(d), 1/sqrt(d))`
/// from the seeded `lora.init` stream, `B = 0`.
pub fn init_adapters(spec: &LoraSpec, d_model: usize, num_layers: usize, seed: u64) -> Result<LoraSet> {
    spec.validate(num_layers)?;
    let mut rng = Rng::from_stream(seed, "lora.init");
    let bound = 1.0 / (d_model as f64).sqrt();
    let mut layers = spec.layers.clone();
    layers.sort_unstable();
    let mut adapters = Vec::new();
    let mut targets = spec.targets.clone();
    targets.sort();
    targets.dedup();
    for &layer in &layers {
        for &target in &targets {
            let a: Vec<f64> = (0..spec.rank * d_model)
                .map(|_| rng.uniform_in(-bound, bound))
                .collect();
            adapters.push(LoraAdapter {
                layer,
                target,
                rank: spec.rank,
                alpha: spec.alpha,
                dropout: spec.dropout,
                a: Tensor::new(vec![spec.rank, d_model], a)?,
                b: Tensor::zeros(vec![d_model, spec.rank]),
            });
        }
    }
    Ok(LoraSet { adapters })
}

/// Eager adapted projection: `x·W^T + bias + multiplier * (x·A^T)·B^T`.
///
/// `x: [n, d_in]`, `w: [d_out, d_in]`. Dropout is intentionally absent
/// here; this entry point serves verification against the dense oracle
/// and deterministic inference paths.
pub fn adapted_projection(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    adapter: &LoraAdapter,
    multiplier: f64,
) -> Result<Tensor> {
    if x.shape().len() != 2 || w.shape().len() != 2 {
        return Err(Error::InvalidInput("adapted_projection expects 2-D x and w".into()));
    }
    let (n, d_in) = (x.shape()[0], x.shape()[1]);
    let (d_out, wk) = (w.shape()[0], w.shape()[1]);
    let r = adapter.rank;
    if wk != d_in || adapter.a.shape() != [r, d_in] || adapter.b.shape() != [d_out, r] {
        return Err(Error::InvalidInput(format!(
            "shape mismatch: x {:?}, w {:?}, a {:?}, b {:?}",
            x.shape(),
            w.shape(),
            adapter.a.shape(),
            adapter.b.shape()
        )));
    }
    if let Some(bias) = bias {
        if bias.shape() != [d_out] {
            return Err(Error::InvalidInput(format!(
                "bias shape {:?} does not match d_out {d_out}",
                bias.shape()
            )));
        }
    }
    let mut out = vec![0.0; n * d_out];
    let mut xa = vec![0.0; n * r];
    for i in 0..n {
        let xrow = x.row(i);
        // x·W^T
        let orow = &mut out[i * d_out..(i + 1) * d_out];
        for (j, o) in orow.iter_mut().enumerate() {
            let wrow = &w.values()[j * d_in..(j + 1) * d_in];
            let mut acc = 0.0;
            for (xv, wv) in xrow.iter().zip(wrow.iter()) {
                acc += xv * wv;
            }
            *o = acc;
            if let Some(bias) = bias {
                *o += bias.values()[j];
            }
        }
        // x·A^T
        let xarow = &mut xa[i * r..(i + 1) * r];
        for (p, o) in xarow.iter_mut().enumerate() {
            let arow = &adapter.a.values()[p * d_in..(p + 1) * d_in];
            let mut acc = 0.0;
            for (xv, av) in xrow.iter().zip(arow.iter()) {
                acc += xv * av;
            }
            *o = acc;
        }
        // + multiplier * (x·A^T)·B^T
        let orow = &mut out[i * d_out..(i + 1) * d_out];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &adapter.b.values()[j * r..(j + 1) * r];
            let mut acc = 0.0;
            for (u, bv) in xa[i * r..(i + 1) * r].iter().zip(brow.iter()) {
                acc += u * bv;
            }
            *o += multiplier * acc;
        }
    }
    Tensor::new(vec![n, d_out], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec_r4() -> LoraSpec {
        LoraSpec::with_layers(vec![0, 1])
    }

    // rank 4, alpha 16: effective multiplier 4.
    #[test]
    fn multiplier_is_alpha_over_rank() {
        assert_eq!(spec_r4().multiplier(), 4.0);
    }

    #[test]
    fn spec_validation_catches_bad_layers() {
        let mut s = spec_r4();
        s.layers = vec![0, 7];
        assert!(matches!(s.validate(6), Err(Error::InvalidInput(_))));
        let mut s = spec_r4();
        s.layers = vec![1, 1];
        assert!(s.validate(6).is_err());
        assert!(spec_r4().validate(6).is_ok());
    }

    // Layers {0,1,4,5,6} x QKV at rank 4: 15 adapters, each A zero-mean
    // small-uniform and B exactly zero.
    #[test]
    fn init_produces_layer_target_grid() {
        let spec = LoraSpec::with_layers(vec![0, 1, 4, 5, 6]);
        let set = init_adapters(&spec, 64, 12, 42).unwrap();
        assert_eq!(set.adapters.len(), 15);
        for ad in &set.adapters {
            assert!(ad.b.values().iter().all(|&v| v == 0.0));
            let bound = 1.0 / 8.0;
            assert!(ad.a.values().iter().all(|&v| v.abs() <= bound));
            assert!(ad.a.values().iter().any(|&v| v != 0.0));
        }
        // m layers * 3 targets * 2 * r * d_model
        assert_eq!(set.num_params(), 5 * 3 * 2 * 4 * 64);
    }

    #[test]
    fn init_is_seed_deterministic() {
        let spec = spec_r4();
        let s1 = init_adapters(&spec, 16, 4, 7).unwrap();
        let s2 = init_adapters(&spec, 16, 4, 7).unwrap();
        for (a, b) in s1.adapters.iter().zip(s2.adapters.iter()) {
            assert_eq!(a.a.values(), b.a.values());
        }
    }

    // B = 0 leaves the projection exactly at the base output.
    #[test]
    fn zero_b_is_identity_update() {
        let mut rng = Rng::new(3);
        let x = Tensor::new(vec![5, 6], (0..30).map(|_| rng.normal()).collect()).unwrap();
        let w = Tensor::new(vec![6, 6], (0..36).map(|_| rng.normal()).collect()).unwrap();
        let set = init_adapters(&LoraSpec::with_layers(vec![0]), 6, 1, 9).unwrap();
        let ad = set.get(0, LoraTarget::Q).unwrap();
        let got = adapted_projection(&x, &w, None, ad, ad.multiplier()).unwrap();
        let base = adapted_projection(
            &x,
            &w,
            None,
            ad,
            0.0, // multiplier 0 gives the plain projection
        )
        .unwrap();
        assert_eq!(got.values(), base.values());
    }

    // Random A, B: the low-rank path equals a dense projection through
    // W + multiplier * B·A within 1e-12.
    #[test]
    fn low_rank_path_matches_dense_oracle() {
        let mut rng = Rng::new(11);
        let (n, d_in, d_out, r) = (7, 9, 5, 3);
        let x = Tensor::new(vec![n, d_in], (0..n * d_in).map(|_| rng.normal()).collect()).unwrap();
        let w = Tensor::new(
            vec![d_out, d_in],
            (0..d_out * d_in).map(|_| rng.normal()).collect(),
        )
        .unwrap();
        let ad = LoraAdapter {
            layer: 0,
            target: LoraTarget::K,
            rank: r,
            alpha: 16.0,
            dropout: 0.0,
            a: Tensor::new(vec![r, d_in], (0..r * d_in).map(|_| rng.normal()).collect()).unwrap(),
            b: Tensor::new(
                vec![d_out, r],
                (0..d_out * r).map(|_| rng.normal()).collect(),
            )
            .unwrap(),
        };
        let got = adapted_projection(&x, &w, None, &ad, ad.multiplier()).unwrap();

        // Dense oracle: explicit W + mult*B·A, then a plain projection.
        let delta = ad.dense_delta();
        let dense: Vec<f64> = w
            .values()
            .iter()
            .zip(delta.values().iter())
            .map(|(a, b)| a + b)
            .collect();
        let wd = Tensor::new(vec![d_out, d_in], dense).unwrap();
        let zero = LoraAdapter {
            b: Tensor::zeros(vec![d_out, r]),
            a: ad.a.clone(),
            ..ad.clone()
        };
        let want = adapted_projection(&x, &wd, None, &zero, 0.0).unwrap();
        for (g, w) in got.values().iter().zip(want.values().iter()) {
            assert!((g - w).abs() < 1e-12, "{g} vs {w}");
        }
    }
}
