//! Dense f64 tensors and the softmax/cross-entropy entry point.
//!
//! All math in this crate is 64-bit with fixed (sequential, flat-index)
//! reduction order, so every result is bitwise reproducible for a given
//! seed and config.

mod check;
mod graph;
mod ops;

pub use check::finite_diff_check;
pub use graph::{Graph, NodeId};

use crate::error::{Error, Result};

/// Dense numeric array: shape, flat value buffer, optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Build a tensor, enforcing the shape/length and finiteness invariants.
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::InvalidInput(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                values.len()
            )));
        }
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite value {} at flat index {}",
                values[bad], bad
            )));
        }
        Ok(Tensor {
            shape,
            values,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            values: vec![0.0; numel],
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor {
            shape: vec![],
            values: vec![v],
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.values.len() {
            return Err(Error::InvalidInput(format!(
                "grad length {} != value length {}",
                grad.len(),
                self.values.len()
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Row-major 2D accessor; panics on rank != 2 misuse in debug builds.
    pub fn row(&self, r: usize) -> &[f64] {
        debug_assert_eq!(self.shape.len(), 2);
        let cols = self.shape[1];
        &self.values[r * cols..(r + 1) * cols]
    }
}

/// Numerically stable softmax of one row, written into `out`.
pub(crate) fn softmax_row(row: &[f64], out: &mut [f64]) {
    let mut max = f64::NEG_INFINITY;
    for &v in row {
        if v > max {
            max = v;
        }
    }
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row.iter()) {
        let e = (v - max).exp();
        *o = e;
        sum += e;
    }
    let inv = 1.0 / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

/// Mean cross-entropy over a batch of logit rows plus the per-row logit
/// gradient in closed form: `dL_dz[b, j] = p[b, j] - y[b, j]` where `p`
/// is the softmax of row `b` and `y` the one-hot label. The gradient is
/// per-sample (not divided by the batch size).
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    if logits.shape().len() != 2 {
        return Err(Error::InvalidInput(format!(
            "expected [batch, classes] logits, got shape {:?}",
            logits.shape()
        )));
    }
    let (batch, n) = (logits.shape()[0], logits.shape()[1]);
    if batch == 0 {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    if n < 2 {
        return Err(Error::InvalidInput(format!("need >= 2 classes, got {n}")));
    }
    if labels.len() != batch {
        return Err(Error::InvalidInput(format!(
            "{} labels for batch of {}",
            labels.len(),
            batch
        )));
    }
    if let Some(bad) = logits.values().iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite logit at flat index {bad}"
        )));
    }
    let mut dl = vec![0.0; batch * n];
    let mut loss_sum = 0.0;
    for b in 0..batch {
        let label = labels[b];
        if label >= n {
            return Err(Error::InvalidInput(format!(
                "label {label} out of range for {n} classes"
            )));
        }
        let row = logits.row(b);
        let out = &mut dl[b * n..(b + 1) * n];
        softmax_row(row, out);
        let p_label = out[label];
        if p_label <= 0.0 {
            return Err(Error::Numeric(format!(
                "underflowed true-class probability in row {b}"
            )));
        }
        loss_sum += -p_label.ln();
        out[label] -= 1.0;
    }
    let loss = loss_sum / batch as f64;
    Ok((loss, Tensor::new(vec![batch, n], dl)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_shape_invariant() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2], vec![f64::NAN, 0.0]).is_err());
        assert!(Tensor::new(vec![2], vec![f64::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn scalar_has_empty_shape_and_one_element() {
        let t = Tensor::scalar(4.0);
        assert_eq!(t.shape(), &[] as &[usize]);
        assert_eq!(t.numel(), 1);
    }

    // Symmetric logits: p = [0.5, 0.5] exactly, so the gradient and the
    // ln 2 loss are exact, not approximate.
    #[test]
    fn ce_symmetric_logits_exact() {
        let z = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let (loss, dl) = softmax_cross_entropy(&z, &[0]).unwrap();
        assert_eq!(dl.values(), &[-0.5, 0.5]);
        assert_eq!(loss, std::f64::consts::LN_2);
    }

    // z = [ln 3, 0] gives p = [0.75, 0.25]; with label 1 the gradient is
    // [0.75, -0.75]. Hand-evaluated; float error only from exp(-ln 3).
    #[test]
    fn ce_hand_evaluated_case() {
        let z = Tensor::new(vec![1, 2], vec![3.0_f64.ln(), 0.0]).unwrap();
        let (loss, dl) = softmax_cross_entropy(&z, &[1]).unwrap();
        assert!((dl.values()[0] - 0.75).abs() < 1e-12);
        assert!((dl.values()[1] + 0.75).abs() < 1e-12);
        assert!((loss - -(0.25_f64.ln())).abs() < 1e-12);
    }

    // Over-confidence: z = [10, 0] with wrong label 1. The true-class
    // gradient approaches -1 and the confident-class gradient +1; the
    // deviation equals 1/(1+e^10) = p of the losing class.
    #[test]
    fn ce_overconfident_saturates_toward_unit_gradient() {
        let z = Tensor::new(vec![1, 2], vec![10.0, 0.0]).unwrap();
        let (_, dl) = softmax_cross_entropy(&z, &[1]).unwrap();
        let p_hi = 1.0 / (1.0 + (-10.0_f64).exp());
        assert!((dl.values()[0] - p_hi).abs() < 1e-12);
        assert!((dl.values()[1] + p_hi).abs() < 1e-12);
        assert!((dl.values()[0] - 1.0).abs() < 1e-4);
        assert!((dl.values()[1] + 1.0).abs() < 1e-4);
    }

    #[test]
    fn ce_rejects_bad_input() {
        let z = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        assert!(matches!(
            softmax_cross_entropy(&z, &[2]),
            Err(Error::InvalidInput(_))
        ));
        let empty = Tensor::new(vec![0, 2], vec![]).unwrap();
        assert!(matches!(
            softmax_cross_entropy(&empty, &[]),
            Err(Error::InvalidInput(_))
        ));
        let one_class = Tensor::new(vec![1, 1], vec![0.0]).unwrap();
        assert!(matches!(
            softmax_cross_entropy(&one_class, &[0]),
            Err(Error::InvalidInput(_))
        ));
    }

    // Batch loss is the mean of per-row losses and each row's gradient is
    // independent of the others.
    #[test]
    fn ce_batch_is_mean_of_rows() {
        let z = Tensor::new(vec![2, 2], vec![0.0, 0.0, 3.0_f64.ln(), 0.0]).unwrap();
        let (loss, dl) = softmax_cross_entropy(&z, &[0, 1]).unwrap();
        let expected = (std::f64::consts::LN_2 + -(0.25_f64.ln())) / 2.0;
        assert!((loss - expected).abs() < 1e-12);
        assert_eq!(dl.values()[0], -0.5);
        assert!((dl.values()[2] - 0.75).abs() < 1e-12);
    }
}
