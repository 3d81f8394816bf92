//! Shannon entropy of attention distributions.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Entropy of one distribution row in nats, with the 0·ln 0 := 0
/// convention. Support is the unmasked positions only.
fn row_entropy(row: &[f64], valid: Option<&[bool]>) -> Result<f64> {
    let mut sum = 0.0;
    let mut h = 0.0;
    for (i, &a) in row.iter().enumerate() {
        if let Some(valid) = valid {
            if !valid[i] {
                continue;
            }
        }
        if a < 0.0 {
            return Err(Error::InvalidInput(format!(
                "negative attention weight {a}"
            )));
        }
        sum += a;
        if a > 0.0 {
            h -= a * a.ln();
        }
    }
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidInput(format!(
            "attention row sums to {sum}, not a distribution"
        )));
    }
    Ok(h)
}

/// Mean entropy over rows of a flat `[rows, support]` buffer. Fast path
/// for the training loop, no masking.
pub fn row_entropy_mean(values: &[f64], support: usize) -> Result<f64> {
    if support == 0 || values.len() % support != 0 {
        return Err(Error::InvalidInput(format!(
            "buffer of {} does not divide into rows of {support}",
            values.len()
        )));
    }
    let rows = values.len() / support;
    if rows == 0 {
        return Err(Error::InvalidInput("no rows".into()));
    }
    let mut acc = 0.0;
    for row in values.chunks(support) {
        acc += row_entropy(row, None)?;
    }
    Ok(acc / rows as f64)
}

/// Mean attention entropy of a `[batch, head, query, key]` tensor in
/// nats, averaged over batch, head, and query positions.
///
/// `mask`, when given, flags valid positions per `[batch, key]`; masked
/// keys are excluded from each row's support and masked query positions
/// are excluded from the average (requires query dim == key dim, i.e.
/// self-attention).
pub fn attention_entropy(attn: &Tensor, mask: Option<&[bool]>) -> Result<f64> {
    let s = attn.shape();
    if s.len() != 4 {
        return Err(Error::InvalidInput(format!(
            "expected [batch, head, query, key] attention, got {:?}",
            s
        )));
    }
    let (b, h, q, k) = (s[0], s[1], s[2], s[3]);
    if b * h * q == 0 || k == 0 {
        return Err(Error::InvalidInput("empty attention tensor".into()));
    }
    let Some(mask) = mask else {
        return row_entropy_mean(attn.values(), k);
    };
    if mask.len() != b * k {
        return Err(Error::InvalidInput(format!(
            "mask length {} != batch*key {}",
            mask.len(),
            b * k
        )));
    }
    if q != k {
        return Err(Error::InvalidInput(
            "masking requires self-attention (query dim == key dim)".into(),
        ));
    }
    let mut acc = 0.0;
    let mut count = 0usize;
    for bi in 0..b {
        let valid = &mask[bi * k..(bi + 1) * k];
        for hi in 0..h {
            for qi in 0..q {
                if !valid[qi] {
                    continue;
                }
                let off = ((bi * h + hi) * q + qi) * k;
                acc += row_entropy(&attn.values()[off..off + k], Some(valid))?;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::InvalidInput("mask excludes every position".into()));
    }
    Ok(acc / count as f64)
}
