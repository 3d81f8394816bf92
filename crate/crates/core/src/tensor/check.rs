//! Central finite-difference verification of analytic gradients.
//!
//! This path re-runs the graph's forward pass with perturbed parameter
//! entries; it never touches the backward implementation it is checking.

use crate::error::{Error, Result};

use super::{Graph, NodeId};

/// Compare analytic parameter gradients against central finite differences.
///
/// For each selected parameter, up to `max_entries_per_param` entries are
/// probed (evenly strided over the buffer; `None` probes all). Returns the
/// maximum over probed entries of
/// `|analytic - central| / max(|analytic|, |central|, 1e-12)`.
///
/// The graph must be deterministic: calling this with active dropout is an
/// invalid state.
pub fn finite_diff_check(
    graph: &mut Graph,
    loss: NodeId,
    params: &[NodeId],
    eps: f64,
    max_entries_per_param: Option<usize>,
) -> Result<f64> {
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::InvalidInput(format!("bad step size {eps}")));
    }
    if graph.has_active_dropout() {
        return Err(Error::InvalidState(
            "finite differences require a deterministic graph; dropout is active".into(),
        ));
    }
    for &p in params {
        if !graph.is_trainable(p) {
            return Err(Error::InvalidInput(format!(
                "parameter node {} is frozen; no analytic gradient to check",
                p.0
            )));
        }
    }

    graph.forward()?;
    graph.backward(loss)?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|&p| {
            graph
                .grad(p)
                .map(|g| g.to_vec())
                .ok_or_else(|| Error::State(format!("no gradient on parameter node {}", p.0)))
        })
        .collect::<Result<_>>()?;

    let mut max_rel = 0.0_f64;
    for (pi, &p) in params.iter().enumerate() {
        let n = analytic[pi].len();
        let probes = max_entries_per_param.unwrap_or(n).min(n).max(1);
        for s in 0..probes {
            // Evenly strided deterministic probe positions.
            let idx = s * n / probes;
            let original = graph.param_values_mut(p)?[idx];

            graph.param_values_mut(p)?[idx] = original + eps;
            graph.forward()?;
            let plus = graph.value(loss)[0];

            graph.param_values_mut(p)?[idx] = original - eps;
            graph.forward()?;
            let minus = graph.value(loss)[0];

            graph.param_values_mut(p)?[idx] = original;

            let central = (plus - minus) / (2.0 * eps);
            let a = analytic[pi][idx];
            let rel = (a - central).abs() / a.abs().max(central.abs()).max(1e-12);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    // Restore a consistent forward state for the caller.
    graph.forward()?;
    Ok(max_rel)
}
