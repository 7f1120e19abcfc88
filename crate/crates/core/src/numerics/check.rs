use super::{Graph, NodeId};
use crate::error::{Error, Result};

/// Compares `backward` against central differences over every trainable coordinate.
///
/// Returns the largest `|numeric - analytic| / max(1, |analytic|)`. The graph is
/// left with its original leaf values and freshly computed gradients.
pub fn finite_difference_check(graph: &mut Graph, loss: NodeId, eps: f64) -> Result<f64> {
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::Contract(format!("finite-difference step must lie in (0, 1e-2], got {eps}")));
    }
    graph.forward()?;
    let analytic = graph.backward(loss)?;
    let mut worst: f64 = 0.0;
    for (leaf, grad) in analytic.iter() {
        for k in 0..grad.len() {
            let original = graph.value(leaf).data()[k];
            let plus = eval_at(graph, leaf, k, original + eps, loss)?;
            let minus = eval_at(graph, leaf, k, original - eps, loss)?;
            graph.leaf_data_mut(leaf)[k] = original;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[k];
            let rel = (numeric - a).abs() / a.abs().max(1.0);
            worst = worst.max(rel);
        }
    }
    graph.forward()?;
    Ok(worst)
}

fn eval_at(graph: &mut Graph, leaf: NodeId, k: usize, value: f64, loss: NodeId) -> Result<f64> {
    graph.leaf_data_mut(leaf)[k] = value;
    graph.forward()?;
    let v = graph.value(loss).item()?;
    if !v.is_finite() {
        return Err(Error::NumericalInstability(format!(
            "loss became {v} when perturbing coordinate {k} of node {}",
            leaf.index()
        )));
    }
    Ok(v)
}
