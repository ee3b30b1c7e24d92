use std::collections::BTreeMap;

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};

/// Compares reverse-mode gradients of `root` with respect to the named leaf
/// against central differences.
///
/// Returns `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`. The graph
/// is restored to its original leaf values before returning.
pub fn finite_diff_check(g: &mut Graph, root: NodeId, leaf: &str, epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon <= 1e-3) {
        return Err(Error::Contract(format!("epsilon {epsilon} outside (0, 1e-3]")));
    }
    let id = g
        .leaf(leaf)
        .ok_or_else(|| Error::Contract(format!("no leaf named `{leaf}`")))?;
    let original = g.value(id).clone();
    g.eval_forward(root, &BTreeMap::new())?;
    let analytic = g
        .eval_backward(root)?
        .remove(leaf)
        .expect("named leaf always has a gradient entry");

    let mut worst: f64 = 0.0;
    let mut bindings = BTreeMap::new();
    for i in 0..original.len() {
        let mut plus = original.clone();
        plus.as_mut_slice()[i] += epsilon;
        let mut minus = original.clone();
        minus.as_mut_slice()[i] -= epsilon;

        bindings.insert(leaf.to_string(), plus);
        let fp = g.eval_forward(root, &bindings)?.item();
        bindings.insert(leaf.to_string(), minus);
        let fm = g.eval_forward(root, &bindings)?.item();

        let numeric = (fp - fm) / (2.0 * epsilon);
        let a = analytic.as_slice()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    bindings.insert(leaf.to_string(), original);
    g.eval_forward(root, &bindings)?;
    Ok(worst)
}

/// [`finite_diff_check`] over every trainable leaf; returns the worst error.
pub fn finite_diff_check_all(g: &mut Graph, root: NodeId, epsilon: f64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for name in g.param_names() {
        worst = worst.max(finite_diff_check(g, root, &name, epsilon)?);
    }
    Ok(worst)
}
