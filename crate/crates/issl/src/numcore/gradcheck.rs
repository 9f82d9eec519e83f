//! Central finite-difference oracle for the gradient engine.
//!
//! The builder closure is re-run from scratch for every perturbed entry, so
//! the numeric estimate never touches the analytic backward path.

use super::graph::{Graph, NodeId};
use super::matrix::Matrix;
use crate::error::Result;

/// Per-entry error between analytic gradient `a` and numeric estimate `n`,
/// scaled so O(1) gradients are compared relatively and tiny ones absolutely.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / f64::max(1.0, f64::max(a.abs(), n.abs()))
}

/// Build the graph once for the analytic gradients, then estimate every
/// input-entry derivative with central differences f(x+h)-f(x-h) over 2h.
/// Returns the worst [`rel_err`] across all entries of all inputs.
pub fn max_rel_err<F>(inputs: &[Matrix], build: F, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let eval = |mats: &[Matrix]| -> Result<(Graph, Vec<NodeId>, NodeId)> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = mats.iter().map(|m| g.leaf(m.clone())).collect();
        let root = build(&mut g, &ids)?;
        Ok((g, ids, root))
    };

    let (mut g, ids, root) = eval(inputs)?;
    g.backward(root)?;

    let mut worst = 0.0f64;
    for (k, m) in inputs.iter().enumerate() {
        for r in 0..m.rows() {
            for c in 0..m.cols() {
                let mut plus = inputs.to_vec();
                plus[k].set(r, c, m.get(r, c) + h);
                let (gp, _, rp) = eval(&plus)?;
                let mut minus = inputs.to_vec();
                minus[k].set(r, c, m.get(r, c) - h);
                let (gm, _, rm) = eval(&minus)?;
                let numeric = (gp.scalar_value(rp) - gm.scalar_value(rm)) / (2.0 * h);
                let analytic = g.grad(ids[k]).get(r, c);
                worst = worst.max(rel_err(analytic, numeric));
            }
        }
    }
    Ok(worst)
}
