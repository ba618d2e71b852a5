//! Minimal reverse-mode automatic differentiation.
//!
//! A [`Graph`] records operations over [`DenseArray`](crate::DenseArray)
//! values. Conventions fixed here and relied on downstream:
//!
//! * ReLU and clamp pass no gradient at or beyond their kinks (`relu'(0) = 0`).
//! * Per-channel standard deviation is the population value (divide by
//!   `H·W`); its adjoint is zero for a channel with `σ = 0`.
//! * Max / k-th-largest extraction sends the gradient only to the selected
//!   entry; ties pick the lowest class index.
//! * Bilinear resizing uses align-corners-false coordinates.

mod graph;
pub mod kernels;

pub use graph::{Graph, NodeId, Op};

use crate::{DenseArray, Result};

/// Compares the analytic gradient of `root` w.r.t. `leaf` against central
/// differences with the given `step`, returning the worst relative error
/// `|a − c| / max(|a|, |c|, 1e-12)` over components.
///
/// The leaf is restored to its original binding before returning.
pub fn check_gradient(graph: &mut Graph, root: NodeId, leaf: NodeId, step: f64) -> Result<f64> {
    graph.evaluate(root)?;
    let analytic = graph.gradient(root, &[leaf])?.remove(0);
    let base = graph.value(leaf).clone();
    let mut worst: f64 = 0.0;
    for j in 0..base.len() {
        let probe = |delta: f64, g: &mut Graph| -> Result<f64> {
            let mut shifted = base.clone();
            shifted.data_mut()[j] += delta;
            g.bind(leaf, shifted)?;
            Ok(g.evaluate(root)?.item())
        };
        let plus = probe(step, graph)?;
        let minus = probe(-step, graph)?;
        let central = (plus - minus) / (2.0 * step);
        let a = analytic.data()[j];
        let err = (a - central).abs() / a.abs().max(central.abs()).max(1e-12);
        worst = worst.max(err);
    }
    graph.bind(leaf, base)?;
    graph.evaluate(root)?;
    Ok(worst)
}

/// Convenience: a fresh graph, a leaf holding `value`, and its id.
pub fn graph_with_leaf(value: DenseArray) -> (Graph, NodeId) {
    let mut g = Graph::new();
    let id = g.leaf(value);
    (g, id)
}
