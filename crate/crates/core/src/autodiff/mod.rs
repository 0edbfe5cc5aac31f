//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is built afresh for every forward pass: each operation
//! evaluates eagerly and records how to push gradients back to its inputs.
//! [`Graph::backward`] then walks the tape in reverse from a scalar root.

mod graph;
mod tensor;

pub use graph::{Gradients, Graph, NodeId};
pub use tensor::{elu, log_sum_exp, sigmoid, softplus, Tensor};

use thiserror::Error;

#[derive(Clone, Debug, Error, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected a 2-d tensor, got shape {shape:?}")]
    NotMatrix { op: &'static str, shape: Vec<usize> },
    #[error("{op}: invalid axis {axis}")]
    BadAxis { op: &'static str, axis: usize },
    #[error("{op}: index {index} out of range for size {size}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        size: usize,
    },
    #[error("{op}: non-finite result")]
    NonFinite { op: &'static str },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("backward needs a scalar root, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("{values} values do not fill shape {shape:?}")]
    BadShape { values: usize, shape: Vec<usize> },
    #[error("dropout rate {0} outside [0, 1)")]
    DropoutRate(f64),
}

/// Largest relative disagreement between reverse-mode gradients of `f` and
/// central finite differences `(f(x+ε) − f(x−ε)) / 2ε`, taken over every
/// input element where `|analytic| + |numeric| > 1e-8`. The relative error
/// of one element is `|a − n| / (|a| + |n|)`.
pub fn gradient_check<F>(f: F, inputs: &[Tensor], epsilon: f64) -> Result<f64, AutodiffError>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId, AutodiffError>,
{
    assert!(epsilon > 0.0, "epsilon must be positive");
    let eval = |values: &[Tensor]| -> Result<f64, AutodiffError> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = values.iter().map(|t| g.constant(t.clone())).collect();
        let root = f(&mut g, &ids)?;
        Ok(g.scalar(root))
    };

    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let root = f(&mut g, &ids)?;
    let grads = g.backward(root)?;

    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (k, id) in ids.iter().enumerate() {
        let analytic = grads
            .get(*id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape().to_vec()));
        for e in 0..inputs[k].len() {
            let orig = inputs[k].values()[e];
            probe[k].values_mut()[e] = orig + epsilon;
            let up = eval(&probe)?;
            probe[k].values_mut()[e] = orig - epsilon;
            let down = eval(&probe)?;
            probe[k].values_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * epsilon);
            let a = analytic.values()[e];
            let scale = a.abs() + numeric.abs();
            if scale > 1e-8 {
                worst = worst.max((a - numeric).abs() / scale);
            }
        }
    }
    Ok(worst)
}
