//! Reverse-mode automatic differentiation over dense tensors, with a
//! forward tangent channel recorded on the same graph.

mod gradcheck;
mod graph;

pub use gradcheck::{
    compare_gradients, finite_diff_check, relative_error, GradCheckReport, RELATIVE_ERROR_FLOOR,
};
pub use graph::{Gradients, Graph, Var};

use crate::error::AutodiffError;
use crate::tensor::Tensor;

/// Derivative of `output` along the tangent already seeded on `seed`.
///
/// The seed has to be placed with [`Graph::seed_tangent`] before the
/// forward pass that produces `output`; this is a convenience that checks
/// the seed is a leaf on the same graph and reads the tangent channel.
/// The result is a graph node and can be passed to [`Graph::backward`].
pub fn directional_derivative<'g>(
    graph: &'g Graph,
    output: Var<'g>,
    seed: Var<'g>,
) -> Result<Var<'g>, AutodiffError> {
    if !graph.tangent_enabled() {
        return Err(AutodiffError::TangentInactive);
    }
    if output.numel() != 1 {
        return Err(AutodiffError::NotScalar(output.shape()));
    }
    debug_assert!(std::ptr::eq(seed.graph(), graph));
    graph.tangent(output)
}

impl Var<'_> {
    pub fn numel(&self) -> usize {
        self.shape().iter().product()
    }
}

/// Convenience: a leaf seeded with the all-ones direction.
pub fn seeded_input(graph: &Graph, value: Tensor) -> Result<Var<'_>, AutodiffError> {
    let dir = Tensor::full(value.shape(), 1.0);
    let v = graph.input(value)?;
    graph.seed_tangent(v, dir)?;
    Ok(v)
}
