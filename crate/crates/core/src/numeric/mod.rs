//! Dense matrices, reverse-mode differentiation and parameter storage.

mod gradcheck;
mod graph;
mod matrix;
mod params;
mod scalar;

pub use gradcheck::{
    finite_diff_check, finite_diff_check_resampled, param_diff_check, GradCheck, KINK_TOLERANCE,
};
pub use graph::{softmax_rows, CustomOp, Gradients, Graph, Var, NORM_EPS};
pub use matrix::{matmul, Matrix};
pub use params::{AdamConfig, ParamId, Parameter, ParameterStore};
pub use scalar::Scalar;

/// Context normalization of a plain matrix: each column standardized across rows.
pub fn context_norm<T: Scalar>(f: &Matrix<T>) -> crate::Result<Matrix<T>> {
    let store = ParameterStore::new();
    let mut g = Graph::new(&store);
    let x = g.input(f.clone())?;
    let y = g.context_norm(x)?;
    Ok(g.value(y).clone())
}
