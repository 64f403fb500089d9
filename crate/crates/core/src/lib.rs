//! Two-view correspondence classification: autodiff core, epipolar geometry,
//! synthetic scenes, the attention and graph network, and evaluation.

pub mod blocks;
pub mod cga;
pub mod csmgc;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod network;
pub mod numeric;
pub mod synthgen;

pub use error::{Error, Result};
pub use numeric::{Graph, Matrix, ParameterStore, Scalar, Var};

pub type Matrix64 = Matrix<f64>;
pub type Matrix32 = Matrix<f32>;
pub type Trainer64 = network::Trainer<f64>;
pub type Trainer32 = network::Trainer<f32>;
