//! Dense tensors, a reverse-mode tape, layer primitives and Adam.
//!
//! Every learned model in the crate is expressed as a function that records
//! ops on a [`Graph`] against one or more [`ParamSet`]s.

mod adam;
mod gradcheck;
mod graph;
mod layers;
mod params;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::max_relative_error;
pub use graph::{log_sigmoid, sigmoid, Graph, Var};
pub use layers::{mse, Activation, CellKind, CellState, Linear, Mlp, RecurrentCell};
pub use params::{Gradients, ParamSet, PARAMS_FORMAT, PARAMS_VERSION};
pub use tensor::Tensor;
