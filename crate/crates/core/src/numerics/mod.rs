//! Dense tensors, reverse-mode differentiation, parameters and their
//! persistence.

mod checkpoint;
mod gradcheck;
mod graph;
mod optim;
mod params;
pub mod rng;
mod tensor;

pub use checkpoint::{Checkpoint, Entry};
pub use gradcheck::{
    analytic_gradients, compare_with_central_differences, finite_difference_check, relative_error,
    GradCheckOptions, GradCheckReport, DEFAULT_EPS,
};
pub use graph::{gelu, sigmoid, Gradients, Graph, Var, LAYER_NORM_EPS};
pub use optim::AdamW;
pub use params::{Param, ParamId, ParamStore};
pub use tensor::Tensor;
