//! Minimal dense autodiff engine and transformer layers backing the
//! miniature encoder-decoder.

mod graph;
pub mod layers;
mod matrix;
mod params;

pub use graph::{gelu, sigmoid, Gradients, Graph, Mask, Var};
pub(crate) use graph::{log_sum_exp, softmax_rows};
pub use matrix::Matrix;
pub use params::{Adam, AdamConfig, GradBuffer, ParamId, ParamStore};
