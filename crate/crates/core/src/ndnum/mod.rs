//! Dense f64 tensors, a reverse-mode tape, and the Adam optimizer.

mod adam;
mod graph;
mod mlp;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use graph::{ElemOp, Gradients, Graph, Var};
pub use mlp::{Activation, Mlp, MlpVars};
pub use tensor::Tensor;
