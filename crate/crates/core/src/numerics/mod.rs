//! Dense tensors, reverse-mode gradients and their finite-difference oracle.

mod gradcheck;
mod graph;
pub mod io;
mod params;
pub mod random;
mod tensor;

pub use gradcheck::{finite_diff_check, relative_error, GradCheckReport};
pub use graph::{eval, grad, inject_fault, scalar_fn, value_and_grad, Bindings, Gradients, Graph, Primitive, Var};
pub use params::{ParamEntry, ParamSet};
pub use tensor::{cosine, gelu, matmul, matmul_nt, matmul_tn, sigmoid, softmax_rows, softplus, transpose, Tensor};
