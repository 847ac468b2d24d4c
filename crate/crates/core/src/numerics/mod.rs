//! Tensor arithmetic, reverse-mode differentiation and a finite-difference oracle.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{finite_difference_check, relative_error, DEFAULT_STEP};
pub use graph::{AttentionGroups, Graph, Var, KL_FLOOR};
pub use tensor::{argmax, cosine, dot, norm, softmax, Tensor};
