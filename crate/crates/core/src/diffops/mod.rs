//! Minimal reverse-mode differentiation: a recording graph, the operators the
//! fitting and toy-training paths need, losses, Adam and a finite-difference
//! checker.

pub mod adam;
pub mod checkpoint;
pub mod gauss;
pub mod gradcheck;
pub mod graph;
pub mod loss;
pub mod nn;
pub mod ops;
pub mod tensor;

pub use adam::{adam_step, adam_step_scaled, cosine_lr, AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use gradcheck::{compare_with_fd, finite_diff_check, GradCheckConfig, GradReport};
pub use graph::{Backward, Gradients, Graph, ParamStore, Var};
pub use nn::{Linear, Mlp, MultiHeadAttention};
pub use tensor::Tensor;
