//! Dense matrix kernels, differentiable primitives, Adam, and the
//! finite-difference gradient checker.

pub mod adam;
pub mod gradcheck;
pub mod layers;
pub mod matrix;
pub mod rng;
pub mod tape;

pub use adam::AdamState;
pub use gradcheck::{fd_compare, grad_check, reverse_grads, GradCheckReport, DEFAULT_FD_STEP};
pub use layers::{multi_head_attention, AttentionParams, BatchNormParams, LinearParams};
pub use matrix::{cosine_sim, matmul, relu, softmax_rows, Matrix};
pub use rng::RngStream;
pub use tape::{BnStats, Grads, Mode, Tape, ValueId};
