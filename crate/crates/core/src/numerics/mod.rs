//! Tensors, the reverse-mode tape, finite-difference probes and RNG streams.

pub mod fd;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use fd::{
    fd_directional, fd_gradient, fd_hessian_diag, fd_hessian_full, fd_hessian_quadform, GRAD_STEP, HESS_STEP,
};
pub use rng::{RngStream, StreamId};
pub use tape::{AttentionLayout, Gradients, NodeId, Tape};
pub use tensor::{pairwise_sum, Tensor};
