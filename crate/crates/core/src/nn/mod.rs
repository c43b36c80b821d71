//! Minimal differentiable-tensor substrate: f64 tensors, a reverse-mode
//! tape, convolution and fully-connected layers, and SGD with momentum.
//!
//! Everything runs single-threaded so results are bit-reproducible.

pub mod gemm;
pub mod layers;
pub mod loss;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use layers::{Conv2d, Linear};
pub use loss::{softmax, softmax_cross_entropy};
pub use optim::Sgd;
pub use params::{ParamId, ParamStore};
pub use tape::{bce, clamped_ln, sigmoid, smooth_l1, CustomOp, Gradients, Tape, Var, LOG_CLAMP};
pub use tensor::Tensor;
