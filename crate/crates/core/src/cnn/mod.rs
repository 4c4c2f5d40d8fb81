//! A minimal dense network for patch-level illuminant regression.
//!
//! Architecture: `S×S×3` patch → `k×k×3` convolution with `K` kernels
//! (stride 1, zero same-padding; `k = 1` by default) → non-overlapping max
//! pooling to `G×G×K` → flatten in (row, column, channel) order → fully
//! connected layer with `H` ReLU units → linear layer with 3 outputs.
//!
//! All arithmetic is `f64`. Activations and parameters live in [`Tensor`]s,
//! row-major with the last dimension fastest.

mod gradcheck;
mod hyper;
mod io;
pub mod layers;
mod loss;
mod network;
mod optim;
mod tensor;

pub use gradcheck::{gradient_check, gradient_check_with, GradCheckReport};
pub use hyper::HyperParams;
pub use io::{decode_weights, encode_weights, load_weights, save_weights, WEIGHTS_MAGIC, WEIGHTS_VERSION};
pub use loss::{angular_loss, euclidean_loss, LossKind, ANGULAR_CLAMP};
pub use network::{
    backward, batch_gradient, forward, forward_cached, init_params, patch_tensor, ForwardCache,
    NetworkParams, LAYER_NAMES,
};
pub use optim::{sgd_step, MomentumState};
pub use tensor::Tensor;
