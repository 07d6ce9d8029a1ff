//! Dense-matrix numerics with hand-derived reverse-mode gradients.
//!
//! Every layer used by the pipeline has an explicit forward function that
//! returns a cache and a matching backward function. [`check`] holds the
//! central finite-difference oracle those backward passes are tested against.

pub mod check;
pub mod gru;
pub mod layers;
pub mod matrix;
pub mod optim;
pub mod params;

pub use check::{finite_diff_grad, max_rel_error};
pub use gru::{gru_backward, gru_cell, gru_forward, GruCache, GruParams};
pub use layers::{
    activation, activation_backward, glorot, linear_backward, linear_forward, log_sum_exp, softmax,
    softmax_backward, Activation, LayerGrad, Mlp, MlpCache,
};
pub use matrix::Matrix;
pub use optim::Adam;
pub use params::Parameters;
