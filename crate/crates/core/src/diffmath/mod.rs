//! Dense reverse-mode differentiation, stochastic primitives and Adam.

mod nn;
mod optim;
mod tape;
mod tensor;

pub use nn::{glorot, Linear};
pub use optim::Adam;
pub use tape::{
    gaussian_kl_value, log_sum_exp, Gradients, ParamId, ParamStore, Tape, Var, BCE_CLIP,
};
pub use tensor::{dot, sigmoid, Tensor};
