//! Minimal float tensors, the convolutional kernel set needed by small
//! diffusion models, a reverse-mode tape and Adam.

pub mod check;
pub mod element;
pub mod error;
pub mod kernels;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use element::Element;
pub use error::{Result, TensorError};
pub use optim::{clip_grad_norm, Adam, AdamConfig, Ema};
pub use params::{lecun_uniform, Bound, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
