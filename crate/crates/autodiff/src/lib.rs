//! Dense channels-first tensors with a reverse-mode tape, sized for small
//! 2D/3D U-Nets: 3-wide padded convolutions, 2-window max pooling,
//! nearest-neighbour upsampling, ReLU/tanh, channel concatenation and Adam.
//!
//! All arithmetic is `f64`.

mod error;
pub mod kernels;
mod optim;
mod params;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use kernels::ConvSpec;
pub use optim::Adam;
pub use params::{ParamSet, MAGIC};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
