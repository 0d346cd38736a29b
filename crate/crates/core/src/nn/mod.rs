//! Minimal CPU tensor engine: NCHW tensors, the handful of layer kernels the
//! U-Net variants need (with hand-written backward passes), parameter storage
//! and the Adam optimizer. Generic over `f32` and `f64`.

mod adam;
pub mod layers;
mod params;
mod scalar;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use params::{Grads, Param, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;
