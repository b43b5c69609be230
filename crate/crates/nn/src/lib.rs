//! Minimal reverse-mode autograd over dense `f32` tensors.
//!
//! Everything runs on the calling thread with a fixed reduction order, so two
//! runs with the same inputs and parameters produce bit-identical results.
//! Image tensors use the NHWC layout throughout.

mod gemm;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use layers::{Conv2d, Linear};
pub use optim::{Adam, AdamConfig};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
