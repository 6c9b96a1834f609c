//! Minimal dense-network toolkit with hand-written backward passes.

pub mod gradcheck;
pub mod layers;
pub mod params;
pub mod real;

pub use layers::{gelu, gelu_backward, gelu_forward, gelu_grad, softmax_in_place, LayerNorm, Linear, LnCache};
pub use params::{cast_vec, Init, Layout, ParamEntry, Slot};
pub use real::{gemm, matmul, Real, View};
