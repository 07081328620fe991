//! Desk-scale quantized-inference toolkit: block-wise weight codecs
//! (Q8/Q6K/Q4K/Q2K), ternary weights with multiply-free kernels, a
//! decoder-only transformer with KV caching, a bit-exact model
//! container, and a throughput/energy metrics engine.

pub mod decoder;
pub mod error;
pub mod io;
pub mod kernels;
pub mod matrix;
pub mod metrics;
pub mod quant;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use quant::{QuantFormat, QuantSpec, QuantizedTensor};
