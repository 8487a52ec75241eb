//! Joint statistics-aware sparsification and low-bit quantization
//! ("SQuantization") of small convolutional networks.
//!
//! The crate bundles a compact reverse-mode autodiff engine, the
//! sparsify/quantize kernels with straight-through gradients, a delayed
//! SQuantization training loop, analysis helpers (histograms, level
//! utilization, sigma sweeps, compression and FLOP accounting) and a
//! bit-packed `SQNT` model container.

pub mod analysis;
pub mod error;
pub mod graph;
pub mod io;
pub mod kernels;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod parallel;
pub mod params;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{Graph, NodeId};
pub use kernels::{
    compute_mask, compute_threshold, make_quant_params, make_quant_params_2bit, pact_backward,
    pact_forward, quantize_nonzero, squantize_backward, ClampMode, GridCode, PactParam,
    QuantParams, SparsityMask,
};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
