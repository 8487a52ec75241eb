//! Raw numeric kernels used by the graph.

pub mod linear;
pub mod loss;
pub mod norm;
