//! Serialization and data ingestion.

pub mod container;
pub mod dataset;
pub mod idx;
pub mod synthetic;

pub use container::{load_packed, save_packed, PackedModel, Record, SparseQuantRecord};
pub use dataset::{DataSpec, DatasetHandle, Normalization};
pub use idx::load_idx;
pub use synthetic::{gen_synthetic, SyntheticSpec};
