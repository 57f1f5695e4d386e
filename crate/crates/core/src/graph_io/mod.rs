//! Dataset ingestion, adjacency normalization, heat-kernel graphs for
//! feature-only data, and random edge/feature masking.

pub mod canonical;
mod graph;
mod heat_kernel;
mod mask;
pub mod planetoid;
pub mod synthetic;

pub use canonical::{content_hash, read_dataset, write_dataset, DatasetHeader};
pub use graph::{normalize_adjacency, symmetric_adjacency, Graph};
pub use heat_kernel::{build_heat_kernel_graph, default_bandwidth, DEFAULT_NEIGHBORS};
pub use mask::{apply_mask, sample_masks, MaskPair, MaskedGraph};
pub use planetoid::{load_planetoid, LoadReport};
