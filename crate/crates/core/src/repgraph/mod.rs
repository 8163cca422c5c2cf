//! Sparse attention over a few learned representative nodes per query.
//!
//! Each position regresses `S` fractional offsets, reads the key and value
//! maps at those positions with a bilinear kernel and attends only to what it
//! read. Keys and values share one set of positions.

mod attention;
mod config;
mod layer;
mod offsets;
mod sample;

pub use attention::{repgraph_attention, AttentionWeights};
pub(crate) use config::check_groups;
pub use config::{InitMode, LayerConfig, OffsetSource, Variant};
pub use layer::{bottleneck_repgraph_forward, simple_repgraph_forward, Core, RepGraphLayer};
pub(crate) use offsets::integer_distance;
pub use offsets::{regress_offsets, OffsetField};
pub use sample::{sample_representative, sample_representative_grid, RepresentativeSet};
