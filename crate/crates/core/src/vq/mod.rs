//! Hierarchical texture-aware vector quantization.
//!
//! The top level quantizes a `H/16 × W/16` feature per position; the bottom
//! level quantizes `2×2` patches of a `H/8 × W/8` residual feature. Each
//! position (or patch) searches only the codebook partition of its texture id.

mod model;
mod quantize;

pub use model::{
    latent_texture_mask, vq_loss, FullRecon, HierVq, Level, PartitionUsage, StageReport, TopRecon, UsageReport, VqConfig, VqExample,
    VqLossNodes, BOTTOM_GRID, CHECKPOINT_KIND, TOP_GRID,
};
pub use quantize::{
    lookup_patches, lookup_vectors, nearest_in_partition, partition_of, patch_map, patch_mask, quantize_nearest, quantize_patch,
    unpatch_map, BookLayout, TokenGrid, MASK,
};
