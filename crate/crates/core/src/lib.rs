//! Road and building extraction from overhead imagery, end to end.
//!
//! Three legs make up the pipeline:
//!
//! 1. **Mask generation**: parse vector map data ([`vector`]), project it
//!    through an affine geotransform ([`geo`]), and rasterize roads and
//!    footprints into binary pseudo ground-truth masks ([`raster`]).
//! 2. **Training**: a small encoder/decoder segmentation network with a
//!    pyramid pooling center, implemented from scratch with hand-derived
//!    gradients ([`nn`]), trained with composable losses ([`losses`]) and a
//!    deterministic loop ([`train`]).
//! 3. **Scoring**: pixel overlap, graph-topology, and instance metrics
//!    ([`metrics`]) over skeletonized prediction graphs ([`graph`]).
//!
//! Everything is single-threaded and seeded: the same inputs produce the
//! same bytes, from rasterized masks through checkpoints to metric reports.
//! Synthetic map/image generation for self-contained experiments lives in
//! [`synth`]; dataset manifests in [`manifest`].

pub mod geo;
pub mod graph;
pub mod losses;
pub mod manifest;
pub mod metrics;
pub mod nn;
pub mod raster;
pub mod synth;
pub mod train;
pub mod vector;

pub use geo::GeoTransform;
pub use raster::{MaskPair, Raster};
pub use vector::VectorLayer;
