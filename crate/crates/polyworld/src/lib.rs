//! Polygonal building extraction.
//!
//! The pipeline detects polygon vertex candidates in an image with a small
//! convolutional backbone, aggregates their descriptors with an attentional
//! graph network, connects them by solving a differentiable optimal transport
//! problem over a pairwise score matrix, and refines vertex positions with
//! angle and segmentation losses. Polygons are read out of the resulting
//! permutation matrix: row `i` points at the next clockwise vertex of vertex
//! `i`, and diagonal entries mark vertices to discard.
//!
//! Crate layout follows the pipeline stages:
//! - [`geometry`]: polygon data model, permutation encoding/decoding, exact
//!   predicates (winding number, angles, signed area), GeoJSON I/O.
//! - [`autodiff`]: minimal reverse-mode tensor engine (f64) with an explicit
//!   tape, Adam, and a checkpoint format.
//! - [`assignment`]: Sinkhorn normalization, exact Hungarian assignment, and
//!   score-matrix plumbing.
//! - [`model`]: backbone, NMS + descriptor sampling, vertex encoder,
//!   self-attention layers, offset and scoring heads.
//! - [`losses`]: detection/matching/angle/segmentation losses and the soft
//!   polygon rasterizer.
//! - [`data`]: synthetic scene generation, training-target construction, and
//!   COCO-subset annotation I/O.
//! - [`metrics`]: IoU, C-IoU, max tangent angle error, N-ratio, simplified
//!   AP/AR.
//! - [`cli`]: the `generate | train | infer | eval` subcommands.

pub mod assignment;
pub mod autodiff;
pub mod cli;
pub mod data;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod model;

pub use error::{Error, Result};
