//! Object layouts for scene decoration.
//!
//! A layout is a `K`-channel grid, one channel per foreground class, built
//! as the sum of per-object label maps: filled boxes, or Gaussian-shaped
//! heat-maps around a centre point. This crate has no tensor dependencies
//! so the same code runs in the CLI, the HTTP service and the browser demo.

pub mod document;
pub mod encode;
pub mod error;
pub mod object;
pub mod size;
pub mod transform;
pub mod vocab;

pub use document::{parse_layout, serialize_layout, LayoutDocument, LAYOUT_DOC_VERSION};
pub use encode::{build_layout_pyramid, encode_layout, ObjectLayout};
pub use error::LayoutError;
pub use object::{BoxGeom, Geometry, LayoutMode, ObjectSpec, PointGeom};
pub use size::{default_size, ground_truth_size, SizeStats, SizeStrategy, DEFAULT_SIZE_MULTIPLIER};
pub use transform::GridTransform;
pub use vocab::{ClassVocabulary, DEFAULT_CLASSES, DEFAULT_PALETTE};
