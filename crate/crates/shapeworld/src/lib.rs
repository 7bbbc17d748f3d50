//! A small procedural image world standing in for a natural-image corpus.
//!
//! Categories are the leaves of a three-level [`Taxonomy`] (shape family →
//! fill → colour). Each leaf fixes the parameter intervals used by
//! [`render_sample`]; per-image jitter inside those intervals gives every
//! category many distinct instances. Held-out leaves form an
//! out-of-distribution split, and [`gen_blob`] produces pure Gaussian noise
//! images for sanity checks.

mod augment;
mod error;
mod render;
mod splits;
mod taxonomy;

pub use augment::{augment, gaussian_blur, AugmentConfig};
pub use error::{Error, Result};
pub use render::{gen_blob, render_sample, ImageSample, RenderConfig, Split};
pub use splits::{generate_blobs, make_splits, TaxonomyJson, Dataset, DatasetManifest, SplitCounts, Splits};
pub use taxonomy::{build_taxonomy, BackgroundFamily, Category, ColorFamily, Fill, NodeId, ShapeKind, Taxonomy, TaxonomyConfig, TaxonomyNode};
