//! Toolkit for developing GUI-grounding models: corpus ingestion and data
//! recipes, a backend contract with deterministic mock backends, a two-stage
//! LoRA fine-tuning schedule, click-in-box benchmark evaluation and ablation
//! runs.
//!
//! Geometry is generic over the coordinate scalar; the aliases below fix the
//! types used throughout the pipeline.

pub mod ablate;
pub mod backends;
pub mod corpus;
pub mod eval;
pub mod geometry;
pub mod parallel;
pub mod recipe;
pub mod seed;
pub mod trainer;

use num_rational::Ratio;
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Annotated target box in integer pixels.
pub type PixelBox = geometry::BBox<u32>;
/// Box with coordinates normalized to `[0, 1]` by image size.
pub type UnitBox = geometry::BBox<f64>;
/// Parsed model click in pixel space, possibly fractional.
pub type ClickPoint = geometry::Point<f64>;
/// Exact hits/attempts ratio.
pub type Accuracy = Ratio<u64>;

pub use geometry::{score_click, BBox, Point};

/// Version recorded in run manifests.
pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Hex SHA-256 of a value's JSON serialization. Struct fields serialize in
/// declaration order and maps are `BTreeMap`s, so the digest is stable.
pub fn digest_json<T: Serialize + ?Sized>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("value serializes to JSON");
    hex::encode(Sha256::digest(&bytes))
}
