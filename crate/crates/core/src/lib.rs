//! Full-reference just-noticeable-distortion prediction.
//!
//! A compression ladder of one source image is cut into aligned patches,
//! each distorted patch is classified lossy or lossless by a backbone,
//! cross-scale attention fusion and a weighted patch head, and the JND
//! level is located on the resulting label sequence.

pub mod archive;
pub mod backbone;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod gev;
pub mod head;
pub mod ingest;
pub mod ladder;
pub mod model;
pub mod nn;
pub mod patcher;
pub mod scalar;
pub mod search;
pub mod selftest;
pub mod spatial;
pub mod tape;
pub mod trainer;
pub mod types;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use types::*;

pub type JndModel32 = model::JndModel<f32>;
pub type JndModel64 = model::JndModel<f64>;

/// Library version recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
