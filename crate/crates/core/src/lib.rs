//! Merging of content and style low-rank adapters through learned masks in
//! the rank dimension, with layer-prior rank constraints.
//!
//! Modules:
//! - [`linalg`]: dense matrices, SVD, truncation and norms
//! - [`lora`]: adapter layers, masks, and merge arithmetic
//! - [`theory`]: equal-budget comparison of rank masking and output masking
//! - [`prior`]: resolution-based layer classes, the layer-prior penalty, and
//!   prior-informed merger initialization
//! - [`merge`]: mask training, adapter merging, and reports
//! - [`io`]: the adapter container, layer manifests, synthetic adapters
//! - [`parallel`]: rayon-backed batch execution with a sequential fallback

pub mod error;
pub mod io;
pub mod linalg;
pub mod lora;
pub mod merge;
pub mod parallel;
pub mod prior;
pub mod random;
pub mod theory;

pub use error::{Error, FormatError, Result};
pub use linalg::{Matrix, SvdFactors};
pub use lora::{AdapterSet, LoraLayer, MaskPair, MaskVector, Role};
pub use parallel::Execution;

/// Version tag written into every file this crate produces.
pub const FORMAT_VERSION: &str = "1";
