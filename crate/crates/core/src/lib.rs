//! Log-linear sparse attention (LLSA) on the CPU.
//!
//! The pipeline for one attention head:
//!
//! 1. [`pyramid`] mean-pools Q, K, V into `L + 1` levels.
//! 2. [`selection`] runs a full Top-K on the coarsest level and refines it
//!    level by level, touching only `K * B` candidates per query block.
//! 3. [`attention`] expands the selection into a per-block KV plan (fine blocks
//!    plus reweighted coarse blocks) and runs a streaming-softmax forward.
//! 4. [`indexmap`] transposes the query-major Top-K table into key-major
//!    offsets so that [`grad`] can run the key/value backward without a dense
//!    block mask.
//!
//! [`oracle`] holds slow, independent references for all of the above and
//! [`baseline`] the mask-based key/value backward used for comparison.
//! [`pipeline::Llsa`] wires the stages together.

// `Real` is f32 or f64 depending on features; widening casts stay explicit.
#![allow(clippy::unnecessary_cast, clippy::needless_range_loop)]

pub mod attention;
pub mod baseline;
pub mod bench;
pub mod config;
pub mod error;
pub mod grad;
pub mod indexmap;
pub mod matrix;
pub mod oracle;
pub mod par;
pub mod pipeline;
pub mod pyramid;
pub mod reorder;
pub mod selection;
pub mod tensorio;

pub use attention::{build_plan, llsa_forward, EnrichedKvPlan, ForwardState, PlanEntry};
pub use config::{effective_block_count, LlsaConfig, ReweightMode, ValidatedConfig};
pub use error::{ConfigError, Error, Result};
pub use grad::{llsa_backward, llsa_kv_backward, GradientSet};
pub use indexmap::{transpose_all, transpose_indices, TransposedIndices};
pub use matrix::FeatureMatrix;
pub use pipeline::Llsa;
pub use pyramid::{build_pyramid, pool_backward, Pyramid};
pub use selection::{hierarchical_topk, LevelIndices, SelectionResult};

/// Element type used by every kernel in the crate.
#[cfg(not(feature = "single-precision"))]
pub type Real = f64;
/// Element type used by every kernel in the crate.
#[cfg(feature = "single-precision")]
pub type Real = f32;

/// `true` when [`Real`] is `f64`.
pub const DOUBLE_PRECISION: bool = cfg!(not(feature = "single-precision"));

/// Oracle-equivalence tolerance for the active precision (max abs difference).
pub const fn oracle_tolerance() -> f64 {
    if DOUBLE_PRECISION {
        1e-10
    } else {
        1e-4
    }
}
