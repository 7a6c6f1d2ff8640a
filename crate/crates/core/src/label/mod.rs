//! Label-augmented pseudo-labelling.
//!
//! A target class is expanded through a lexical hierarchy into related
//! labels; each proposed region is scored against the whole set and keeps
//! the best logit; regions above threshold go through class-agnostic NMS
//! and are relabelled to the target.

mod hierarchy;
mod lanms;
mod oracle;
mod scoring;

use alloc::string::String;

pub use hierarchy::{expand_labels, AugmentedLabelSet, HierarchySpec, LabelHierarchy, NodeSpec};
pub use lanms::{la_nms, LaNmsParams, PseudoLabelSet};
pub use oracle::{AffinityTable, OracleConfig, OracleScene, SceneObject, SimulatedOracleBackend, BACKGROUND_CLASS};
pub use scoring::{
    augmented_logit, cosine_logit, predict_augmented, Embedding, EmbeddingTableBackend, Region, ScoringBackend,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LabelError {
    #[error("label not in hierarchy: {0}")]
    UnknownLabel(String),
    #[error("invalid hierarchy: {0}")]
    InvalidHierarchy(String),
    #[error("embedding must be non-empty and finite")]
    InvalidEmbedding,
    #[error("embedding dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("zero-norm embedding")]
    ZeroNorm,
    #[error("empty label set")]
    EmptyLabelSet,
    #[error("threshold {0} outside (0, 1]")]
    InvalidThreshold(f64),
    #[error("invalid oracle configuration: {0}")]
    InvalidOracle(&'static str),
    #[error(transparent)]
    Geom(#[from] crate::geom::GeomError),
}
