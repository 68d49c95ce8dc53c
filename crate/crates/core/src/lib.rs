//! Zero-shot compositional image retrieval.
//!
//! A reference image is captioned, a language model rewrites the caption
//! under a modification instruction, and the rewritten text is matched
//! against pre-embedded gallery images by cosine similarity.

pub mod clients;
pub mod error;
pub mod index;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod prompt;
pub mod session;
pub mod storage;

pub use error::{Error, Result};
pub use index::GalleryIndex;
pub use model::{
    cosine, normalize, CaptionRecord, CaptionSource, CompositionalQuery, EmbeddingVector,
    ImageRecord, PipelineTrace, QueryMode, RankedResult, ScoredImage, Stage, TargetCaption,
    TargetSource, TaskKind,
};
