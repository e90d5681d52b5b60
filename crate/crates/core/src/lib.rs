//! Layer-wise linear probing of frozen speech-model embeddings.
//!
//! The pipeline runs from a speaker-annotated corpus manifest, through
//! speaker-disjoint folds and cached pooled embeddings, to one probe per
//! (layer, fold) and a speaker-level accuracy table.

pub mod audio;
pub mod embedding;
pub mod eval;
pub mod folds;
pub mod manifest;
pub mod objective;
pub mod plot;
pub mod probe;
pub mod sweep;
pub mod synth;
pub mod util;
