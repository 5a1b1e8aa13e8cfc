//! Speaker diarization backend built around multilayer bootstrap networks.
//!
//! Segment embeddings are mapped to PLDA latent variables ([`plda`]),
//! denoised by a per-conversation ensemble network into sparse m-vectors
//! ([`mbn`]), grouped by average-linkage AHC ([`clustering`]) and scored with
//! DER and the discriminant trace ([`metrics`]). [`synth`] generates labeled
//! conversations so every stage can be checked against ground truth, and
//! [`pipeline`] chains the stages.

pub mod clustering;
pub mod data_io;
pub mod error;
pub mod mbn;
pub mod metrics;
pub mod pipeline;
pub mod plda;
pub mod synth;

pub use data_io::{Annotation, AnnotationEntry, EmbeddingFormat, EmbeddingSet, SegmentRecord};
pub use error::{Error, Result};
pub use plda::{LatentSet, LlrScorer, PldaModel, PldaOptions};
pub use mbn::{MbnConfig, MbnFit, MbnModel, MVector, SparseCode, TopFloor};
pub use clustering::{ahc, ClusterAssignment, SimilarityKind, SimilarityMatrix, StopRule, ThresholdGrid};
pub use metrics::{der, dt_score, DerBreakdown, DerOptions, DtScore};
pub use synth::{generate, Conversation, SynthData, SynthSpec};
pub use pipeline::{run, ConversationInput, Mode, PipelineSettings, RunReport, StopMode};
