//! Diarization error rate, discriminant trace and PCA projections.

mod der;
mod dt;
mod mapping;
mod pca;

pub use der::{der, DerBreakdown, DerOptions};
pub use dt::{dt_score, dt_score_subspace, DtScore, SB_RIDGE};
pub use mapping::{assign_max_overlap, hungarian_max, optimal_speaker_mapping, SpeakerMapping, EXHAUSTIVE_LIMIT};
pub use pca::{pca_project, pca_to_csv, PcaProjection};
