//! Labeled synthetic conversations from an isotropic Gaussian speaker model.
//!
//! Speaker means are drawn from `N(0, between_scale² I)` and segment
//! embeddings from `N(mean, within_scale² I)`. A conversation is one
//! contiguous turn per speaker; segment `i` starts at `i · segment_shift`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::data_io::{Annotation, EmbeddingSet, SegmentRecord};
use crate::error::{Error, Result};
use crate::mbn::splitmix64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    /// Speakers in the labeled training set.
    pub n_speakers_pool: usize,
    /// Speakers per test conversation (O).
    pub speakers_per_conversation: usize,
    pub segments_per_speaker: usize,
    /// Test conversations; their speakers are fresh draws, disjoint from the pool.
    pub n_conversations: usize,
    pub dim: usize,
    pub between_scale: f64,
    pub within_scale: f64,
    pub seed: u64,
    pub segment_duration: f64,
    pub segment_shift: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_speakers_pool: 50,
            speakers_per_conversation: 5,
            segments_per_speaker: 20,
            n_conversations: 20,
            dim: 16,
            between_scale: 1.0,
            within_scale: 1.0,
            seed: 0,
            segment_duration: 1.5,
            segment_shift: 0.75,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.speakers_per_conversation == 0 || self.speakers_per_conversation > self.n_speakers_pool {
            return Err(Error::invalid(format!(
                "speakers per conversation ({}) must be in 1..=n_speakers_pool ({})",
                self.speakers_per_conversation, self.n_speakers_pool
            )));
        }
        if self.segments_per_speaker == 0 || self.dim == 0 {
            return Err(Error::invalid("segments per speaker and dimension must be positive"));
        }
        for (name, v) in [("between_scale", self.between_scale), ("within_scale", self.within_scale)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.segment_shift > 0.0 && self.segment_duration >= self.segment_shift && self.segment_duration.is_finite()) {
            return Err(Error::invalid(format!(
                "need 0 < segment_shift <= segment_duration, got shift {} duration {}",
                self.segment_shift, self.segment_duration
            )));
        }
        Ok(())
    }
}

/// A test conversation and its reference annotation.
#[derive(Debug, Clone, PartialEq)]
pub struct Conversation {
    pub embeddings: EmbeddingSet,
    pub reference: Annotation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub train: EmbeddingSet,
    pub conversations: Vec<Conversation>,
}

pub fn conversation_id(index: usize) -> String {
    format!("conv_{index:03}")
}

/// Deterministic in `spec.seed`; conversations are generated in parallel with
/// independent sub-seeds.
pub fn generate(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let names: Vec<String> = (0..spec.n_speakers_pool).map(|s| format!("train_spk{s:03}")).collect();
    let train = speakers_block(spec, "train", &names, splitmix64(spec.seed))?;
    let conversations = (0..spec.n_conversations)
        .into_par_iter()
        .map(|c| {
            let rec = conversation_id(c);
            let names: Vec<String> = (0..spec.speakers_per_conversation).map(|s| format!("{rec}_spk{s}")).collect();
            let sub = splitmix64(spec.seed ^ splitmix64(c as u64 + 1));
            let embeddings = speakers_block(spec, &rec, &names, sub)?;
            let labels: Vec<&str> = embeddings.speaker_labels().expect("generated sets are labeled");
            let reference = Annotation::from_segments(embeddings.records(), &labels)?;
            Ok(Conversation { embeddings, reference })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SynthData { train, conversations })
}

fn speakers_block(spec: &SynthSpec, rec: &str, names: &[String], seed: u64) -> Result<EmbeddingSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = names.len() * spec.segments_per_speaker;
    let mut vectors = DMatrix::zeros(n, spec.dim);
    let mut records = Vec::with_capacity(n);
    for (s, name) in names.iter().enumerate() {
        let mean = DVector::from_fn(spec.dim, |_, _| spec.between_scale * gauss(&mut rng));
        for k in 0..spec.segments_per_speaker {
            let i = s * spec.segments_per_speaker + k;
            for j in 0..spec.dim {
                vectors[(i, j)] = mean[j] + spec.within_scale * gauss(&mut rng);
            }
            records.push(SegmentRecord::new(
                rec,
                format!("{rec}_seg{i:04}"),
                i as f64 * spec.segment_shift,
                spec.segment_duration,
                Some(name.clone()),
            ));
        }
    }
    EmbeddingSet::new(records, vectors)
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}
