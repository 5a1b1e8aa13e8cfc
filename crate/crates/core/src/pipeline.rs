//! End-to-end processing of test conversations: latents, optional MBN,
//! AHC, then DER and discriminant-trace scoring against references.
//!
//! Every conversation is processed independently. Results are collected in
//! input order, so the report does not depend on the thread count.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::clustering::{
    ahc, mvector_cosine_matrix, plda_llr_matrix, ClusterAssignment, DevConversation, SimilarityMatrix, StopRule,
};
use crate::data_io::{Annotation, EmbeddingSet};
use crate::error::{Error, Result};
use crate::mbn::{fit_transform, mvectors_to_dense, MbnConfig, TopFloor};
use crate::metrics::{der, dt_score_subspace, DerBreakdown, DerOptions};
use crate::plda::{extract_latent, PldaModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// PLDA log-likelihood ratios on latents.
    Baseline,
    /// Cosine similarity of m-vectors.
    Mbn,
}

impl Mode {
    pub fn name(&self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Mbn => "mbn",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StopMode {
    /// Stop at the per-conversation speaker count.
    Oracle,
    Threshold(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MbnParams {
    pub ensemble_size: usize,
    pub k1: usize,
    pub delta: f64,
    /// Explicit top-layer floor; otherwise `ceil(1.5 · O)` from the
    /// conversation's speaker count.
    pub floor: Option<usize>,
    pub seed: u64,
}

impl Default for MbnParams {
    fn default() -> Self {
        MbnParams {
            ensemble_size: 200,
            k1: 50,
            delta: 0.3,
            floor: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineSettings {
    pub mode: Mode,
    pub stop: StopMode,
    pub mbn: MbnParams,
    pub der: DerOptions,
    /// Speaker count used when a conversation has no reference.
    pub num_speakers: Option<usize>,
    /// Worker threads; 0 uses all cores.
    pub jobs: usize,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        PipelineSettings {
            mode: Mode::Mbn,
            stop: StopMode::Oracle,
            mbn: MbnParams::default(),
            der: DerOptions::default(),
            num_speakers: None,
            jobs: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConversationInput {
    pub embeddings: EmbeddingSet,
    pub reference: Option<Annotation>,
}

impl ConversationInput {
    pub fn recording_id(&self) -> &str {
        self.embeddings
            .records()
            .first()
            .map_or("", |r| r.recording_id.as_str())
    }
}

/// Splits a multi-recording set into conversations, attaching each one's part
/// of `reference`. Without a reference, labeled segments yield one.
pub fn split_conversations(set: &EmbeddingSet, reference: Option<&Annotation>) -> Result<Vec<ConversationInput>> {
    set.recordings()
        .into_iter()
        .map(|(rec, rows)| {
            let embeddings = set.subset(&rows);
            let reference = match reference {
                Some(r) => {
                    let part = r.for_recording(&rec);
                    if part.is_empty() {
                        log::warn!("no reference turns for recording {rec}");
                        None
                    } else {
                        Some(part)
                    }
                }
                None => match embeddings.speaker_labels() {
                    Some(labels) => Some(Annotation::from_segments(embeddings.records(), &labels)?),
                    None => None,
                },
            };
            Ok(ConversationInput { embeddings, reference })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct ConversationResult {
    pub recording_id: String,
    pub assignment: ClusterAssignment,
    pub hypothesis: Annotation,
    pub der: Option<DerBreakdown>,
    /// Discriminant trace of the latents and of the clustered representation
    /// (latents again in baseline mode), when segments are labeled.
    pub dt_latent: Option<f64>,
    pub dt_output: Option<f64>,
    /// MBN layer widths actually used.
    pub layer_sizes: Option<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub mode: Mode,
    pub conversations: Vec<ConversationResult>,
    /// DER over all conversations, errors summed and divided by total scored time.
    pub pooled: Option<DerBreakdown>,
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = values.collect();
    v.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

impl RunReport {
    /// Unweighted mean of per-conversation DER fractions.
    pub fn mean_der(&self) -> Option<f64> {
        mean(self.conversations.iter().map(|c| c.der.map(|d| d.der)))
    }

    pub fn mean_dt_latent(&self) -> Option<f64> {
        mean(self.conversations.iter().map(|c| c.dt_latent))
    }

    pub fn mean_dt_output(&self) -> Option<f64> {
        mean(self.conversations.iter().map(|c| c.dt_output))
    }

    /// Pooled machine-readable DER line.
    pub fn machine_line(&self) -> Option<String> {
        self.pooled.map(|p| p.report_line())
    }

    /// All hypothesis turns.
    pub fn hypothesis(&self) -> Annotation {
        Annotation {
            entries: self
                .conversations
                .iter()
                .flat_map(|c| c.hypothesis.entries.iter().cloned())
                .collect(),
        }
    }

    /// Per-conversation lines, a summary and the pooled breakdown.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "mode: {}", self.mode.name());
        for c in &self.conversations {
            let _ = write!(s, "{} clusters={}", c.recording_id, c.assignment.n_clusters());
            if let Some(d) = c.der {
                let _ = write!(s, " der={:.4}", 100.0 * d.der);
            }
            if let Some(dt) = c.dt_latent {
                let _ = write!(s, " dt_latent={dt:.6}");
            }
            if let Some(dt) = c.dt_output {
                let _ = write!(s, " dt_output={dt:.6}");
            }
            s.push('\n');
        }
        if let Some(m) = self.mean_der() {
            let _ = writeln!(s, "mean conversation DER: {:.4}%", 100.0 * m);
        }
        if let (Some(a), Some(b)) = (self.mean_dt_latent(), self.mean_dt_output()) {
            let _ = writeln!(s, "mean DT: latents {a:.6}, clustered representation {b:.6}");
        }
        if let Some(p) = self.pooled {
            let _ = writeln!(s, "{p}");
            let _ = writeln!(s, "{}", p.report_line());
        }
        s
    }
}

/// Speaker count of a conversation: reference first, then the fallback.
fn speaker_count(conv: &ConversationInput, fallback: Option<usize>) -> Option<usize> {
    conv.reference
        .as_ref()
        .map(|r| r.speakers(conv.recording_id()).len())
        .filter(|&n| n > 0)
        .or(fallback)
}

/// Similarity matrix of one conversation in the configured mode, the latents,
/// and the dense m-vectors with layer sizes in MBN mode.
struct Encoded {
    sim: SimilarityMatrix,
    latents: DMatrix<f64>,
    mvectors: Option<(DMatrix<f64>, Vec<usize>)>,
}

fn encode(plda: &PldaModel, conv: &ConversationInput, settings: &PipelineSettings) -> Result<Encoded> {
    let latents = extract_latent(plda, &conv.embeddings)?;
    match settings.mode {
        Mode::Baseline => {
            let sim = plda_llr_matrix(latents.vectors(), &plda.scorer())?;
            Ok(Encoded { sim, latents: latents.into_parts().1, mvectors: None })
        }
        Mode::Mbn => {
            let p = &settings.mbn;
            let top_floor = match p.floor {
                Some(floor) => TopFloor::Imbalanced { floor },
                None => TopFloor::Balanced {
                    speakers: speaker_count(conv, settings.num_speakers).ok_or_else(|| {
                        Error::invalid(format!(
                            "recording {}: MBN top-layer floor needs a speaker count or an explicit floor",
                            conv.recording_id()
                        ))
                    })?,
                },
            };
            let config = MbnConfig {
                ensemble_size: p.ensemble_size,
                k1: p.k1,
                delta: p.delta,
                top_floor,
                seed: p.seed,
            };
            let fit = fit_transform(&latents, plda, &config)?;
            let sim = mvector_cosine_matrix(&fit.mvectors)?;
            let dense = mvectors_to_dense(&fit.mvectors);
            Ok(Encoded {
                sim,
                latents: latents.into_parts().1,
                mvectors: Some((dense, fit.model.layer_sizes())),
            })
        }
    }
}

/// Discriminant trace on the between-class subspace; `None` when undefined.
fn subspace_dt(x: &DMatrix<f64>, labels: &[usize]) -> Result<Option<f64>> {
    if labels.iter().all(|&l| l == labels[0]) {
        return Ok(None);
    }
    match dt_score_subspace(x, labels) {
        Ok(dt) => Ok(Some(dt.value)),
        Err(e @ Error::NotPositiveDefinite { .. }) => {
            log::warn!("discriminant trace undefined: {e}");
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

fn class_labels(set: &EmbeddingSet) -> Option<Vec<usize>> {
    let names = set.speaker_labels()?;
    let mut seen: Vec<&str> = Vec::new();
    Some(
        names
            .iter()
            .map(|n| match seen.iter().position(|s| s == n) {
                Some(p) => p,
                None => {
                    seen.push(n);
                    seen.len() - 1
                }
            })
            .collect(),
    )
}

pub fn process_conversation(
    plda: &PldaModel,
    conv: &ConversationInput,
    settings: &PipelineSettings,
) -> Result<ConversationResult> {
    let rec = conv.recording_id().to_string();
    let enc = encode(plda, conv, settings)?;
    let stop = match settings.stop {
        StopMode::Threshold(tau) => StopRule::Threshold(tau),
        StopMode::Oracle => StopRule::Oracle(speaker_count(conv, settings.num_speakers).ok_or_else(|| {
            Error::invalid(format!(
                "recording {rec}: oracle stopping needs a reference or an explicit speaker count"
            ))
        })?),
    };
    let assignment = ahc(&enc.sim, stop)?;
    let hypothesis = assignment.to_annotation(conv.embeddings.records())?;
    let der = conv
        .reference
        .as_ref()
        .map(|r| der(r, &hypothesis, &settings.der))
        .transpose()?;
    let (dt_latent, dt_output) = match class_labels(&conv.embeddings) {
        Some(labels) => {
            let lat = subspace_dt(&enc.latents, &labels)?;
            let out = match &enc.mvectors {
                Some((m, _)) => subspace_dt(m, &labels)?,
                None => lat,
            };
            (lat, out)
        }
        None => (None, None),
    };
    Ok(ConversationResult {
        recording_id: rec,
        assignment,
        hypothesis,
        der,
        dt_latent,
        dt_output,
        layer_sizes: enc.mvectors.map(|(_, sizes)| sizes),
    })
}

fn with_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::invalid(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(f))
}

/// Processes all conversations on a pool of `settings.jobs` threads.
pub fn run(plda: &PldaModel, conversations: &[ConversationInput], settings: &PipelineSettings) -> Result<RunReport> {
    if conversations.is_empty() {
        return Err(Error::invalid("no test conversations"));
    }
    let results = with_pool(settings.jobs, || {
        conversations
            .par_iter()
            .map(|c| {
                process_conversation(plda, c, settings).map_err(|e| match e {
                    Error::InvalidInput(m) if !m.starts_with("recording") => {
                        Error::InvalidInput(format!("recording {}: {m}", c.recording_id()))
                    }
                    other => other,
                })
            })
            .collect::<Result<Vec<_>>>()
    })??;
    let scored: Vec<DerBreakdown> = results.iter().filter_map(|c| c.der).collect();
    let pooled = (!scored.is_empty()).then(|| pool_breakdowns(&scored));
    Ok(RunReport {
        mode: settings.mode,
        conversations: results,
        pooled,
    })
}

/// Sums error times over conversations.
pub fn pool_breakdowns(parts: &[DerBreakdown]) -> DerBreakdown {
    let (mut miss, mut fa, mut conf, mut scored) = (0.0, 0.0, 0.0, 0.0);
    for p in parts {
        miss += p.missed_speech * p.scored_time;
        fa += p.false_alarm * p.scored_time;
        conf += p.speaker_error * p.scored_time;
        scored += p.scored_time;
    }
    DerBreakdown::from_times(miss, fa, conf, scored)
}

/// Similarity matrices of referenced conversations, for threshold calibration.
pub fn dev_conversations(
    plda: &PldaModel,
    conversations: &[ConversationInput],
    settings: &PipelineSettings,
) -> Result<Vec<DevConversation>> {
    with_pool(settings.jobs, || {
        conversations
            .par_iter()
            .filter(|c| c.reference.is_some())
            .map(|c| {
                Ok(DevConversation {
                    sim: encode(plda, c, settings)?.sim,
                    reference: c.reference.clone().expect("filtered"),
                    records: c.embeddings.records().to_vec(),
                })
            })
            .collect::<Result<Vec<_>>>()
    })?
}
