//! `run` configuration: a flat TOML table. Unknown keys are rejected.
//!
//! ```toml
//! train = "data/train.csv"        # labeled training embeddings
//! test = "data/test.csv"          # test embeddings, grouped by recording_id
//! reference = "data/test.rttm"    # optional; labeled test segments also work
//! output_dir = "out"
//! mode = "mbn"                    # baseline | mbn
//! stop = "oracle"                 # oracle | threshold
//! tau = 0.1                       # threshold; calibrated on `dev` when absent
//! seed = 7
//! ```
//!
//! Instead of `train`/`test`, the `synth_*` keys generate a dataset into
//! `output_dir/data` first.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mvector::clustering::ThresholdGrid;
use mvector::pipeline::{MbnParams, Mode, PipelineSettings, StopMode};
use mvector::{DerOptions, PldaOptions, SynthSpec};
use serde::Deserialize;

use crate::UsageError;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub reference: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub mode: Option<String>,
    pub stop: Option<String>,
    pub tau: Option<f64>,
    pub dev: Option<PathBuf>,
    pub dev_reference: Option<PathBuf>,
    pub grid_lo: Option<f64>,
    pub grid_hi: Option<f64>,
    pub grid_step: Option<f64>,
    pub num_speakers: Option<usize>,

    pub plda_max_iters: Option<usize>,
    pub plda_tol: Option<f64>,
    pub length_normalize: Option<bool>,

    pub mbn_v: Option<usize>,
    pub mbn_k1: Option<usize>,
    pub mbn_delta: Option<f64>,
    pub mbn_floor: Option<usize>,

    pub collar: Option<f64>,
    pub skip_overlap: Option<bool>,

    pub seed: Option<u64>,
    pub jobs: Option<usize>,

    pub synth_pool: Option<usize>,
    pub synth_speakers: Option<usize>,
    pub synth_segments: Option<usize>,
    pub synth_conversations: Option<usize>,
    pub synth_dim: Option<usize>,
    pub synth_between: Option<f64>,
    pub synth_within: Option<f64>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        toml::from_str(&text).map_err(|e| UsageError(format!("config {}: {e}", path.display())).into())
    }

    fn uses_synth(&self) -> bool {
        self.synth_pool.is_some()
            || self.synth_speakers.is_some()
            || self.synth_segments.is_some()
            || self.synth_conversations.is_some()
            || self.synth_dim.is_some()
            || self.synth_between.is_some()
            || self.synth_within.is_some()
    }
}

/// Where the run's data comes from.
#[derive(Debug, Clone)]
pub enum DataSource {
    Files {
        train: PathBuf,
        test: PathBuf,
        reference: Option<PathBuf>,
    },
    Synth(SynthSpec),
}

#[derive(Debug, Clone)]
pub struct ResolvedRun {
    pub data: DataSource,
    pub output_dir: PathBuf,
    pub plda: PldaOptions,
    pub settings: PipelineSettings,
    /// Calibration set for threshold stopping without `tau`.
    pub dev: Option<(PathBuf, Option<PathBuf>)>,
    pub grid: ThresholdGrid,
}

pub fn parse_mode(s: &str) -> Result<Mode> {
    match s {
        "baseline" => Ok(Mode::Baseline),
        "mbn" => Ok(Mode::Mbn),
        other => Err(UsageError(format!("mode must be baseline or mbn, got {other:?}")).into()),
    }
}

impl RunConfig {
    pub fn resolve(self, seed: u64) -> Result<ResolvedRun> {
        let data = match (&self.train, &self.test, self.uses_synth()) {
            (Some(train), Some(test), false) => DataSource::Files {
                train: train.clone(),
                test: test.clone(),
                reference: self.reference.clone(),
            },
            (None, None, true) => {
                let d = SynthSpec::default();
                DataSource::Synth(SynthSpec {
                    n_speakers_pool: self.synth_pool.unwrap_or(d.n_speakers_pool),
                    speakers_per_conversation: self.synth_speakers.unwrap_or(d.speakers_per_conversation),
                    segments_per_speaker: self.synth_segments.unwrap_or(d.segments_per_speaker),
                    n_conversations: self.synth_conversations.unwrap_or(d.n_conversations),
                    dim: self.synth_dim.unwrap_or(d.dim),
                    between_scale: self.synth_between.unwrap_or(d.between_scale),
                    within_scale: self.synth_within.unwrap_or(d.within_scale),
                    seed,
                    ..d
                })
            }
            (_, _, true) => bail!(UsageError("give either train/test files or synth_* keys, not both".into())),
            _ => bail!(UsageError("config needs both `train` and `test`, or synth_* keys".into())),
        };
        let mode = parse_mode(self.mode.as_deref().unwrap_or("mbn"))?;
        let stop = match (self.stop.as_deref().unwrap_or("oracle"), self.tau) {
            ("oracle", _) => StopMode::Oracle,
            ("threshold", Some(tau)) => StopMode::Threshold(tau),
            ("threshold", None) => {
                if self.dev.is_none() {
                    bail!(UsageError("threshold stopping needs `tau` or a `dev` set to calibrate on".into()));
                }
                // Replaced by the calibrated value before processing.
                StopMode::Threshold(f64::NAN)
            }
            (other, _) => bail!(UsageError(format!("stop must be oracle or threshold, got {other:?}"))),
        };
        let grid_default = ThresholdGrid::default();
        let mbn_default = MbnParams::default();
        let plda_default = PldaOptions::default();
        let der_default = DerOptions::default();
        Ok(ResolvedRun {
            data,
            output_dir: self.output_dir.unwrap_or_else(|| PathBuf::from("out")),
            plda: PldaOptions {
                max_iters: self.plda_max_iters.unwrap_or(plda_default.max_iters),
                tol: self.plda_tol.unwrap_or(plda_default.tol),
                length_normalize: self.length_normalize.unwrap_or(plda_default.length_normalize),
            },
            settings: PipelineSettings {
                mode,
                stop,
                mbn: MbnParams {
                    ensemble_size: self.mbn_v.unwrap_or(mbn_default.ensemble_size),
                    k1: self.mbn_k1.unwrap_or(mbn_default.k1),
                    delta: self.mbn_delta.unwrap_or(mbn_default.delta),
                    floor: self.mbn_floor,
                    seed,
                },
                der: DerOptions {
                    collar: self.collar.unwrap_or(der_default.collar),
                    skip_overlap: self.skip_overlap.unwrap_or(der_default.skip_overlap),
                },
                num_speakers: self.num_speakers,
                jobs: self.jobs.unwrap_or(0),
            },
            dev: self.dev.map(|d| (d, self.dev_reference)),
            grid: ThresholdGrid {
                lo: self.grid_lo.unwrap_or(grid_default.lo),
                hi: self.grid_hi.unwrap_or(grid_default.hi),
                step: self.grid_step.unwrap_or(grid_default.step),
            },
        })
    }
}
