use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use rayon::prelude::*;
use mvector::clustering::{ahc, calibrate_threshold_der, cosine_matrix, plda_llr_matrix, ThresholdGrid};
use mvector::data_io::{
    embeddings_to_csv, encode_embeddings_binary, read_embeddings, read_rttm, rttm_to_string, write_atomic,
};
use mvector::mbn::{fit_transform, mvectors_to_dense};
use mvector::metrics::{der, dt_score_subspace, pca_project, pca_to_csv};
use mvector::pipeline::{self, dev_conversations, split_conversations, ConversationInput, MbnParams, PipelineSettings};
use mvector::plda::{extract_latent, train_plda};
use mvector::synth::{conversation_id, generate};
use mvector::{
    Annotation, DerOptions, EmbeddingFormat, EmbeddingSet, MbnConfig, Mode, PldaModel, PldaOptions, StopMode,
    StopRule, SynthSpec, TopFloor,
};

use crate::config::{DataSource, RunConfig};
use crate::{
    CalibrateArgs, Cli, ClusterArgs, Command, DerOpts, ExtractArgs, MbnArgs, MbnOpts, ModeArg, ProjectArgs, RunArgs,
    ScoreArgs, SimilarityArg, StopArg, SynthArgs, TrainPldaArgs, UsageError,
};

/// Files written by one command; removed again unless the command commits.
struct Outputs {
    written: Vec<PathBuf>,
    committed: bool,
}

impl Outputs {
    fn new() -> Self {
        Outputs { written: Vec::new(), committed: false }
    }

    fn write(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        }
        write_atomic(path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.written.push(path.to_path_buf());
        Ok(())
    }

    fn write_embeddings(&mut self, path: &Path, set: &EmbeddingSet) -> Result<()> {
        let bytes = match EmbeddingFormat::from_path(path) {
            EmbeddingFormat::Csv => embeddings_to_csv(set),
            EmbeddingFormat::Binary => encode_embeddings_binary(set),
        };
        self.write(path, &bytes)
    }

    fn commit(mut self) {
        self.committed = true;
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if !self.committed {
            for p in &self.written {
                let _ = std::fs::remove_file(p);
            }
        }
    }
}

fn load_set(path: &Path, stage: &str) -> Result<EmbeddingSet> {
    if !path.exists() {
        return Err(mvector::Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
        })
        .with_context(|| format!("{stage}: missing input {}", path.display()));
    }
    read_embeddings(path, EmbeddingFormat::from_path(path)).with_context(|| format!("{stage}: reading {}", path.display()))
}

fn load_rttm(path: &Path, stage: &str) -> Result<Annotation> {
    read_rttm(path).with_context(|| format!("{stage}: reading {}", path.display()))
}

fn load_plda(path: &Path, stage: &str) -> Result<PldaModel> {
    PldaModel::load(path).with_context(|| format!("{stage}: reading model {}", path.display()))
}

/// Flag, then config, then `$MBN_SEED`, then 0.
fn resolve_seed(flag: Option<u64>, config: Option<u64>) -> Result<u64> {
    if let Some(s) = flag.or(config) {
        return Ok(s);
    }
    match std::env::var("MBN_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| UsageError(format!("MBN_SEED must be an unsigned integer, got {v:?}")).into()),
        Err(_) => Ok(0),
    }
}

fn der_options(o: &DerOpts) -> DerOptions {
    DerOptions { collar: o.collar, skip_overlap: !o.no_skip_overlap }
}

fn mbn_params(o: &MbnOpts, seed: u64) -> MbnParams {
    MbnParams { ensemble_size: o.ensemble_size, k1: o.k1, delta: o.delta, floor: o.floor, seed }
}

pub fn dispatch(cli: Cli) -> Result<()> {
    let jobs = cli.jobs;
    let seed = cli.seed;
    match cli.command {
        Command::Synth(a) => cmd_synth(a, resolve_seed(seed, None)?),
        Command::TrainPlda(a) => cmd_train_plda(a),
        Command::Extract(a) => cmd_extract(a),
        Command::Mbn(a) => cmd_mbn(a, resolve_seed(seed, None)?, jobs.unwrap_or(0)),
        Command::Cluster(a) => cmd_cluster(a),
        Command::Score(a) => cmd_score(a),
        Command::Calibrate(a) => cmd_calibrate(a, resolve_seed(seed, None)?, jobs.unwrap_or(0)),
        Command::Project(a) => cmd_project(a),
        Command::Run(a) => cmd_run(a, seed, jobs),
    }
}

fn write_synth(out: &mut Outputs, dir: &Path, spec: &SynthSpec) -> Result<mvector::SynthData> {
    let data = generate(spec).context("synth")?;
    out.write_embeddings(&dir.join("train.csv"), &data.train)?;
    for (i, c) in data.conversations.iter().enumerate() {
        let id = conversation_id(i);
        out.write_embeddings(&dir.join(format!("{id}.csv")), &c.embeddings)?;
        out.write(&dir.join(format!("{id}.rttm")), rttm_to_string(&c.reference).as_bytes())?;
    }
    Ok(data)
}

fn cmd_synth(a: SynthArgs, seed: u64) -> Result<()> {
    let spec = SynthSpec {
        n_speakers_pool: a.speakers,
        speakers_per_conversation: a.per_conversation.unwrap_or(a.speakers.min(5)),
        segments_per_speaker: a.segs,
        n_conversations: a.conversations,
        dim: a.dim,
        between_scale: a.between,
        within_scale: a.within,
        seed,
        segment_duration: a.duration,
        segment_shift: a.shift,
    };
    let mut out = Outputs::new();
    let data = write_synth(&mut out, &a.out, &spec)?;
    println!(
        "wrote {} training segments and {} conversations to {}",
        data.train.len(),
        data.conversations.len(),
        a.out.display()
    );
    out.commit();
    Ok(())
}

fn cmd_train_plda(a: TrainPldaArgs) -> Result<()> {
    let train = load_set(&a.train, "train-plda")?;
    let opts = PldaOptions { max_iters: a.max_iters, tol: a.tol, length_normalize: !a.no_length_norm };
    let model = train_plda(&train, &opts).context("train-plda")?;
    let mut out = Outputs::new();
    out.write(&a.out, &model.to_bytes())?;
    let psi: Vec<String> = model.psi.iter().map(|p| format!("{p:.4}")).collect();
    println!("psi: {}", psi.join(" "));
    out.commit();
    Ok(())
}

fn cmd_extract(a: ExtractArgs) -> Result<()> {
    let model = load_plda(&a.plda, "extract")?;
    let set = load_set(&a.input, "extract")?;
    let latents = extract_latent(&model, &set).with_context(|| format!("extract: {}", a.input.display()))?;
    let mut out = Outputs::new();
    out.write_embeddings(&a.out, &latents)?;
    out.commit();
    Ok(())
}

/// Speaker count for a recording from the reference, else the flag.
fn count_for(reference: Option<&Annotation>, rec: &str, fallback: Option<usize>) -> Option<usize> {
    reference
        .map(|r| r.speakers(rec).len())
        .filter(|&n| n > 0)
        .or(fallback)
}

fn cmd_mbn(a: MbnArgs, seed: u64, jobs: usize) -> Result<()> {
    let plda = load_plda(&a.plda, "mbn")?;
    let latents = load_set(&a.latents, "mbn")?;
    let reference = a.reference.as_deref().map(|p| load_rttm(p, "mbn")).transpose()?;
    let pool = rayon_pool(jobs)?;
    let parts = pool.install(|| -> Result<Vec<EmbeddingSet>> {
        latents.recordings().into_par_iter().map(|(rec, rows)| {
            let part = latents.subset(&rows);
            let top_floor = match a.mbn.floor {
                Some(floor) => TopFloor::Imbalanced { floor },
                None => TopFloor::Balanced {
                    speakers: count_for(reference.as_ref(), &rec, a.num_speakers).ok_or_else(|| {
                        UsageError(format!("mbn: recording {rec} needs --reference, --num-speakers or --floor"))
                    })?,
                },
            };
            let config = MbnConfig {
                ensemble_size: a.mbn.ensemble_size,
                k1: a.mbn.k1,
                delta: a.mbn.delta,
                top_floor,
                seed,
            };
            let fit = fit_transform(&part, &plda, &config).with_context(|| format!("mbn: recording {rec}"))?;
            log::info!("{rec}: layers {:?}", fit.model.layer_sizes());
            let (records, _) = part.into_parts();
            Ok(EmbeddingSet::new(records, mvectors_to_dense(&fit.mvectors))?)
        })
        .collect()
    })?;
    let all = EmbeddingSet::concat(&parts).context("mbn")?;
    let mut out = Outputs::new();
    out.write_embeddings(&a.out, &all)?;
    out.commit();
    Ok(())
}

fn cmd_cluster(a: ClusterArgs) -> Result<()> {
    let set = load_set(&a.input, "cluster")?;
    let plda = match (a.similarity, &a.plda) {
        (SimilarityArg::Plda, Some(p)) => Some(load_plda(p, "cluster")?),
        (SimilarityArg::Plda, None) => bail!(UsageError("cluster: --similarity plda needs --plda".into())),
        _ => None,
    };
    let reference = a.reference.as_deref().map(|p| load_rttm(p, "cluster")).transpose()?;
    let mut entries = Vec::new();
    for (rec, rows) in set.recordings() {
        let part = set.subset(&rows);
        let sim = match &plda {
            Some(m) => plda_llr_matrix(part.vectors(), &m.scorer()),
            None => cosine_matrix(part.vectors()),
        }
        .with_context(|| format!("cluster: recording {rec}"))?;
        let stop = match (a.stop, a.tau) {
            (StopArg::Threshold, Some(tau)) => StopRule::Threshold(tau),
            (StopArg::Threshold, None) => bail!(UsageError("cluster: threshold stopping needs --tau".into())),
            (StopArg::Oracle, _) => StopRule::Oracle(count_for(reference.as_ref(), &rec, a.num_speakers).ok_or_else(
                || UsageError(format!("cluster: recording {rec} needs --reference or --num-speakers")),
            )?),
        };
        let assignment = ahc(&sim, stop).with_context(|| format!("cluster: recording {rec}"))?;
        entries.extend(assignment.to_annotation(part.records())?.entries);
    }
    let mut out = Outputs::new();
    out.write(&a.out, rttm_to_string(&Annotation { entries }).as_bytes())?;
    out.commit();
    Ok(())
}

/// Mean per-recording discriminant trace of labeled vectors.
fn labeled_dt(set: &EmbeddingSet) -> Result<Option<f64>> {
    let mut values = Vec::new();
    for (_, rows) in set.recordings() {
        let part = set.subset(&rows);
        let Some(names) = part.speaker_labels() else { return Ok(None) };
        let mut seen: Vec<&str> = Vec::new();
        let labels: Vec<usize> = names
            .iter()
            .map(|n| {
                seen.iter().position(|s| s == n).unwrap_or_else(|| {
                    seen.push(n);
                    seen.len() - 1
                })
            })
            .collect();
        if seen.len() >= 2 {
            values.push(dt_score_subspace(part.vectors(), &labels)?.value);
        }
    }
    Ok((!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64))
}

fn cmd_score(a: ScoreArgs) -> Result<()> {
    let reference = load_rttm(&a.reference, "score")?;
    let hypothesis = load_rttm(&a.hypothesis, "score")?;
    let opts = der_options(&a.der);
    let breakdown = der(&reference, &hypothesis, &opts).context("score")?;
    let mut report = format!("collar: {} skip_overlap: {}\n{breakdown}\n", opts.collar, opts.skip_overlap);
    if let Some(p) = &a.embeddings {
        let set = load_set(p, "score")?;
        match labeled_dt(&set).context("score: discriminant trace")? {
            Some(dt) => report.push_str(&format!("DT={dt:.6}\n")),
            None => log::warn!("score: {} has no usable speaker labels; DT skipped", p.display()),
        }
    }
    report.push_str(&breakdown.report_line());
    report.push('\n');
    print!("{report}");
    if let Some(path) = &a.out {
        let mut out = Outputs::new();
        out.write(path, report.as_bytes())?;
        out.commit();
    }
    Ok(())
}

fn conversations_with_reference(set: &EmbeddingSet, rttm: Option<&Path>, stage: &str) -> Result<Vec<ConversationInput>> {
    let reference = rttm.map(|p| load_rttm(p, stage)).transpose()?;
    split_conversations(set, reference.as_ref()).with_context(|| stage.to_string())
}

fn calibrate(
    plda: &PldaModel,
    dev: &[ConversationInput],
    settings: &PipelineSettings,
    grid: &ThresholdGrid,
) -> Result<f64> {
    let prepared = dev_conversations(plda, dev, settings).context("calibrate")?;
    if prepared.is_empty() {
        bail!(mvector::Error::InvalidInput("calibrate: no development recording has a reference".into()));
    }
    calibrate_threshold_der(&prepared, grid, &settings.der).context("calibrate")
}

fn cmd_calibrate(a: CalibrateArgs, seed: u64, jobs: usize) -> Result<()> {
    let plda = load_plda(&a.plda, "calibrate")?;
    let set = load_set(&a.dev, "calibrate")?;
    let dev = conversations_with_reference(&set, a.reference.as_deref(), "calibrate")?;
    let settings = PipelineSettings {
        mode: if a.mode == ModeArg::Baseline { Mode::Baseline } else { Mode::Mbn },
        stop: StopMode::Oracle,
        mbn: mbn_params(&a.mbn, seed),
        der: der_options(&a.der),
        num_speakers: None,
        jobs,
    };
    let grid = ThresholdGrid { lo: a.grid_lo, hi: a.grid_hi, step: a.grid_step };
    let tau = calibrate(&plda, &dev, &settings, &grid)?;
    println!("tau={tau}");
    if let Some(path) = &a.out {
        let mut out = Outputs::new();
        out.write(path, format!("{tau}\n").as_bytes())?;
        out.commit();
    }
    Ok(())
}

fn cmd_project(a: ProjectArgs) -> Result<()> {
    let mut set = load_set(&a.input, "project")?;
    if let Some(rec) = &a.recording {
        let rows: Vec<usize> = set
            .records()
            .iter()
            .enumerate()
            .filter(|(_, r)| &r.recording_id == rec)
            .map(|(i, _)| i)
            .collect();
        if rows.is_empty() {
            bail!(mvector::Error::InvalidInput(format!("project: no segments for recording {rec}")));
        }
        set = set.subset(&rows);
    }
    let proj = pca_project(set.vectors(), a.dims).context("project")?;
    let labels: Option<Vec<String>> = set.speaker_labels().map(|l| l.iter().map(|s| s.to_string()).collect());
    let csv = pca_to_csv(set.records(), &proj.coords, labels.as_deref())?;
    let mut out = Outputs::new();
    out.write(&a.out, csv.as_bytes())?;
    out.commit();
    Ok(())
}

fn cmd_run(a: RunArgs, seed_flag: Option<u64>, jobs_flag: Option<usize>) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    let seed = resolve_seed(seed_flag, cfg.seed)?;
    if let Some(m) = a.mode {
        cfg.mode = Some(if m == ModeArg::Baseline { "baseline" } else { "mbn" }.into());
    }
    if let Some(s) = a.stop {
        cfg.stop = Some(if s == StopArg::Oracle { "oracle" } else { "threshold" }.into());
    }
    if a.tau.is_some() {
        cfg.tau = a.tau;
    }
    if a.out.is_some() {
        cfg.output_dir = a.out.clone();
    }
    if jobs_flag.is_some() {
        cfg.jobs = jobs_flag;
    }
    let run = cfg.resolve(seed)?;
    let dir = run.output_dir.clone();
    let mut out = Outputs::new();

    let (train, conversations) = match &run.data {
        DataSource::Synth(spec) => {
            let data = write_synth(&mut out, &dir.join("data"), spec)?;
            let convs = data
                .conversations
                .into_iter()
                .map(|c| ConversationInput { embeddings: c.embeddings, reference: Some(c.reference) })
                .collect();
            (data.train, convs)
        }
        DataSource::Files { train, test, reference } => {
            let train = load_set(train, "run")?;
            let test_set = load_set(test, "run")?;
            let convs = conversations_with_reference(&test_set, reference.as_deref(), "run")?;
            (train, convs)
        }
    };

    let plda = train_plda(&train, &run.plda).context("run: train-plda")?;
    out.write(&dir.join("plda.bin"), &plda.to_bytes())?;

    let mut settings = run.settings;
    if matches!(settings.stop, StopMode::Threshold(t) if t.is_nan()) {
        let (dev_path, dev_rttm) = run.dev.as_ref().expect("checked when resolving");
        let dev_set = load_set(dev_path, "run: calibrate")?;
        let dev = conversations_with_reference(&dev_set, dev_rttm.as_deref(), "run: calibrate")?;
        let tau = calibrate(&plda, &dev, &settings, &run.grid)?;
        log::info!("calibrated threshold {tau}");
        out.write(&dir.join("tau.txt"), format!("{tau}\n").as_bytes())?;
        settings.stop = StopMode::Threshold(tau);
    }

    let report = pipeline::run(&plda, &conversations, &settings).context("run")?;
    out.write(&dir.join("hypothesis.rttm"), rttm_to_string(&report.hypothesis()).as_bytes())?;
    let stop_text = match settings.stop {
        StopMode::Oracle => "oracle".to_string(),
        StopMode::Threshold(t) => format!("threshold {t}"),
    };
    let text = format!(
        "seed: {seed}\nstop: {stop_text}\ncollar: {} skip_overlap: {}\n{}",
        settings.der.collar,
        settings.der.skip_overlap,
        report.to_text()
    );
    out.write(&dir.join("report.txt"), text.as_bytes())?;
    match report.machine_line() {
        Some(line) => {
            out.write(&dir.join("der.txt"), format!("{line}\n").as_bytes())?;
            println!("{line}");
        }
        None => log::warn!("no reference available; DER not computed"),
    }
    out.commit();
    Ok(())
}

fn rayon_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| anyhow!("cannot start worker pool: {e}"))
}
