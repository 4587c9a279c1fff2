//! Experiment orchestration behind the `tdino` command line.

pub mod config;
pub mod metrics;
pub mod report;

use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::Serialize;
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError, RngState};
use crate::distill::{pretrain, write_log_csv, DistillError};
use crate::downstream::{evaluate_model, run_protocol, DownstreamError, EvalResult, Protocol, Task};
use crate::models::{Backbone, Head, ModelError, ParamStore};
use crate::synthdata::{
    generate_dataset, load_manifest, load_videos, save_dataset, split_dataset, Manifest, SynthError, SyntheticVideo,
    NUM_ACTIONS,
};

pub use config::{Cell, ExperimentConfig};
pub use metrics::MetricsRow;

/// Environment variable overriding the output root.
pub const OUT_ENV: &str = "TDINO_OUT";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing file: {0}")]
    MissingFile(String),
    #[error("{0}")]
    Divergence(String),
    #[error("checkpoint does not match configuration: {0}")]
    SpecMismatch(String),
    #[error("metrics file has no rows")]
    EmptyMetrics,
    #[error("{failed} of {total} ablation runs failed; see {}", manifest.display())]
    PartialFailure { failed: usize, total: usize, manifest: PathBuf },
    #[error("i/o error: {0}")]
    Io(String),
    #[error("{0}")]
    Runtime(String),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::MissingFile(_) => 2,
            HarnessError::Divergence(_) => 3,
            HarnessError::SpecMismatch(_) => 4,
            HarnessError::EmptyMetrics => 5,
            HarnessError::PartialFailure { .. } | HarnessError::Io(_) | HarnessError::Runtime(_) => 1,
        }
    }
}

impl From<DistillError> for HarnessError {
    fn from(e: DistillError) -> Self {
        match e {
            DistillError::Divergence { .. } => HarnessError::Divergence(e.to_string()),
            DistillError::Config(m) => HarnessError::Config(m),
            other => HarnessError::Runtime(other.to_string()),
        }
    }
}

impl From<DownstreamError> for HarnessError {
    fn from(e: DownstreamError) -> Self {
        match e {
            DownstreamError::Divergence { .. } => HarnessError::Divergence(e.to_string()),
            DownstreamError::Checkpoint(c) => c.into(),
            other => HarnessError::Runtime(other.to_string()),
        }
    }
}

impl From<CheckpointError> for HarnessError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Missing(p) => HarnessError::MissingFile(p.display().to_string()),
            CheckpointError::Mismatch(m) => HarnessError::SpecMismatch(m),
            other => HarnessError::Runtime(other.to_string()),
        }
    }
}

impl From<SynthError> for HarnessError {
    fn from(e: SynthError) -> Self {
        HarnessError::Runtime(e.to_string())
    }
}

impl From<ModelError> for HarnessError {
    fn from(e: ModelError) -> Self {
        HarnessError::Runtime(e.to_string())
    }
}

/// Output root plus the conventional locations below it.
#[derive(Clone, Debug)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    /// `--out` wins over the environment variable, which wins over the config.
    pub fn resolve(cli_out: Option<&Path>, cfg: &ExperimentConfig) -> Self {
        let root = cli_out
            .map(Path::to_path_buf)
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| cfg.experiment.output_dir.clone());
        Self { root }
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.root.join("dataset")
    }

    fn tag(cfg: &ExperimentConfig, seed: u64) -> String {
        format!(
            "{}_t{}_p{}_{}_seed{seed}",
            cfg.backbone.family,
            cfg.clip.t,
            cfg.clip.t_pred,
            cfg.distill.loss.name().to_ascii_lowercase()
        )
    }

    pub fn checkpoint_path(&self, cfg: &ExperimentConfig, seed: u64) -> PathBuf {
        self.root.join("checkpoints").join(format!("{}.ckpt", Self::tag(cfg, seed)))
    }

    pub fn finetuned_path(&self, cfg: &ExperimentConfig, protocol: Protocol, seed: u64) -> PathBuf {
        self.root.join("finetuned").join(format!("{}_{}.ckpt", Self::tag(cfg, seed), protocol.name().to_ascii_lowercase()))
    }

    pub fn log_path(&self, cfg: &ExperimentConfig, seed: u64) -> PathBuf {
        self.root.join("logs").join(format!("{}.csv", Self::tag(cfg, seed)))
    }

    pub fn metrics_path(&self, task: Task) -> PathBuf {
        match task {
            Task::Prediction => self.root.join("metrics.csv"),
            Task::Recognition => self.root.join("metrics_recognition.csv"),
        }
    }

    pub fn failures_path(&self) -> PathBuf {
        self.root.join("failures.json")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }
}

/// Train, validation and test videos.
pub struct Splits {
    pub train: Vec<SyntheticVideo>,
    pub val: Vec<SyntheticVideo>,
    pub test: Vec<SyntheticVideo>,
}

/// Loads the dataset from the workspace, generating it when absent or stale.
pub fn prepare_dataset(cfg: &ExperimentConfig, ws: &Workspace) -> Result<Splits, HarnessError> {
    let d = &cfg.dataset;
    let ids: Vec<u32> = (0..d.n_videos as u32).collect();
    let split = split_dataset(&ids, (d.split[0], d.split[1], d.split[2]), d.master_seed)?;
    let expected = Manifest { version: 1, master_seed: d.master_seed, video_length: d.video_length, split };
    let dir = ws.dataset_dir();
    if load_manifest(&dir).ok().as_ref() != Some(&expected) {
        info!("generating {} videos into {}", d.n_videos, dir.display());
        let videos = generate_dataset(d.master_seed, d.n_videos, d.video_length)?;
        save_dataset(&dir, &videos, &expected)?;
    }
    Ok(Splits {
        train: load_videos(&dir, &expected.split.train)?,
        val: load_videos(&dir, &expected.split.val)?,
        test: load_videos(&dir, &expected.split.test)?,
    })
}

#[derive(Clone, Debug)]
pub struct PretrainArtifacts {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub final_loss: Option<f64>,
}

/// Pretrains one seed and writes its checkpoint and training log.
pub fn run_pretrain(cfg: &ExperimentConfig, ws: &Workspace, train: &[SyntheticVideo], seed: u64) -> Result<PretrainArtifacts, HarnessError> {
    let spec = cfg.backbone_spec();
    let outcome = pretrain(&spec, train, &cfg.distill_config(), &cfg.schedule()?, seed)?;
    let checkpoint = ws.checkpoint_path(cfg, seed);
    let ck = Checkpoint::from_backbone(
        &outcome.pair.student,
        outcome.pair.step as u64,
        RngState::capture(&outcome.rng),
        cfg.pretrain_hash(seed),
    );
    ck.save(&checkpoint)?;
    let log = ws.log_path(cfg, seed);
    write_log_csv(&log, &outcome.log).map_err(|e| HarnessError::Io(format!("{}: {e}", log.display())))?;
    info!("seed {seed}: checkpoint {} log {}", checkpoint.display(), log.display());
    Ok(PretrainArtifacts { checkpoint, log, final_loss: outcome.log.last().map(|r| r.loss) })
}

/// Loads a pretrained checkpoint and checks it against the configured backbone.
pub fn load_pretrained(cfg: &ExperimentConfig, path: &Path, seed: u64) -> Result<Backbone, HarnessError> {
    let ck = Checkpoint::load(path)?;
    ck.ensure_matches(&cfg.backbone_spec(), None)?;
    if ck.config_hash != cfg.pretrain_hash(seed) {
        warn!("{} was produced under a different pretraining configuration", path.display());
    }
    Ok(ck.backbone()?)
}

fn metrics_row(cfg: &ExperimentConfig, protocol: Protocol, seed: u64, r: &EvalResult) -> MetricsRow {
    MetricsRow {
        backbone: cfg.backbone.family.name().to_string(),
        interval: cfg.clip.t,
        protocol: protocol.name().to_string(),
        loss_variant: cfg.distill.loss.name().to_string(),
        seed,
        macro_precision: r.macro_precision,
        n_frames: r.n_frames,
    }
}

/// Runs the given protocols for one seed, saves each trained model and appends metrics rows.
pub fn run_finetune(
    cfg: &ExperimentConfig,
    ws: &Workspace,
    splits: &Splits,
    protocols: &[Protocol],
    checkpoint: Option<&Path>,
    seed: u64,
) -> Result<Vec<MetricsRow>, HarnessError> {
    let spec = cfg.backbone_spec();
    let dcfg = cfg.downstream_config();
    let pretrained = if protocols.iter().any(|p| p.uses_pretrained()) {
        let default_path = ws.checkpoint_path(cfg, seed);
        Some(load_pretrained(cfg, checkpoint.unwrap_or(&default_path), seed)?)
    } else {
        None
    };
    let mut rows = Vec::with_capacity(protocols.len());
    for &protocol in protocols {
        let (result, outcome) = run_protocol(&spec, pretrained.as_ref(), protocol, &splits.train, &splits.test, &dcfg, seed)?;
        info!("{} {protocol} seed {seed}: macro precision {:.4}", spec.family, result.macro_precision);
        save_finetuned(&outcome.backbone, &outcome.head, &ws.finetuned_path(cfg, protocol, seed), cfg.pretrain_hash(seed))?;
        rows.push(metrics_row(cfg, protocol, seed, &result));
    }
    metrics::append_rows(&ws.metrics_path(dcfg.task), &rows)?;
    Ok(rows)
}

const HEAD_PREFIX: &str = "head.";

fn save_finetuned(backbone: &Backbone, head: &Head, path: &Path, hash: [u8; 32]) -> Result<(), HarnessError> {
    let mut params = backbone.params.clone();
    for p in head.params.iter() {
        params.push(p.name.clone(), p.tensor.clone());
    }
    let zero_rng = RngState { seed: [0; 32], stream: 0, word_pos: 0 };
    let ck = Checkpoint { spec: backbone.spec.clone(), params, step: 0, rng: zero_rng, config_hash: hash };
    Ok(ck.save(path)?)
}

/// Splits a fine-tuned checkpoint back into backbone and head.
pub fn load_finetuned(cfg: &ExperimentConfig, path: &Path) -> Result<(Backbone, Head), HarnessError> {
    let ck = Checkpoint::load(path)?;
    ck.ensure_matches(&cfg.backbone_spec(), None)?;
    let (mut body, mut head_params) = (ParamStore::new(), ParamStore::new());
    for p in ck.params.iter() {
        let target = if p.name.starts_with(HEAD_PREFIX) { &mut head_params } else { &mut body };
        target.push(p.name.clone(), p.tensor.clone());
    }
    if head_params.is_empty() {
        return Err(HarnessError::SpecMismatch(format!("{} holds no classification head", path.display())));
    }
    let backbone_ck = Checkpoint { params: body, ..ck.clone() };
    let backbone = backbone_ck.backbone()?;
    let dcfg = cfg.downstream_config();
    let mut head = Head::new(dcfg.head_kind(), backbone.spec.embed_dim, NUM_ACTIONS, 0)?;
    head.params
        .copy_values_from(&head_params)
        .map_err(|e| HarnessError::SpecMismatch(format!("{}: {e}", path.display())))?;
    Ok((backbone, head))
}

pub fn run_evaluate(cfg: &ExperimentConfig, splits: &Splits, path: &Path) -> Result<EvalResult, HarnessError> {
    let (backbone, head) = load_finetuned(cfg, path)?;
    Ok(evaluate_model(&backbone, &head, &splits.test, &cfg.downstream_config())?)
}

#[derive(Clone, Debug, Serialize)]
pub struct Failure {
    pub backbone: String,
    pub interval: usize,
    pub loss_variant: String,
    pub seed: u64,
    pub error: String,
}

#[derive(Clone, Debug, Default)]
pub struct AblateSummary {
    pub ran: usize,
    pub skipped: usize,
    pub failures: Vec<Failure>,
}

/// Runs every grid cell and seed, skipping those whose metrics rows already exist.
pub fn run_ablate(cfg: &ExperimentConfig, ws: &Workspace) -> Result<AblateSummary, HarnessError> {
    let splits = prepare_dataset(cfg, ws)?;
    let metrics_path = ws.metrics_path(cfg.downstream.task);
    let existing = if metrics_path.exists() { metrics::read_rows(&metrics_path)? } else { Vec::new() };
    let mut summary = AblateSummary::default();
    for cell in cfg.cells() {
        let cell_cfg = cfg.for_cell(cell);
        for &seed in &cfg.experiment.seeds {
            let done = |p: &Protocol| {
                existing.iter().any(|r| {
                    r.backbone == cell.family.name()
                        && r.interval == cell.interval
                        && r.loss_variant == cell.loss.name()
                        && r.seed == seed
                        && r.protocol == p.name()
                })
            };
            let missing: Vec<Protocol> = cfg.downstream.protocols.iter().copied().filter(|p| !done(p)).collect();
            if missing.is_empty() {
                summary.skipped += 1;
                continue;
            }
            info!("cell {} interval {} {} seed {seed}", cell.family, cell.interval, cell.loss);
            match run_cell(&cell_cfg, ws, &splits, &missing, seed) {
                Ok(()) => summary.ran += 1,
                Err(e) => {
                    warn!("cell {} interval {} {} seed {seed} failed: {e}", cell.family, cell.interval, cell.loss);
                    summary.failures.push(Failure {
                        backbone: cell.family.name().into(),
                        interval: cell.interval,
                        loss_variant: cell.loss.name().into(),
                        seed,
                        error: e.to_string(),
                    });
                }
            }
        }
    }
    let failures_path = ws.failures_path();
    if summary.failures.is_empty() {
        let _ = std::fs::remove_file(&failures_path);
        Ok(summary)
    } else {
        let json = serde_json::to_vec_pretty(&summary.failures).expect("failures serialize");
        crate::io::write_atomic(&failures_path, &json).map_err(|e| HarnessError::Io(e.to_string()))?;
        Err(HarnessError::PartialFailure {
            failed: summary.failures.len(),
            total: summary.failures.len() + summary.ran,
            manifest: failures_path,
        })
    }
}

fn run_cell(cfg: &ExperimentConfig, ws: &Workspace, splits: &Splits, protocols: &[Protocol], seed: u64) -> Result<(), HarnessError> {
    if protocols.iter().any(|p| p.uses_pretrained()) {
        let path = ws.checkpoint_path(cfg, seed);
        let reusable = Checkpoint::load(&path).is_ok_and(|ck| ck.config_hash == cfg.pretrain_hash(seed));
        if !reusable {
            run_pretrain(cfg, ws, &splits.train, seed)?;
        }
    }
    run_finetune(cfg, ws, splits, protocols, None, seed)?;
    Ok(())
}

/// Writes the report for a metrics CSV, reading training logs from `logs_dir`.
pub fn run_report(metrics_path: &Path, logs_dir: &Path, out: &Path) -> Result<(), HarnessError> {
    let rows = metrics::read_rows(metrics_path)?;
    let logs = report::collect_logs(logs_dir)?;
    report::write_report(&rows, &logs, out)
}
