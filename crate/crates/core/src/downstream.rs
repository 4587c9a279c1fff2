//! Supervised fine-tuning and evaluation on top of a backbone.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::models::{argmax_rows, build_backbone, Backbone, BackboneSpec, Head, HeadKind, ModelError};
use crate::numerics::{sgd_step, NumericsError, SgdState, Tape, Tensor};
use crate::synthdata::{clip_at, sample_clip, ClipSample, SynthError, SyntheticVideo, NUM_ACTIONS};

#[derive(Debug, Error)]
pub enum DownstreamError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("fine-tuning diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },
    #[error("evaluation error: {0}")]
    Eval(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Data(#[from] SynthError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Protocol {
    FullSupervised,
    LinearProbe,
    FineTune,
}

impl Protocol {
    pub const ALL: [Protocol; 3] = [Protocol::LinearProbe, Protocol::FineTune, Protocol::FullSupervised];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::FullSupervised => "FullSupervised",
            Protocol::LinearProbe => "LinearProbe",
            Protocol::FineTune => "FineTune",
        }
    }

    /// Whether this arm starts from the pretrained weights.
    pub fn uses_pretrained(self) -> bool {
        self != Protocol::FullSupervised
    }

    pub fn trains_backbone(self) -> bool {
        self != Protocol::LinearProbe
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Protocol {
    type Err = DownstreamError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        match key.as_str() {
            "fullsupervised" | "supervised" => Ok(Protocol::FullSupervised),
            "linearprobe" | "probe" => Ok(Protocol::LinearProbe),
            "finetune" => Ok(Protocol::FineTune),
            _ => Err(DownstreamError::Config(format!("unknown protocol {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    /// Per-frame labels of the next `t_pred` frames.
    #[default]
    Prediction,
    /// Majority label of the observed clip.
    Recognition,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DownstreamConfig {
    pub task: Task,
    pub t: usize,
    pub t_pred: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub learning_rate: f64,
    pub sgd_momentum: f64,
    pub batch_size: usize,
    /// Spacing between evaluation windows.
    pub eval_stride: usize,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        Self {
            task: Task::Prediction,
            t: 12,
            t_pred: 12,
            epochs: 10,
            steps_per_epoch: 20,
            learning_rate: 0.1,
            sgd_momentum: 0.9,
            batch_size: 16,
            eval_stride: 4,
        }
    }
}

impl DownstreamConfig {
    pub fn validate(&self) -> Result<(), DownstreamError> {
        if self.t == 0 || self.t_pred == 0 || self.batch_size == 0 || self.eval_stride == 0 {
            return Err(DownstreamError::Config("t, t_pred, batch_size and eval_stride must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.sgd_momentum) {
            return Err(DownstreamError::Config("learning_rate must be positive and sgd_momentum in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn head_kind(&self) -> HeadKind {
        match self.task {
            Task::Prediction => HeadKind::Prediction { t_pred: self.t_pred },
            Task::Recognition => HeadKind::Recognition,
        }
    }
}

fn targets(task: Task, clip: &ClipSample) -> Vec<usize> {
    match task {
        Task::Prediction => clip.future_labels.iter().map(|&l| l as usize).collect(),
        Task::Recognition => vec![clip.majority_label() as usize],
    }
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub backbone: Backbone,
    pub head: Head,
    /// Training loss per step.
    pub log: Vec<f64>,
}

/// Trains `head` (and, unless probing, `backbone`) with cross-entropy on clips from `videos`.
pub fn finetune(
    mut backbone: Backbone,
    mut head: Head,
    protocol: Protocol,
    videos: &[SyntheticVideo],
    cfg: &DownstreamConfig,
    seed: u64,
) -> Result<FinetuneOutcome, DownstreamError> {
    cfg.validate()?;
    if head.kind != cfg.head_kind() || head.embed_dim != backbone.spec.embed_dim || head.classes != NUM_ACTIONS {
        return Err(DownstreamError::Config(format!(
            "head {:?} ({} -> {}) does not fit task {:?} on a {}-dim backbone",
            head.kind, head.embed_dim, head.classes, cfg.task, backbone.spec.embed_dim
        )));
    }
    if backbone.spec.frames != cfg.t {
        return Err(DownstreamError::Config(format!(
            "backbone expects {} frames but t = {}",
            backbone.spec.frames, cfg.t
        )));
    }
    if videos.is_empty() {
        return Err(DownstreamError::Config("no training videos".into()));
    }
    let mut sgd = SgdState::new(cfg.learning_rate, cfg.sgd_momentum)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd0_5eed);
    let steps = cfg.epochs * cfg.steps_per_epoch;
    let mut log = Vec::with_capacity(steps);

    for step in 0..steps {
        let mut clips = Vec::with_capacity(cfg.batch_size);
        let mut gold = Vec::new();
        for _ in 0..cfg.batch_size {
            let video = &videos[rng.gen_range(0..videos.len())];
            let clip = sample_clip(video, cfg.t, cfg.t_pred, &mut rng)?;
            gold.extend(targets(cfg.task, &clip));
            clips.push(clip.past);
        }
        let refs: Vec<&Tensor> = clips.iter().collect();

        let mut tape = Tape::new();
        let bp = backbone.params.bind(&mut tape, protocol.trains_backbone());
        let hp = head.params.bind(&mut tape, true);
        let z = backbone.forward(&mut tape, &bp, &refs)?;
        let logits = head.forward(&mut tape, &hp, z)?;
        let loss = tape.cross_entropy(logits, &gold)?;
        let value = tape.value(loss)[0];
        if !value.is_finite() {
            return Err(DownstreamError::Divergence {
                step,
                detail: format!("non-finite loss under {protocol} with lr {}", cfg.learning_rate),
            });
        }
        tape.backward(loss)?;
        head.params.absorb_grads(&tape, &hp);
        let mut trainable = head.params.tensors_mut();
        if protocol.trains_backbone() {
            backbone.params.absorb_grads(&tape, &bp);
            trainable.extend(backbone.params.tensors_mut());
        }
        sgd_step(&mut trainable, &mut sgd).map_err(|e| DownstreamError::Divergence { step, detail: e.to_string() })?;
        head.params.zero_grads();
        backbone.params.zero_grads();
        log.push(value);
        if cfg.steps_per_epoch > 0 && (step + 1) % cfg.steps_per_epoch == 0 {
            info!("{protocol} epoch {} loss {value:.4}", (step + 1) / cfg.steps_per_epoch);
        }
    }
    Ok(FinetuneOutcome { backbone, head, log })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalResult {
    pub macro_precision: f64,
    pub per_class: Vec<f64>,
    /// `confusion[gold][pred]`
    pub confusion: Vec<Vec<u64>>,
    pub n_frames: usize,
}

/// Macro-averaged precision; a class that is never predicted scores 0.
pub fn evaluate_precision(preds: &[usize], golds: &[usize], classes: usize) -> Result<EvalResult, DownstreamError> {
    if preds.is_empty() {
        return Err(DownstreamError::Eval("no predictions to evaluate".into()));
    }
    if preds.len() != golds.len() {
        return Err(DownstreamError::Eval(format!("{} predictions for {} labels", preds.len(), golds.len())));
    }
    if let Some(bad) = preds.iter().chain(golds).find(|&&c| c >= classes) {
        return Err(DownstreamError::Eval(format!("label {bad} outside 0..{classes}")));
    }
    let mut confusion = vec![vec![0u64; classes]; classes];
    for (&p, &g) in preds.iter().zip(golds) {
        confusion[g][p] += 1;
    }
    let per_class: Vec<f64> = (0..classes)
        .map(|c| {
            let predicted: u64 = confusion.iter().map(|row| row[c]).sum();
            if predicted == 0 {
                0.0
            } else {
                confusion[c][c] as f64 / predicted as f64
            }
        })
        .collect();
    let macro_precision = per_class.iter().sum::<f64>() / classes as f64;
    Ok(EvalResult { macro_precision, per_class, confusion, n_frames: preds.len() })
}

/// Deterministic evaluation over strided windows of every video.
pub fn evaluate_model(
    backbone: &Backbone,
    head: &Head,
    videos: &[SyntheticVideo],
    cfg: &DownstreamConfig,
) -> Result<EvalResult, DownstreamError> {
    let mut preds = Vec::new();
    let mut golds = Vec::new();
    let mut pending: Vec<ClipSample> = Vec::new();
    let mut flush = |pending: &mut Vec<ClipSample>| -> Result<(), DownstreamError> {
        if pending.is_empty() {
            return Ok(());
        }
        let refs: Vec<&Tensor> = pending.iter().map(|c| &c.past).collect();
        let mut tape = Tape::new();
        let bp = backbone.params.bind(&mut tape, false);
        let hp = head.params.bind(&mut tape, false);
        let z = backbone.forward(&mut tape, &bp, &refs)?;
        let logits = head.forward(&mut tape, &hp, z)?;
        preds.extend(argmax_rows(tape.value(logits), head.classes));
        for clip in pending.drain(..) {
            golds.extend(targets(cfg.task, &clip));
        }
        Ok(())
    };
    for video in videos {
        let window = cfg.t + cfg.t_pred;
        let mut start = 0;
        while start + window <= video.len() {
            pending.push(clip_at(video, start, cfg.t, cfg.t_pred)?);
            if pending.len() == 32 {
                flush(&mut pending)?;
            }
            start += cfg.eval_stride;
        }
    }
    flush(&mut pending)?;
    evaluate_precision(&preds, &golds, head.classes)
}

/// Evaluation of the three protocols for one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub linear_probe: EvalResult,
    pub fine_tune: EvalResult,
    pub supervised: EvalResult,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub per_seed: Vec<SeedResult>,
    /// Mean over seeds of `fine_tune − supervised` macro precision.
    pub improvement: f64,
}

/// Runs one protocol arm from either the pretrained backbone or a fresh one.
pub fn run_protocol(
    spec: &BackboneSpec,
    pretrained: Option<&Backbone>,
    protocol: Protocol,
    train: &[SyntheticVideo],
    test: &[SyntheticVideo],
    cfg: &DownstreamConfig,
    seed: u64,
) -> Result<(EvalResult, FinetuneOutcome), DownstreamError> {
    let backbone = match (protocol.uses_pretrained(), pretrained) {
        (true, Some(b)) => {
            if &b.spec != spec {
                return Err(DownstreamError::Config(format!("pretrained backbone spec {:?} differs from {spec:?}", b.spec)));
            }
            b.clone()
        }
        (true, None) => return Err(DownstreamError::Config(format!("{protocol} needs a pretrained backbone"))),
        (false, _) => build_backbone(spec, seed)?,
    };
    let head = Head::new(cfg.head_kind(), spec.embed_dim, NUM_ACTIONS, seed ^ 0x4ead)?;
    let outcome = finetune(backbone, head, protocol, train, cfg, seed)?;
    let result = evaluate_model(&outcome.backbone, &outcome.head, test, cfg)?;
    Ok((result, outcome))
}

/// Evaluates all three protocols for each seed, loading `checkpoint_for(seed)` for the pretrained arms.
pub fn run_protocol_suite(
    spec: &BackboneSpec,
    train: &[SyntheticVideo],
    test: &[SyntheticVideo],
    cfg: &DownstreamConfig,
    seeds: &[u64],
    checkpoint_for: &dyn Fn(u64) -> PathBuf,
) -> Result<SuiteResult, DownstreamError> {
    if seeds.is_empty() {
        return Err(DownstreamError::Config("no seeds given".into()));
    }
    let mut per_seed = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let pretrained = load_pretrained(&checkpoint_for(seed), spec)?;
        let arm = |p| run_protocol(spec, Some(&pretrained), p, train, test, cfg, seed).map(|r| r.0);
        per_seed.push(SeedResult {
            seed,
            linear_probe: arm(Protocol::LinearProbe)?,
            fine_tune: arm(Protocol::FineTune)?,
            supervised: arm(Protocol::FullSupervised)?,
        });
    }
    let improvement = per_seed
        .iter()
        .map(|r| r.fine_tune.macro_precision - r.supervised.macro_precision)
        .sum::<f64>()
        / per_seed.len() as f64;
    Ok(SuiteResult { per_seed, improvement })
}

pub fn load_pretrained(path: &Path, spec: &BackboneSpec) -> Result<Backbone, DownstreamError> {
    let ck = Checkpoint::load(path)?;
    ck.ensure_matches(spec, None)?;
    Ok(ck.backbone()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let labels: Vec<usize> = (0..14).map(|i| i % 7).collect();
        let r = evaluate_precision(&labels, &labels, 7).unwrap();
        assert_eq!(r.macro_precision, 1.0);
        assert_eq!(r.n_frames, 14);
    }

    #[test]
    fn constant_prediction_on_balanced_binary() {
        let golds = [0, 1, 0, 1];
        let r = evaluate_precision(&[0; 4], &golds, 2).unwrap();
        assert_eq!(r.per_class, vec![0.5, 0.0]);
        assert_eq!(r.macro_precision, 0.25);
        assert_eq!(r.confusion, vec![vec![2, 0], vec![2, 0]]);
    }

    #[test]
    fn confusion_sums_match_counts() {
        let preds = [0, 2, 1, 1, 2, 0];
        let golds = [0, 1, 1, 2, 2, 2];
        let r = evaluate_precision(&preds, &golds, 3).unwrap();
        let total: u64 = r.confusion.iter().flatten().sum();
        assert_eq!(total as usize, preds.len());
        let gold_two: u64 = r.confusion[2].iter().sum();
        assert_eq!(gold_two, 3);
    }

    #[test]
    fn invalid_inputs() {
        assert!(evaluate_precision(&[], &[], 3).is_err());
        assert!(evaluate_precision(&[0], &[0, 1], 3).is_err());
        assert!(evaluate_precision(&[3], &[0], 3).is_err());
    }

    #[test]
    fn protocol_parsing() {
        assert_eq!("linear-probe".parse::<Protocol>().unwrap(), Protocol::LinearProbe);
        assert_eq!("FineTune".parse::<Protocol>().unwrap(), Protocol::FineTune);
        assert_eq!("full_supervised".parse::<Protocol>().unwrap(), Protocol::FullSupervised);
        assert!("other".parse::<Protocol>().is_err());
    }
}
