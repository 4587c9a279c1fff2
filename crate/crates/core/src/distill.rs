//! Future-past self-distillation.
//!
//! A student backbone sees only the past `t` frames of a clip. A teacher with the
//! same architecture sees the past and the next `t_pred` frames, subsampled back
//! to `t` frames. The student is trained by SGD to match the teacher embedding;
//! the teacher is never trained directly and instead tracks the student through
//! an exponential moving average whose momentum follows a cosine schedule.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{build_backbone, Backbone, BackboneSpec, ModelError, ProjectionHead};
use crate::numerics::{kernels, sgd_step, NumericsError, SgdState, Tape, Tensor, Var};
use crate::synthdata::{sample_clip, SynthError, SyntheticVideo};

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("pretraining diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Data(#[from] SynthError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossVariant {
    Cosine,
    CrossEntropy,
    #[serde(rename = "MSE")]
    Mse,
}

impl LossVariant {
    pub const ALL: [LossVariant; 3] = [LossVariant::Mse, LossVariant::Cosine, LossVariant::CrossEntropy];

    pub fn name(self) -> &'static str {
        match self {
            LossVariant::Cosine => "Cosine",
            LossVariant::CrossEntropy => "CrossEntropy",
            LossVariant::Mse => "MSE",
        }
    }
}

impl fmt::Display for LossVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossVariant {
    type Err = DistillError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        LossVariant::ALL
            .into_iter()
            .find(|l| l.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| DistillError::Config(format!("unknown loss variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    /// Past frames seen by the student.
    pub t: usize,
    /// Future frames additionally seen by the teacher.
    pub t_pred: usize,
    pub loss: LossVariant,
    pub temperature_student: f64,
    pub temperature_teacher: f64,
    pub center_momentum: f64,
    pub learning_rate: f64,
    pub sgd_momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub projection_head: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            t: 12,
            t_pred: 12,
            loss: LossVariant::Cosine,
            temperature_student: 0.1,
            temperature_teacher: 0.04,
            center_momentum: 0.9,
            learning_rate: 0.05,
            sgd_momentum: 0.9,
            batch_size: 16,
            epochs: 20,
            steps_per_epoch: 10,
            projection_head: false,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<(), DistillError> {
        let bad = |m: String| Err(DistillError::Config(m));
        if self.t == 0 || self.t_pred == 0 {
            return bad(format!("t and t_pred must be at least 1, got {} and {}", self.t, self.t_pred));
        }
        if !(self.temperature_student > 0.0 && self.temperature_teacher > 0.0) {
            return bad("temperatures must be positive".into());
        }
        if !(0.0..1.0).contains(&self.center_momentum) {
            return bad(format!("center_momentum must lie in [0, 1), got {}", self.center_momentum));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.sgd_momentum) {
            return bad("learning_rate must be positive and sgd_momentum in [0, 1)".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }
}

/// Cosine ramp of the EMA momentum from `m_start` to `m_end`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentumSchedule {
    pub m_start: f64,
    pub m_end: f64,
    pub total_steps: usize,
}

impl MomentumSchedule {
    pub fn new(m_start: f64, m_end: f64, total_steps: usize) -> Result<Self, DistillError> {
        let in_range = |m: f64| m > 0.0 && m <= 1.0;
        if !in_range(m_start) || !in_range(m_end) {
            return Err(DistillError::Config(format!(
                "momentum endpoints must lie in (0, 1], got {m_start} and {m_end}"
            )));
        }
        Ok(Self { m_start, m_end, total_steps })
    }
}

/// `m_end − (m_end − m_start)·(cos(π·step/total) + 1)/2`; out-of-range steps are clamped.
pub fn momentum_at(schedule: &MomentumSchedule, step: usize) -> f64 {
    let MomentumSchedule { m_start, m_end, total_steps } = *schedule;
    if total_steps == 0 {
        return m_end;
    }
    let step = if step > total_steps {
        warn!("momentum step {step} beyond schedule end {total_steps}; clamping");
        total_steps
    } else {
        step
    };
    let phase = std::f64::consts::PI * step as f64 / total_steps as f64;
    m_end - (m_end - m_start) * (phase.cos() + 1.0) / 2.0
}

/// Frame indices the teacher keeps: `round(j·(t+t_pred)/t)` for `j < t`, clamped to the window.
pub fn downsample_indices(t: usize, t_pred: usize) -> Vec<usize> {
    let total = t + t_pred;
    (0..t)
        // round half up in exact integer arithmetic
        .map(|j| ((2 * j * total + t) / (2 * t)).min(total - 1))
        .collect()
}

/// Selects `t` frames out of a `[t + t_pred, C, H, W]` window.
pub fn downsample_teacher_sequence(frames: &Tensor, t: usize, t_pred: usize) -> Result<Tensor, DistillError> {
    let shape = frames.shape();
    if shape.is_empty() || shape[0] != t + t_pred || t == 0 {
        return Err(DistillError::Config(format!(
            "teacher window has shape {shape:?}, expected {} frames",
            t + t_pred
        )));
    }
    let frame_len: usize = shape[1..].iter().product();
    let mut data = Vec::with_capacity(t * frame_len);
    for i in downsample_indices(t, t_pred) {
        data.extend_from_slice(&frames.data()[i * frame_len..(i + 1) * frame_len]);
    }
    let mut out_shape = shape.to_vec();
    out_shape[0] = t;
    Ok(Tensor::new(out_shape, data)?)
}

/// Distillation loss between student embeddings on the tape and detached teacher embeddings.
///
/// `center` is only read by the cross-entropy variant.
pub fn fpd_loss(
    tape: &mut Tape,
    student: Var,
    teacher: &Tensor,
    cfg: &DistillConfig,
    center: &Tensor,
) -> Result<Var, DistillError> {
    let shape = tape.shape(student).to_vec();
    if shape.len() != 2 || teacher.shape() != shape.as_slice() {
        return Err(DistillError::Config(format!(
            "student {shape:?} and teacher {:?} embeddings differ",
            teacher.shape()
        )));
    }
    let (batch, dim) = (shape[0], shape[1]);
    let target = tape.constant(teacher);
    let loss = match cfg.loss {
        LossVariant::Cosine => {
            let sv = tape.value(student);
            let degenerate = (0..batch)
                .filter(|&r| {
                    kernels::cosine(&sv[r * dim..(r + 1) * dim], &teacher.data()[r * dim..(r + 1) * dim]).is_none()
                })
                .count();
            if degenerate > 0 {
                warn!("{degenerate} zero-norm embedding rows; counted as orthogonal");
            }
            tape.cosine_distance(student, target)?
        }
        LossVariant::Mse => {
            let diff = tape.sub(student, target)?;
            let sq = tape.mul(diff, diff)?;
            tape.mean(sq)
        }
        LossVariant::CrossEntropy => {
            if center.numel() != dim {
                return Err(DistillError::Config(format!("center has {} values for dim {dim}", center.numel())));
            }
            let mut probs = teacher.data().to_vec();
            for row in probs.chunks_mut(dim) {
                row.iter_mut().zip(center.data()).for_each(|(v, c)| *v -= c);
                kernels::softmax_in_place(row, cfg.temperature_teacher);
            }
            let probs = tape.constant(&Tensor::new(shape.clone(), probs)?);
            let log_q = tape.log_softmax(student, cfg.temperature_student)?;
            let cross = tape.mul(probs, log_q)?;
            let total = tape.sum(cross);
            tape.scale(total, -1.0 / batch as f64)
        }
    };
    Ok(loss)
}

/// `center ← μ·center + (1 − μ)·mean_b(teacher_b)`.
pub fn update_center(center: &mut Tensor, teacher: &Tensor, momentum: f64) {
    let dim = center.numel();
    let batch = teacher.numel() / dim;
    let mut mean = vec![0.0; dim];
    for row in teacher.data().chunks(dim) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v / batch as f64);
    }
    for (c, m) in center.data_mut().iter_mut().zip(mean) {
        *c = momentum * *c + (1.0 - momentum) * m;
    }
}

/// Student and EMA teacher with identical structure.
#[derive(Clone, Debug)]
pub struct StudentTeacherPair {
    pub student: Backbone,
    pub teacher: Backbone,
    pub student_head: Option<ProjectionHead>,
    pub teacher_head: Option<ProjectionHead>,
    pub step: usize,
}

impl StudentTeacherPair {
    /// The teacher starts as an exact copy of the student.
    pub fn new(student: Backbone, head: Option<ProjectionHead>) -> Self {
        Self { teacher: student.clone(), teacher_head: head.clone(), student, student_head: head, step: 0 }
    }

    /// True while no teacher parameter carries a gradient buffer.
    pub fn teacher_is_gradient_free(&self) -> bool {
        let heads = self.teacher_head.iter().flat_map(|h| h.params.iter());
        self.teacher.params.iter().chain(heads).all(|p| p.tensor.grad.is_none())
    }
}

/// `φ ← m·φ + (1 − m)·θ` for every parameter.
pub fn ema_update(pair: &mut StudentTeacherPair, m: f64) -> Result<(), DistillError> {
    if !(0.0..=1.0).contains(&m) {
        return Err(DistillError::Config(format!("EMA momentum must lie in [0, 1], got {m}")));
    }
    let blend = |teacher: &mut crate::models::ParamStore, student: &crate::models::ParamStore| {
        if teacher.len() != student.len() {
            return Err(DistillError::Config("student and teacher structures differ".into()));
        }
        for (phi, theta) in teacher.iter_mut().zip(student.iter()) {
            if phi.tensor.shape() != theta.tensor.shape() {
                return Err(DistillError::Config(format!("shape mismatch on {}", phi.name)));
            }
            for (p, s) in phi.tensor.data_mut().iter_mut().zip(theta.tensor.data()) {
                *p = m * *p + (1.0 - m) * s;
            }
        }
        Ok(())
    };
    blend(&mut pair.teacher.params, &pair.student.params)?;
    if let (Some(t), Some(s)) = (pair.teacher_head.as_mut(), pair.student_head.as_ref()) {
        blend(&mut t.params, &s.params)?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub momentum: f64,
    pub embed_std: f64,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub pair: StudentTeacherPair,
    pub log: Vec<LogRow>,
    /// Sampling stream position after the last step.
    pub rng: ChaCha8Rng,
}

/// Mean over dimensions of the per-dimension (population) std of a `[B, d]` batch.
pub fn embedding_std(batch: &[f64], dim: usize) -> f64 {
    let rows = batch.len() / dim;
    if rows < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for c in 0..dim {
        let mean = (0..rows).map(|r| batch[r * dim + c]).sum::<f64>() / rows as f64;
        let var = (0..rows).map(|r| (batch[r * dim + c] - mean).powi(2)).sum::<f64>() / rows as f64;
        total += var.sqrt();
    }
    total / dim as f64
}

/// Runs future-past distillation on `videos` and returns the trained pair with its log.
pub fn pretrain(
    spec: &BackboneSpec,
    videos: &[SyntheticVideo],
    cfg: &DistillConfig,
    schedule: &MomentumSchedule,
    seed: u64,
) -> Result<PretrainOutcome, DistillError> {
    cfg.validate()?;
    if spec.frames != cfg.t {
        return Err(DistillError::Config(format!(
            "backbone expects {} frames but t = {}",
            spec.frames, cfg.t
        )));
    }
    if videos.is_empty() {
        return Err(DistillError::Config("no training videos".into()));
    }
    if let Some(v) = videos.iter().find(|v| v.len() < cfg.t + cfg.t_pred) {
        return Err(DistillError::Config(format!(
            "video {} has {} frames, fewer than t + t_pred = {}",
            v.id,
            v.len(),
            cfg.t + cfg.t_pred
        )));
    }
    let student = build_backbone(spec, seed)?;
    let head = cfg.projection_head.then(|| ProjectionHead::new(spec.embed_dim, seed ^ 0x5eed));
    let mut pair = StudentTeacherPair::new(student, head);
    let mut sgd = SgdState::new(cfg.learning_rate, cfg.sgd_momentum)?;
    let mut center = Tensor::zeros(&[spec.embed_dim]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e37_79b9));
    let total = cfg.total_steps();
    let mut log = Vec::with_capacity(total);

    for step in 0..total {
        let mut past = Vec::with_capacity(cfg.batch_size);
        let mut future = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let video = &videos[rng.gen_range(0..videos.len())];
            let clip = sample_clip(video, cfg.t, cfg.t_pred, &mut rng)?;
            future.push(downsample_teacher_sequence(&clip.combined, cfg.t, cfg.t_pred)?);
            past.push(clip.past);
        }
        let past_refs: Vec<&Tensor> = past.iter().collect();
        let future_refs: Vec<&Tensor> = future.iter().collect();

        let teacher_out = {
            let mut tape = Tape::new();
            let p = pair.teacher.params.bind(&mut tape, false);
            let mut z = pair.teacher.forward(&mut tape, &p, &future_refs)?;
            if let Some(h) = &pair.teacher_head {
                let hp = h.params.bind(&mut tape, false);
                z = h.forward(&mut tape, &hp, z)?;
            }
            tape.to_tensor(z)
        };

        let mut tape = Tape::new();
        let p = pair.student.params.bind(&mut tape, true);
        let backbone_out = pair.student.forward(&mut tape, &p, &past_refs)?;
        let embed_std = embedding_std(tape.value(backbone_out), spec.embed_dim);
        let (out, head_bound) = match &pair.student_head {
            Some(h) => {
                let hp = h.params.bind(&mut tape, true);
                (h.forward(&mut tape, &hp, backbone_out)?, Some(hp))
            }
            None => (backbone_out, None),
        };
        let loss = fpd_loss(&mut tape, out, &teacher_out, cfg, &center)?;
        let loss_value = tape.value(loss)[0];
        if !loss_value.is_finite() {
            return Err(DistillError::Divergence {
                step,
                detail: format!(
                    "non-finite loss ({loss_value}) with {} loss, lr {}, batch {}",
                    cfg.loss, cfg.learning_rate, cfg.batch_size
                ),
            });
        }
        tape.backward(loss)?;
        pair.student.params.absorb_grads(&tape, &p);
        let mut trainable = pair.student.params.tensors_mut();
        if let (Some(h), Some(hp)) = (pair.student_head.as_mut(), head_bound.as_ref()) {
            h.params.absorb_grads(&tape, hp);
            trainable.extend(h.params.tensors_mut());
        }
        sgd_step(&mut trainable, &mut sgd).map_err(|e| DistillError::Divergence {
            step,
            detail: format!("{e} with {} loss, lr {}, batch {}", cfg.loss, cfg.learning_rate, cfg.batch_size),
        })?;
        pair.student.params.zero_grads();
        if let Some(h) = pair.student_head.as_mut() {
            h.params.zero_grads();
        }

        let m = momentum_at(schedule, step);
        ema_update(&mut pair, m)?;
        if cfg.loss == LossVariant::CrossEntropy {
            update_center(&mut center, &teacher_out, cfg.center_momentum);
        }
        pair.step = step + 1;
        log.push(LogRow { step: step + 1, loss: loss_value, momentum: m, embed_std });
        if cfg.steps_per_epoch > 0 && (step + 1) % cfg.steps_per_epoch == 0 {
            info!(
                "epoch {} step {} loss {loss_value:.5} momentum {m:.5} embed_std {embed_std:.4}",
                (step + 1) / cfg.steps_per_epoch,
                step + 1
            );
        }
    }
    Ok(PretrainOutcome { pair, log, rng })
}

/// Mean loss over the `window` log rows ending at 1-based `step`.
pub fn smoothed_loss(log: &[LogRow], step: usize, window: usize) -> f64 {
    let end = step.min(log.len());
    let start = end.saturating_sub(window);
    let rows = &log[start..end];
    rows.iter().map(|r| r.loss).sum::<f64>() / rows.len().max(1) as f64
}

pub fn write_log_csv(path: &Path, log: &[LogRow]) -> Result<(), DistillError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in log {
        w.serialize(row).map_err(|e| DistillError::Io(std::io::Error::other(e)))?;
    }
    if log.is_empty() {
        w.write_record(["step", "loss", "momentum", "embed_std"])
            .map_err(|e| DistillError::Io(std::io::Error::other(e)))?;
    }
    let bytes = w.into_inner().map_err(|e| DistillError::Io(std::io::Error::other(e.to_string())))?;
    crate::io::write_atomic(path, &bytes)?;
    Ok(())
}

pub fn read_log_csv(path: &Path) -> Result<Vec<LogRow>, DistillError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| DistillError::Io(std::io::Error::other(e)))?;
    r.deserialize()
        .collect::<Result<Vec<LogRow>, _>>()
        .map_err(|e| DistillError::Io(std::io::Error::other(e)))
}
