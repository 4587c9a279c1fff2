//! Experiment configuration, read from and written to TOML.
//!
//! Every section rejects unknown keys. Omitted keys take the defaults below.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::distill::{DistillConfig, LossVariant, MomentumSchedule};
use crate::downstream::{DownstreamConfig, Protocol, Task};
use crate::models::{BackboneSpec, Family};
use crate::synthdata::{CHANNELS, FRAME_SIZE};

use super::HarnessError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub dataset: DatasetSection,
    pub backbone: BackboneSection,
    pub clip: ClipSection,
    pub distill: DistillSection,
    pub downstream: DownstreamSection,
    pub grid: GridSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub name: String,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self { name: "default".into(), seeds: vec![0], output_dir: PathBuf::from("runs") }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub master_seed: u64,
    pub n_videos: usize,
    pub video_length: usize,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self { master_seed: 0, n_videos: 40, video_length: 120, split: [0.6, 0.2, 0.2] }
    }
}

/// Backbone hyperparameters; the clip length comes from `[clip]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneSection {
    pub family: Family,
    pub embed_dim: usize,
    pub conv_widths: [usize; 2],
    pub depth: usize,
    pub patch_size: usize,
    pub model_dim: usize,
    pub recurrent_hidden: usize,
}

impl Default for BackboneSection {
    fn default() -> Self {
        let s = BackboneSpec::default();
        Self {
            family: s.family,
            embed_dim: s.embed_dim,
            conv_widths: s.conv_widths,
            depth: s.depth,
            patch_size: s.patch_size,
            model_dim: s.model_dim,
            recurrent_hidden: s.recurrent_hidden,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClipSection {
    pub t: usize,
    pub t_pred: usize,
}

impl Default for ClipSection {
    fn default() -> Self {
        Self { t: 12, t_pred: 12 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillSection {
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
    pub m_start: f64,
    pub m_end: f64,
}

impl Default for DistillSection {
    fn default() -> Self {
        let d = DistillConfig::default();
        Self {
            loss: d.loss,
            temperature_student: d.temperature_student,
            temperature_teacher: d.temperature_teacher,
            center_momentum: d.center_momentum,
            learning_rate: d.learning_rate,
            sgd_momentum: d.sgd_momentum,
            batch_size: d.batch_size,
            epochs: d.epochs,
            steps_per_epoch: d.steps_per_epoch,
            projection_head: d.projection_head,
            m_start: 0.996,
            m_end: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DownstreamSection {
    pub task: Task,
    pub protocols: Vec<Protocol>,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub learning_rate: f64,
    pub sgd_momentum: f64,
    pub batch_size: usize,
    pub eval_stride: usize,
}

impl Default for DownstreamSection {
    fn default() -> Self {
        let d = DownstreamConfig::default();
        Self {
            task: d.task,
            protocols: Protocol::ALL.to_vec(),
            epochs: d.epochs,
            steps_per_epoch: d.steps_per_epoch,
            learning_rate: d.learning_rate,
            sgd_momentum: d.sgd_momentum,
            batch_size: d.batch_size,
            eval_stride: d.eval_stride,
        }
    }
}

/// Ablation grid; an interval sets both `t` and `t_pred`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub backbones: Vec<Family>,
    pub intervals: Vec<usize>,
    pub losses: Vec<LossVariant>,
}

impl Default for GridSection {
    fn default() -> Self {
        Self { backbones: Family::ALL.to_vec(), intervals: vec![3, 6, 12], losses: vec![LossVariant::Cosine] }
    }
}

/// One cell of the ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Cell {
    pub family: Family,
    pub interval: usize,
    pub loss: LossVariant,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::MissingFile(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            HarnessError::Config(m) => HarnessError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let field = |name: &str, msg: String| Err(HarnessError::Config(format!("{name}: {msg}")));
        if self.experiment.seeds.is_empty() {
            return field("experiment.seeds", "at least one seed is required".into());
        }
        let split_sum: f64 = self.dataset.split.iter().sum();
        if self.dataset.split.iter().any(|f| !(*f > 0.0)) || (split_sum - 1.0).abs() > 1e-9 {
            return field("dataset.split", format!("fractions must be positive and sum to 1, got {:?}", self.dataset.split));
        }
        if self.dataset.video_length < self.clip.t + self.clip.t_pred {
            return field(
                "dataset.video_length",
                format!("{} is shorter than t + t_pred = {}", self.dataset.video_length, self.clip.t + self.clip.t_pred),
            );
        }
        if self.downstream.protocols.is_empty() {
            return field("downstream.protocols", "at least one protocol is required".into());
        }
        self.backbone_spec().validate().map_err(|e| HarnessError::Config(format!("backbone: {e}")))?;
        self.distill_config().validate().map_err(|e| HarnessError::Config(format!("distill: {e}")))?;
        self.schedule()?;
        self.downstream_config().validate().map_err(|e| HarnessError::Config(format!("downstream: {e}")))?;
        if self.grid.intervals.contains(&0) {
            return field("grid.intervals", "intervals must be positive".into());
        }
        Ok(())
    }

    pub fn backbone_spec(&self) -> BackboneSpec {
        let b = &self.backbone;
        BackboneSpec {
            family: b.family,
            frames: self.clip.t,
            embed_dim: b.embed_dim,
            conv_widths: b.conv_widths,
            depth: b.depth,
            patch_size: b.patch_size,
            model_dim: b.model_dim,
            recurrent_hidden: b.recurrent_hidden,
            channels: CHANNELS,
            frame_size: FRAME_SIZE,
        }
    }

    pub fn distill_config(&self) -> DistillConfig {
        let d = &self.distill;
        DistillConfig {
            t: self.clip.t,
            t_pred: self.clip.t_pred,
            loss: d.loss,
            temperature_student: d.temperature_student,
            temperature_teacher: d.temperature_teacher,
            center_momentum: d.center_momentum,
            learning_rate: d.learning_rate,
            sgd_momentum: d.sgd_momentum,
            batch_size: d.batch_size,
            epochs: d.epochs,
            steps_per_epoch: d.steps_per_epoch,
            projection_head: d.projection_head,
        }
    }

    pub fn schedule(&self) -> Result<MomentumSchedule, HarnessError> {
        MomentumSchedule::new(self.distill.m_start, self.distill.m_end, self.distill_config().total_steps())
            .map_err(|e| HarnessError::Config(format!("distill: {e}")))
    }

    pub fn downstream_config(&self) -> DownstreamConfig {
        let d = &self.downstream;
        DownstreamConfig {
            task: d.task,
            t: self.clip.t,
            t_pred: self.clip.t_pred,
            epochs: d.epochs,
            steps_per_epoch: d.steps_per_epoch,
            learning_rate: d.learning_rate,
            sgd_momentum: d.sgd_momentum,
            batch_size: d.batch_size,
            eval_stride: d.eval_stride,
        }
    }

    pub fn cells(&self) -> Vec<Cell> {
        let g = &self.grid;
        let mut cells = Vec::new();
        for &family in &g.backbones {
            for &interval in &g.intervals {
                for &loss in &g.losses {
                    cells.push(Cell { family, interval, loss });
                }
            }
        }
        cells
    }

    /// The configuration for one grid cell.
    pub fn for_cell(&self, cell: Cell) -> Self {
        let mut cfg = self.clone();
        cfg.backbone.family = cell.family;
        cfg.clip = ClipSection { t: cell.interval, t_pred: cell.interval };
        cfg.distill.loss = cell.loss;
        cfg
    }

    /// SHA-256 over everything that determines a pretrained checkpoint.
    pub fn pretrain_hash(&self, seed: u64) -> [u8; 32] {
        #[derive(Serialize)]
        struct Key<'a> {
            dataset: &'a DatasetSection,
            backbone: BackboneSpec,
            distill: &'a DistillSection,
            clip: &'a ClipSection,
            seed: u64,
        }
        let key = Key {
            dataset: &self.dataset,
            backbone: self.backbone_spec(),
            distill: &self.distill,
            clip: &self.clip,
            seed,
        };
        Sha256::digest(serde_json::to_vec(&key).expect("key serializes")).into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml_string();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = ExperimentConfig::from_toml_str("[distill]\nlearning_rat = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("learning_rat"), "{err}");
        assert!(ExperimentConfig::from_toml_str("[bogus]\n").is_err());
    }

    #[test]
    fn field_level_messages() {
        let err = ExperimentConfig::from_toml_str("[dataset]\nsplit = [0.5, 0.5, 0.5]\n").unwrap_err();
        assert!(err.to_string().contains("dataset.split"));
        let err = ExperimentConfig::from_toml_str("[clip]\nt = 0\n").unwrap_err();
        assert!(err.to_string().contains("backbone") || err.to_string().contains("distill"), "{err}");
    }

    #[test]
    fn cells_and_hashes() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.cells().len(), 12);
        let cell = cfg.for_cell(Cell { family: Family::Conv3dResidual, interval: 3, loss: LossVariant::Mse });
        assert_eq!(cell.backbone_spec().frames, 3);
        assert_eq!(cell.distill_config().t_pred, 3);
        assert_ne!(cfg.pretrain_hash(0), cfg.pretrain_hash(1));
        assert_ne!(cfg.pretrain_hash(0), cell.pretrain_hash(0));
        let mut other = cfg.clone();
        other.downstream.epochs += 1;
        assert_eq!(cfg.pretrain_hash(0), other.pretrain_hash(0));
    }
}
