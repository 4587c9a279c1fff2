use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{Tape, Tensor, Var};

use super::layers;
use super::params::{Bound, ParamStore};
use super::ModelError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HeadKind {
    /// One row of class logits per future frame.
    Prediction { t_pred: usize },
    /// A single row of class logits per clip.
    Recognition,
}

impl HeadKind {
    pub fn rows(self) -> usize {
        match self {
            HeadKind::Prediction { t_pred } => t_pred,
            HeadKind::Recognition => 1,
        }
    }
}

/// Affine classification head on top of a `d`-dimensional embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub kind: HeadKind,
    pub embed_dim: usize,
    pub classes: usize,
    pub params: ParamStore,
}

impl Head {
    pub fn new(kind: HeadKind, embed_dim: usize, classes: usize, seed: u64) -> Result<Self, ModelError> {
        if kind.rows() == 0 || embed_dim == 0 || classes == 0 {
            return Err(ModelError::Config(format!(
                "head needs positive dims, got rows {}, d {embed_dim}, classes {classes}",
                kind.rows()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        layers::push_linear(&mut params, "head", embed_dim, kind.rows() * classes, &mut rng);
        Ok(Self { kind, embed_dim, classes, params })
    }

    /// Maps `z: [B, d]` to logits `[B·rows, C]` (sample-major).
    pub fn forward(&self, tape: &mut Tape, p: &Bound, z: Var) -> Result<Var, ModelError> {
        let shape = tape.shape(z).to_vec();
        if shape.len() != 2 || shape[1] != self.embed_dim {
            return Err(ModelError::Dimension(format!(
                "head expects [B, {}] embeddings, got {shape:?}",
                self.embed_dim
            )));
        }
        let logits = layers::linear(tape, p, "head", z)?;
        Ok(tape.reshape(logits, &[shape[0] * self.kind.rows(), self.classes])?)
    }

    fn logits(&self, z: &Tensor) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let z = tape.constant(&z.clone().reshape(&[1, z.numel()])?);
        let y = self.forward(&mut tape, &p, z)?;
        Ok(tape.to_tensor(y))
    }
}

/// Raw per-frame logits `[t_pred, C]` for one embedding.
pub fn predict_actions(head: &Head, z: &Tensor) -> Result<Tensor, ModelError> {
    if !matches!(head.kind, HeadKind::Prediction { .. }) {
        return Err(ModelError::Config("predict_actions needs a prediction head".into()));
    }
    head.logits(z)
}

/// Raw clip-level logits `[1, C]` for one embedding.
pub fn recognize(head: &Head, z: &Tensor) -> Result<Tensor, ModelError> {
    if head.kind != HeadKind::Recognition {
        return Err(ModelError::Config("recognize needs a recognition head".into()));
    }
    head.logits(z)
}

/// Row-wise argmax; ties resolve to the lowest class index.
pub fn argmax_rows(logits: &[f64], classes: usize) -> Vec<usize> {
    logits
        .chunks(classes)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Optional two-layer MLP between backbone and distillation loss.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHead {
    pub params: ParamStore,
}

impl ProjectionHead {
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        layers::push_linear(&mut params, "proj_head.l1", dim, dim, &mut rng);
        layers::push_linear(&mut params, "proj_head.l2", dim, dim, &mut rng);
        Self { params }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, z: Var) -> Result<Var, ModelError> {
        let h = layers::linear(tape, p, "proj_head.l1", z)?;
        let h = tape.gelu(h);
        layers::linear(tape, p, "proj_head.l2", h)
    }
}
