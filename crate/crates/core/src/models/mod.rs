//! Toy-scale backbones for the four architecture families plus the downstream heads.
//!
//! Every backbone maps a clip `[T, C, H, W]` to a `d`-dimensional embedding.
//! `Conv3dResidual` and `TemporalTransformer` consume the clip jointly;
//! `Conv2dRecurrent` and `PatchTransformerRecurrent` encode frames independently
//! and aggregate them with an LSTM.

mod heads;
mod layers;
mod params;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{NumericsError, Tape, Tensor, Var};

pub use heads::{argmax_rows, predict_actions, recognize, Head, HeadKind, ProjectionHead};
pub use params::{Bound, Param, ParamStore};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    Conv3dResidual,
    TemporalTransformer,
    Conv2dRecurrent,
    PatchTransformerRecurrent,
}

impl Family {
    pub const ALL: [Family; 4] = [
        Family::Conv3dResidual,
        Family::TemporalTransformer,
        Family::Conv2dRecurrent,
        Family::PatchTransformerRecurrent,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Conv3dResidual => "Conv3dResidual",
            Family::TemporalTransformer => "TemporalTransformer",
            Family::Conv2dRecurrent => "Conv2dRecurrent",
            Family::PatchTransformerRecurrent => "PatchTransformerRecurrent",
        }
    }

    /// Whether frames are encoded one at a time before temporal aggregation.
    pub fn is_per_frame(self) -> bool {
        matches!(self, Family::Conv2dRecurrent | Family::PatchTransformerRecurrent)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Family::ALL
            .into_iter()
            .find(|f| f.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| ModelError::Config(format!("unknown backbone family {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneSpec {
    pub family: Family,
    /// Clip length `T` the backbone accepts.
    pub frames: usize,
    pub embed_dim: usize,
    /// Channel widths of the two strided convolutions.
    pub conv_widths: [usize; 2],
    /// Residual blocks (Conv3dResidual) or transformer blocks.
    pub depth: usize,
    pub patch_size: usize,
    pub model_dim: usize,
    pub recurrent_hidden: usize,
    pub channels: usize,
    pub frame_size: usize,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self {
            family: Family::Conv2dRecurrent,
            frames: 12,
            embed_dim: 64,
            conv_widths: [8, 16],
            depth: 1,
            patch_size: 8,
            model_dim: 32,
            recurrent_hidden: 64,
            channels: 3,
            frame_size: 32,
        }
    }
}

impl BackboneSpec {
    pub fn new(family: Family, frames: usize) -> Self {
        Self { family, frames, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("frames", self.frames),
            ("embed_dim", self.embed_dim),
            ("conv_widths[0]", self.conv_widths[0]),
            ("conv_widths[1]", self.conv_widths[1]),
            ("depth", self.depth),
            ("patch_size", self.patch_size),
            ("model_dim", self.model_dim),
            ("recurrent_hidden", self.recurrent_hidden),
            ("channels", self.channels),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be positive")));
        }
        if self.frame_size < 4 || !self.frame_size.is_multiple_of(4) {
            return Err(ModelError::Config(format!(
                "frame_size must be a positive multiple of 4, got {}",
                self.frame_size
            )));
        }
        if !self.frame_size.is_multiple_of(self.patch_size) {
            return Err(ModelError::Config(format!(
                "patch_size {} does not tile frame_size {}",
                self.patch_size, self.frame_size
            )));
        }
        Ok(())
    }

    fn reduced_side(&self) -> usize {
        self.frame_size / 4
    }

    fn patches_per_frame(&self) -> usize {
        (self.frame_size / self.patch_size).pow(2)
    }

    fn patch_len(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }
}

/// A backbone's architecture plus its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub spec: BackboneSpec,
    pub params: ParamStore,
}

/// Deterministically initializes a backbone from `seed`.
pub fn build_backbone(spec: &BackboneSpec, seed: u64) -> Result<Backbone, ModelError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamStore::new();
    let [w0, w1] = spec.conv_widths;
    let c = spec.channels;
    let flat = w1 * spec.reduced_side().pow(2);
    match spec.family {
        Family::Conv3dResidual => {
            p.push_he_uniform("stem.w", &[w0, c, 3, 3, 3], c * 27, &mut rng);
            p.push_he_uniform("down.w", &[w1, w0, 3, 3, 3], w0 * 27, &mut rng);
            for i in 0..spec.depth {
                p.push_he_uniform(&format!("res{i}.conv1.w"), &[w1, w1, 3, 3, 3], w1 * 27, &mut rng);
                p.push_he_uniform(&format!("res{i}.conv2.w"), &[w1, w1, 3, 3, 3], w1 * 27, &mut rng);
            }
            layers::push_linear(&mut p, "proj", flat, spec.embed_dim, &mut rng);
        }
        Family::Conv2dRecurrent => {
            p.push_he_uniform("enc.conv1.w", &[w0, c, 1, 3, 3], c * 9, &mut rng);
            p.push_he_uniform("enc.conv2.w", &[w1, w0, 1, 3, 3], w0 * 9, &mut rng);
            p.push_he_uniform("enc.fc.w", &[flat, spec.embed_dim], flat, &mut rng);
            p.push_const("enc.fc.b", &[spec.embed_dim], 0.0);
            layers::push_lstm(&mut p, "rnn", spec.embed_dim, spec.recurrent_hidden, &mut rng);
            layers::push_linear(&mut p, "proj", spec.recurrent_hidden, spec.embed_dim, &mut rng);
        }
        Family::TemporalTransformer | Family::PatchTransformerRecurrent => {
            let dm = spec.model_dim;
            layers::push_linear(&mut p, "patch", spec.patch_len(), dm, &mut rng);
            p.push_uniform("pos.spatial", &[spec.patches_per_frame(), dm], dm, &mut rng);
            if spec.family == Family::TemporalTransformer {
                p.push_uniform("pos.temporal", &[spec.frames, dm], dm, &mut rng);
            }
            for i in 0..spec.depth {
                layers::push_transformer_block(&mut p, &format!("block{i}"), dm, &mut rng);
            }
            p.push_const("ln_f.g", &[dm], 1.0);
            p.push_const("ln_f.b", &[dm], 0.0);
            if spec.family == Family::TemporalTransformer {
                layers::push_linear(&mut p, "proj", dm, spec.embed_dim, &mut rng);
            } else {
                layers::push_lstm(&mut p, "rnn", dm, spec.recurrent_hidden, &mut rng);
                layers::push_linear(&mut p, "proj", spec.recurrent_hidden, spec.embed_dim, &mut rng);
            }
        }
    }
    Ok(Backbone { spec: spec.clone(), params: p })
}

impl Backbone {
    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    fn check_clips(&self, clips: &[&Tensor]) -> Result<(), ModelError> {
        if clips.is_empty() {
            return Err(ModelError::Dimension("empty batch".into()));
        }
        let s = &self.spec;
        let expected = [s.frames, s.channels, s.frame_size, s.frame_size];
        for clip in clips {
            if clip.shape() != expected {
                return Err(ModelError::Dimension(format!(
                    "{} expects clips of shape {expected:?}, got {:?}",
                    s.family,
                    clip.shape()
                )));
            }
        }
        Ok(())
    }

    /// Records the forward pass for a batch of clips, returning `[B, d]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, clips: &[&Tensor]) -> Result<Var, ModelError> {
        self.check_clips(clips)?;
        match self.spec.family {
            Family::Conv3dResidual => self.forward_conv3d(tape, p, clips),
            Family::Conv2dRecurrent => self.forward_conv2d_recurrent(tape, p, clips),
            Family::TemporalTransformer => self.forward_transformer(tape, p, clips, false),
            Family::PatchTransformerRecurrent => self.forward_transformer(tape, p, clips, true),
        }
    }

    /// Embeddings for a batch without recording gradients, `[B, d]`.
    pub fn embed_batch(&self, clips: &[&Tensor]) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let z = self.forward(&mut tape, &p, clips)?;
        Ok(tape.to_tensor(z))
    }

    fn forward_conv3d(&self, tape: &mut Tape, p: &Bound, clips: &[&Tensor]) -> Result<Var, ModelError> {
        let s = &self.spec;
        let mut pooled = Vec::with_capacity(clips.len());
        for clip in clips {
            let x = tape.constant(&to_channels_first(&[clip]));
            let x = tape.conv3d(x, p.get("stem.w")?, [1, 2, 2], [1, 1, 1])?;
            let x = tape.relu(x);
            let x = tape.conv3d(x, p.get("down.w")?, [1, 2, 2], [1, 1, 1])?;
            let mut x = tape.relu(x);
            for i in 0..s.depth {
                let r = tape.conv3d(x, p.get(&format!("res{i}.conv1.w"))?, [1, 1, 1], [1, 1, 1])?;
                let r = tape.relu(r);
                let r = tape.conv3d(r, p.get(&format!("res{i}.conv2.w"))?, [1, 1, 1], [1, 1, 1])?;
                let sum = tape.add(x, r)?;
                x = tape.relu(sum);
            }
            // [w1, T, h, w] -> [T, w1·h·w], then average over time
            let x = tape.permute(x, &[1, 0, 2, 3])?;
            let side = s.reduced_side();
            let x = tape.reshape(x, &[s.frames, s.conv_widths[1] * side * side])?;
            let x = tape.mean_rows(x)?;
            pooled.push(tape.reshape(x, &[1, s.conv_widths[1] * side * side])?);
        }
        let pooled = tape.concat(&pooled)?;
        layers::linear(tape, p, "proj", pooled)
    }

    fn forward_conv2d_recurrent(&self, tape: &mut Tape, p: &Bound, clips: &[&Tensor]) -> Result<Var, ModelError> {
        let s = &self.spec;
        let (batch, steps) = (clips.len(), s.frames);
        // all frames of the batch side by side on the time axis; kT = 1 keeps them independent
        let x = tape.constant(&to_channels_first(clips));
        let x = tape.conv3d(x, p.get("enc.conv1.w")?, [1, 2, 2], [0, 1, 1])?;
        let x = tape.relu(x);
        let x = tape.conv3d(x, p.get("enc.conv2.w")?, [1, 2, 2], [0, 1, 1])?;
        let x = tape.relu(x);
        let x = tape.permute(x, &[1, 0, 2, 3])?;
        let side = s.reduced_side();
        let x = tape.reshape(x, &[batch * steps, s.conv_widths[1] * side * side])?;
        let feats = layers::linear(tape, p, "enc.fc", x)?;
        let feats = tape.relu(feats);
        let h = layers::lstm_last_hidden(tape, p, "rnn", feats, batch, steps, s.recurrent_hidden)?;
        layers::linear(tape, p, "proj", h)
    }

    fn forward_transformer(&self, tape: &mut Tape, p: &Bound, clips: &[&Tensor], per_frame: bool) -> Result<Var, ModelError> {
        let s = &self.spec;
        let (batch, steps, patches) = (clips.len(), s.frames, s.patches_per_frame());
        let tokens = batch * steps * patches;
        let x = tape.constant(&patchify(clips, s.patch_size));
        let x = layers::linear(tape, p, "patch", x)?;
        let spatial_rows: Vec<usize> = (0..tokens).map(|i| i % patches).collect();
        let pos = tape.gather_rows(p.get("pos.spatial")?, &spatial_rows)?;
        let mut x = tape.add(x, pos)?;
        if !per_frame {
            let temporal_rows: Vec<usize> = (0..tokens).map(|i| (i / patches) % steps).collect();
            let pos = tape.gather_rows(p.get("pos.temporal")?, &temporal_rows)?;
            x = tape.add(x, pos)?;
        }
        let group = if per_frame { patches } else { steps * patches };
        for i in 0..s.depth {
            x = layers::transformer_block(tape, p, &format!("block{i}"), x, group)?;
        }
        let pooled = layers::mean_groups(tape, x, tokens / group)?;
        let pooled = layers::layer_norm(tape, p, "ln_f", pooled)?;
        if per_frame {
            let h = layers::lstm_last_hidden(tape, p, "rnn", pooled, batch, steps, s.recurrent_hidden)?;
            layers::linear(tape, p, "proj", h)
        } else {
            layers::linear(tape, p, "proj", pooled)
        }
    }
}

/// Embeds one clip `[T, C, H, W]` into a `d`-vector.
pub fn embed(backbone: &Backbone, clip: &Tensor) -> Result<Tensor, ModelError> {
    let z = backbone.embed_batch(&[clip])?;
    let d = backbone.spec.embed_dim;
    Ok(z.reshape(&[d])?)
}

/// Stacks clips `[T, C, H, W]` into one `[C, B·T, H, W]` volume.
pub fn to_channels_first(clips: &[&Tensor]) -> Tensor {
    let s = clips[0].shape();
    let (t, c, h, w) = (s[0], s[1], s[2], s[3]);
    let bt = t * clips.len();
    let plane = h * w;
    let mut out = vec![0.0; c * bt * plane];
    for (b, clip) in clips.iter().enumerate() {
        let d = clip.data();
        for f in 0..t {
            for ch in 0..c {
                let src = &d[(f * c + ch) * plane..(f * c + ch + 1) * plane];
                let dst = (ch * bt + b * t + f) * plane;
                out[dst..dst + plane].copy_from_slice(src);
            }
        }
    }
    Tensor::new(vec![c, bt, h, w], out).expect("consistent stacking")
}

/// Cuts every frame into non-overlapping `patch × patch` tiles.
///
/// Returns `[B·T·P, C·patch·patch]` with tiles in row-major order per frame.
pub fn patchify(clips: &[&Tensor], patch: usize) -> Tensor {
    let s = clips[0].shape();
    let (t, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (ph, pw) = (h / patch, w / patch);
    let len = c * patch * patch;
    let mut out = Vec::with_capacity(clips.len() * t * ph * pw * len);
    for clip in clips {
        let d = clip.data();
        for f in 0..t {
            for py in 0..ph {
                for px in 0..pw {
                    for ch in 0..c {
                        for dy in 0..patch {
                            let row = ((f * c + ch) * h + py * patch + dy) * w + px * patch;
                            out.extend_from_slice(&d[row..row + patch]);
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![clips.len() * t * ph * pw, len], out).expect("consistent patching")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(family: Family, frames: usize) -> BackboneSpec {
        BackboneSpec {
            family,
            frames,
            embed_dim: 5,
            conv_widths: [2, 4],
            depth: 1,
            patch_size: 4,
            model_dim: 6,
            recurrent_hidden: 3,
            channels: 3,
            frame_size: 8,
        }
    }

    #[test]
    fn parameter_counts_match_layer_sums() {
        // conv1 2·3·9, conv2 4·2·9, fc (4·2·2)·5+5, lstm 5·12+3·12+12, proj 3·5+5
        let b = build_backbone(&small_spec(Family::Conv2dRecurrent, 3), 0).unwrap();
        assert_eq!(b.param_count(), 54 + 72 + (16 * 5 + 5) + (60 + 36 + 12) + (15 + 5));

        // stem 2·3·27, down 4·2·27, res 2·(4·4·27), proj 16·5+5
        let b = build_backbone(&small_spec(Family::Conv3dResidual, 3), 0).unwrap();
        assert_eq!(b.param_count(), 162 + 216 + 2 * 432 + 85);

        // patch 48·6+6, pos 4·6 (+ temporal 3·6), block: ln 12 + attn 4·36 + ln 12 + mlp (6·12+12)+(12·6+6)
        let block = 12 + 144 + 12 + 84 + 78;
        let b = build_backbone(&small_spec(Family::TemporalTransformer, 3), 0).unwrap();
        assert_eq!(b.param_count(), 294 + 24 + 18 + block + 12 + (30 + 5));
        let b = build_backbone(&small_spec(Family::PatchTransformerRecurrent, 3), 0).unwrap();
        assert_eq!(b.param_count(), 294 + 24 + block + 12 + (72 + 36 + 12) + 20);
    }

    #[test]
    fn initialization_is_deterministic() {
        for family in Family::ALL {
            let spec = small_spec(family, 3);
            let a = build_backbone(&spec, 7).unwrap();
            let b = build_backbone(&spec, 7).unwrap();
            assert_eq!(a.params.fingerprint(), b.params.fingerprint());
            assert_ne!(a.params.fingerprint(), build_backbone(&spec, 8).unwrap().params.fingerprint());
        }
    }

    #[test]
    fn rejects_invalid_specs() {
        let mut s = small_spec(Family::TemporalTransformer, 3);
        s.patch_size = 3;
        assert!(matches!(build_backbone(&s, 0), Err(ModelError::Config(_))));
        let mut s = small_spec(Family::Conv2dRecurrent, 3);
        s.embed_dim = 0;
        assert!(build_backbone(&s, 0).is_err());
        assert!("Resnet".parse::<Family>().is_err());
        assert_eq!("conv2drecurrent".parse::<Family>().unwrap(), Family::Conv2dRecurrent);
    }

    #[test]
    fn wrong_clip_length_is_a_dimension_error() {
        let b = build_backbone(&small_spec(Family::Conv2dRecurrent, 3), 0).unwrap();
        let clip = Tensor::zeros(&[4, 3, 8, 8]);
        assert!(matches!(embed(&b, &clip), Err(ModelError::Dimension(_))));
    }

    #[test]
    fn channels_first_layout() {
        let clip = Tensor::from_fn(&[2, 3, 2, 2], |i| i as f64);
        let x = to_channels_first(&[&clip, &clip]);
        assert_eq!(x.shape(), &[3, 4, 2, 2]);
        // channel 1, stacked frame 3 (= clip 1, frame 1), pixel 2
        assert_eq!(x.data()[(4 + 3) * 4 + 2], clip.data()[(3 + 1) * 4 + 2]);
    }

    #[test]
    fn patches_tile_the_frame() {
        let clip = Tensor::from_fn(&[1, 1, 4, 4], |i| i as f64);
        let p = patchify(&[&clip], 2);
        assert_eq!(p.shape(), &[4, 4]);
        assert_eq!(&p.data()[..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&p.data()[12..], &[10.0, 11.0, 14.0, 15.0]);
    }
}
