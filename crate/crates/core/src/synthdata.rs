//! Deterministic top-down "driving world" videos with per-frame ego-action labels.
//!
//! An agent drives on a 32×32 torus following a scripted Markov sequence of the
//! seven ego actions. Four frames before every action change an indicator block
//! in the top-left corner lights up in the colour of the upcoming action, so the
//! near future is recoverable from the past frames.

use std::fs;
use std::io::{self, Read};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::write_atomic;
use crate::numerics::Tensor;

pub const NUM_ACTIONS: usize = 7;
pub const CHANNELS: usize = 3;
pub const FRAME_SIZE: usize = 32;
pub const FRAME_LEN: usize = CHANNELS * FRAME_SIZE * FRAME_SIZE;
pub const FPS: u32 = 12;
/// Frames of warning the indicator gives before an action change.
pub const CUE_LEAD: usize = 4;
pub const MIN_DWELL: usize = 6;
pub const MAX_DWELL: usize = 18;
pub const MIN_VIDEO_LENGTH: usize = 24;
/// Side of the square indicator block.
pub const CUE_SIZE: usize = 4;

const VIDEO_MAGIC: &[u8; 8] = b"TDVIDEO\0";
const VIDEO_FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 * 2 + 8 + 4 * 5;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("sampling error: {0}")]
    Sampling(String),
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> SynthError + '_ {
    move |source| SynthError::Io { path: path.to_path_buf(), source }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Action {
    Move = 0,
    Stop = 1,
    TurnLeft = 2,
    TurnRight = 3,
    Overtake = 4,
    MoveLeft = 5,
    MoveRight = 6,
}

impl Action {
    pub const ALL: [Action; NUM_ACTIONS] = [
        Action::Move,
        Action::Stop,
        Action::TurnLeft,
        Action::TurnRight,
        Action::Overtake,
        Action::MoveLeft,
        Action::MoveRight,
    ];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Action> {
        Self::ALL.get(id).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::Move => "Move",
            Action::Stop => "Stop",
            Action::TurnLeft => "TurnLeft",
            Action::TurnRight => "TurnRight",
            Action::Overtake => "Overtake",
            Action::MoveLeft => "MoveLeft",
            Action::MoveRight => "MoveRight",
        }
    }

    /// Relative weight of choosing this action at a transition.
    fn transition_weight(self) -> f64 {
        match self {
            Action::Move => 4.0,
            Action::Stop => 2.0,
            _ => 1.0,
        }
    }

    /// Indicator colour announcing this action.
    pub fn cue_color(self) -> [f32; 3] {
        match self {
            Action::Move => [0.0, 0.9, 0.0],
            Action::Stop => [0.9, 0.0, 0.0],
            Action::TurnLeft => [0.0, 0.0, 0.9],
            Action::TurnRight => [0.9, 0.9, 0.0],
            Action::Overtake => [0.0, 0.9, 0.9],
            Action::MoveLeft => [0.9, 0.0, 0.9],
            Action::MoveRight => [0.9, 0.5, 0.0],
        }
    }
}

/// Everything the renderer needs to draw one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct WorldState {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
    pub action: Action,
    pub frames_until_change: usize,
    /// Upcoming action and the number of frames until it starts (1..=CUE_LEAD).
    pub pending_cue: Option<(Action, usize)>,
}

impl WorldState {
    fn advance(&mut self) {
        const TURN_RATE: f64 = 0.2;
        const ACCEL: f64 = 0.5;
        let approach = |v: f64, target: f64| {
            if v < target {
                (v + ACCEL).min(target)
            } else {
                (v - ACCEL).max(target)
            }
        };
        let mut lateral = 0.0;
        match self.action {
            Action::Move => self.speed = approach(self.speed, 1.0),
            Action::Stop => self.speed = approach(self.speed, 0.0),
            Action::TurnLeft => {
                self.heading += TURN_RATE;
                self.speed = approach(self.speed, 0.8);
            }
            Action::TurnRight => {
                self.heading -= TURN_RATE;
                self.speed = approach(self.speed, 0.8);
            }
            Action::Overtake => {
                self.speed = approach(self.speed, 1.8);
                lateral = 0.2;
            }
            Action::MoveLeft => {
                self.speed = approach(self.speed, 1.0);
                lateral = 0.5;
            }
            Action::MoveRight => {
                self.speed = approach(self.speed, 1.0);
                lateral = -0.5;
            }
        }
        // image rows grow downward, so "forward" is (cos h, -sin h)
        let (s, c) = self.heading.sin_cos();
        self.x += self.speed * c - lateral * s;
        self.y += -self.speed * s - lateral * c;
        let size = FRAME_SIZE as f64;
        self.x = self.x.rem_euclid(size);
        self.y = self.y.rem_euclid(size);
    }
}

/// Renders one frame as `[3, 32, 32]` values in `[0, 1]`.
pub fn render(state: &WorldState) -> Vec<f32> {
    const AGENT: [f32; 3] = [1.0, 1.0, 1.0];
    const TICK: [f32; 3] = [1.0, 0.3, 0.3];
    let n = FRAME_SIZE;
    let mut frame = vec![0.0f32; FRAME_LEN];
    let put = |frame: &mut [f32], row: usize, col: usize, color: [f32; 3]| {
        for (ch, v) in color.iter().enumerate() {
            frame[(ch * n + row) * n + col] = *v;
        }
    };
    let wrap = |v: isize| v.rem_euclid(n as isize) as usize;
    let (cx, cy) = (state.x.floor() as isize, state.y.floor() as isize);
    for dy in -2..2 {
        for dx in -2..2 {
            put(&mut frame, wrap(cy + dy), wrap(cx + dx), AGENT);
        }
    }
    let (s, c) = state.heading.sin_cos();
    let tx = (state.x + 3.0 * c).round() as isize;
    let ty = (state.y - 3.0 * s).round() as isize;
    put(&mut frame, wrap(ty), wrap(tx), TICK);
    if let Some((action, _)) = state.pending_cue {
        for row in 0..CUE_SIZE {
            for col in 0..CUE_SIZE {
                put(&mut frame, row, col, action.cue_color());
            }
        }
    }
    frame
}

/// Whether the indicator block is lit, and in which colour.
pub fn detect_cue(frame: &[f32]) -> Option<Action> {
    let n = FRAME_SIZE;
    Action::ALL.into_iter().find(|a| {
        let color = a.cue_color();
        (0..CUE_SIZE).all(|row| {
            (0..CUE_SIZE).all(|col| (0..CHANNELS).all(|ch| frame[(ch * n + row) * n + col] == color[ch]))
        })
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticVideo {
    pub id: u32,
    pub seed: u64,
    pub fps: u32,
    /// `length × 3 × 32 × 32` row-major.
    frames: Vec<f32>,
    labels: Vec<u8>,
}

impl SyntheticVideo {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn frames(&self) -> &[f32] {
        &self.frames
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        &self.frames[i * FRAME_LEN..(i + 1) * FRAME_LEN]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Frames `[start, start + len)` as a `[len, 3, 32, 32]` tensor.
    pub fn clip_tensor(&self, start: usize, len: usize) -> Tensor {
        let data = self.frames[start * FRAME_LEN..(start + len) * FRAME_LEN]
            .iter()
            .map(|&v| v as f64)
            .collect();
        Tensor::new(vec![len, CHANNELS, FRAME_SIZE, FRAME_SIZE], data).expect("clip in bounds")
    }

    /// Serialized file image: header, little-endian `f32` frames, `u8` labels.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.frames.len() * 4 + self.labels.len());
        out.extend_from_slice(VIDEO_MAGIC);
        out.extend_from_slice(&VIDEO_FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        for v in [CHANNELS as u32, FRAME_SIZE as u32, FRAME_SIZE as u32, self.fps, self.id] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.frames {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.labels);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self, SynthError> {
        let bad = |reason: String| SynthError::Format { path: path.to_path_buf(), reason };
        if bytes.len() < HEADER_LEN || &bytes[..8] != VIDEO_MAGIC {
            return Err(bad("missing video header".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(8);
        if version != VIDEO_FORMAT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let length = u32_at(12) as usize;
        let seed = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
        let dims = [u32_at(24), u32_at(28), u32_at(32)];
        if dims != [CHANNELS as u32, FRAME_SIZE as u32, FRAME_SIZE as u32] {
            return Err(bad(format!("unexpected frame dims {dims:?}")));
        }
        let (fps, id) = (u32_at(36), u32_at(40));
        let expected = HEADER_LEN + length * FRAME_LEN * 4 + length;
        if bytes.len() != expected {
            return Err(bad(format!("expected {expected} bytes, found {}", bytes.len())));
        }
        let frame_bytes = &bytes[HEADER_LEN..HEADER_LEN + length * FRAME_LEN * 4];
        let frames = frame_bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let labels = bytes[HEADER_LEN + length * FRAME_LEN * 4..].to_vec();
        if labels.iter().any(|&l| l as usize >= NUM_ACTIONS) {
            return Err(bad("label out of range".into()));
        }
        Ok(Self { id, seed, fps, frames, labels })
    }

    pub fn save(&self, path: &Path) -> Result<(), SynthError> {
        write_atomic(path, &self.to_bytes()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, SynthError> {
        let mut bytes = Vec::new();
        fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(io_err(path))?;
        Self::from_bytes(&bytes, path)
    }
}

fn pick_next(rng: &mut ChaCha8Rng, current: Option<Action>) -> Action {
    let candidates: Vec<Action> = Action::ALL.into_iter().filter(|a| Some(*a) != current).collect();
    let total: f64 = candidates.iter().map(|a| a.transition_weight()).sum();
    let mut r = rng.gen_range(0.0..total);
    for a in &candidates {
        r -= a.transition_weight();
        if r < 0.0 {
            return *a;
        }
    }
    *candidates.last().unwrap()
}

/// Generates one video; identical `(seed, length)` gives identical bytes.
pub fn generate_video(seed: u64, length: usize) -> Result<SyntheticVideo, SynthError> {
    generate_video_with_id(0, seed, length)
}

fn generate_video_with_id(id: u32, seed: u64, length: usize) -> Result<SyntheticVideo, SynthError> {
    if length < MIN_VIDEO_LENGTH {
        return Err(SynthError::Config(format!(
            "video length must be at least {MIN_VIDEO_LENGTH}, got {length}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // the schedule runs past the end so cues for just-out-of-view changes still show
    let horizon = length + CUE_LEAD + 1;
    let mut schedule: Vec<Action> = Vec::with_capacity(horizon + MAX_DWELL);
    let mut current = None;
    while schedule.len() < horizon {
        let next = pick_next(&mut rng, current);
        let dwell = rng.gen_range(MIN_DWELL..=MAX_DWELL);
        schedule.extend(std::iter::repeat_n(next, dwell));
        current = Some(next);
    }
    let change_after = |f: usize| (f + 1..schedule.len()).find(|&g| schedule[g] != schedule[g - 1]);

    let mut state = WorldState {
        x: rng.gen_range(0.0..FRAME_SIZE as f64),
        y: rng.gen_range(0.0..FRAME_SIZE as f64),
        heading: rng.gen_range(0.0..std::f64::consts::TAU),
        speed: 0.0,
        action: schedule[0],
        frames_until_change: 0,
        pending_cue: None,
    };
    let mut frames = Vec::with_capacity(length * FRAME_LEN);
    let mut labels = Vec::with_capacity(length);
    for (f, &action) in schedule.iter().enumerate().take(length) {
        state.action = action;
        state.advance();
        let next_change = change_after(f);
        state.frames_until_change = next_change.map_or(usize::MAX, |g| g - f);
        state.pending_cue = next_change
            .filter(|&g| g - f <= CUE_LEAD)
            .map(|g| (schedule[g], g - f));
        frames.extend(render(&state));
        labels.push(action as u8);
    }
    Ok(SyntheticVideo { id, seed, fps: FPS, frames, labels })
}

/// Sub-seed for video `id` under `master_seed` (splitmix64 finalizer).
pub fn video_seed(master_seed: u64, id: u32) -> u64 {
    let mut z = master_seed ^ (u64::from(id).wrapping_add(1)).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn generate_dataset(master_seed: u64, n_videos: usize, length: usize) -> Result<Vec<SyntheticVideo>, SynthError> {
    (0..n_videos as u32)
        .map(|id| generate_video_with_id(id, video_seed(master_seed, id), length))
        .collect()
}

/// Video ids assigned to each split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<u32>,
    pub val: Vec<u32>,
    pub test: Vec<u32>,
}

/// Shuffles video ids under `seed` and partitions them; rounding remainders go to train.
pub fn split_dataset(ids: &[u32], ratios: (f64, f64, f64), seed: u64) -> Result<DatasetSplit, SynthError> {
    let (tr, va, te) = ratios;
    if [tr, va, te].iter().any(|r| !(0.0..=1.0).contains(r)) || ((tr + va + te) - 1.0).abs() > 1e-9 {
        return Err(SynthError::Config(format!("split ratios must be in [0,1] and sum to 1, got {ratios:?}")));
    }
    let n = ids.len();
    let n_val = (n as f64 * va + 1e-9).floor() as usize;
    let n_test = (n as f64 * te + 1e-9).floor() as usize;
    if n < 3 || n_val == 0 || n_test == 0 {
        return Err(SynthError::Config(format!("{n} videos cannot fill train/val/test splits")));
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = shuffled.split_off(n - n_test);
    let val = shuffled.split_off(n - n_test - n_val);
    Ok(DatasetSplit { train: shuffled, val, test })
}

/// Past window, the longer past+future window, and the aligned labels.
#[derive(Clone, Debug)]
pub struct ClipSample {
    /// `[t, 3, 32, 32]`
    pub past: Tensor,
    /// `[t + t_pred, 3, 32, 32]`
    pub combined: Tensor,
    pub past_labels: Vec<u8>,
    pub future_labels: Vec<u8>,
    pub video_id: u32,
    pub start: usize,
}

impl ClipSample {
    /// Majority past label, ties to the lowest action id.
    pub fn majority_label(&self) -> u8 {
        let mut counts = [0usize; NUM_ACTIONS];
        for &l in &self.past_labels {
            counts[l as usize] += 1;
        }
        let best = counts.iter().copied().max().unwrap_or(0);
        counts.iter().position(|&c| c == best).unwrap_or(0) as u8
    }
}

pub fn clip_at(video: &SyntheticVideo, start: usize, t: usize, t_pred: usize) -> Result<ClipSample, SynthError> {
    if t == 0 || start + t + t_pred > video.len() {
        return Err(SynthError::Sampling(format!(
            "clip of {t}+{t_pred} frames at {start} does not fit video {} of length {}",
            video.id,
            video.len()
        )));
    }
    let combined = video.clip_tensor(start, t + t_pred);
    Ok(ClipSample {
        past: video.clip_tensor(start, t),
        combined,
        past_labels: video.labels[start..start + t].to_vec(),
        future_labels: video.labels[start + t..start + t + t_pred].to_vec(),
        video_id: video.id,
        start,
    })
}

/// Draws a clip with a uniformly random valid start.
pub fn sample_clip<R: Rng>(video: &SyntheticVideo, t: usize, t_pred: usize, rng: &mut R) -> Result<ClipSample, SynthError> {
    if t + t_pred > video.len() {
        return Err(SynthError::Sampling(format!(
            "clip of {} frames is longer than video {} ({} frames)",
            t + t_pred,
            video.id,
            video.len()
        )));
    }
    let start = rng.gen_range(0..=video.len() - t - t_pred);
    clip_at(video, start, t, t_pred)
}

/// On-disk dataset index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub master_seed: u64,
    pub video_length: usize,
    pub split: DatasetSplit,
}

pub fn video_file_name(id: u32) -> String {
    format!("video_{id:04}.bin")
}

/// Writes every video plus `manifest.json` into `dir`.
pub fn save_dataset(dir: &Path, videos: &[SyntheticVideo], manifest: &Manifest) -> Result<(), SynthError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for v in videos {
        v.save(&dir.join(video_file_name(v.id)))?;
    }
    let path = dir.join("manifest.json");
    let json = serde_json::to_vec_pretty(manifest).expect("manifest serializes");
    write_atomic(&path, &json).map_err(io_err(&path))
}

pub fn load_manifest(dir: &Path) -> Result<Manifest, SynthError> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|e| SynthError::Format { path, reason: e.to_string() })
}

pub fn load_videos(dir: &Path, ids: &[u32]) -> Result<Vec<SyntheticVideo>, SynthError> {
    ids.iter().map(|&id| SyntheticVideo::load(&dir.join(video_file_name(id)))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_byte_deterministic() {
        let a = generate_video(11, 48).unwrap();
        let b = generate_video(11, 48).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_ne!(a.to_bytes(), generate_video(12, 48).unwrap().to_bytes());
    }

    #[test]
    fn frames_are_unit_range_and_labels_match_length() {
        let v = generate_video(3, 60).unwrap();
        assert_eq!(v.labels().len(), 60);
        assert_eq!(v.frames().len(), 60 * FRAME_LEN);
        assert!(v.frames().iter().all(|x| x.is_finite() && (0.0..=1.0).contains(x)));
        assert!(generate_video(3, 23).is_err());
    }

    #[test]
    fn cue_precedes_every_transition() {
        for seed in 0..20 {
            let v = generate_video(seed, 240).unwrap();
            let labels = v.labels();
            for f in 1..labels.len() {
                if labels[f] != labels[f - 1] {
                    let next = Action::from_id(labels[f] as usize).unwrap();
                    for k in 1..=CUE_LEAD {
                        assert_eq!(detect_cue(v.frame(f - k)), Some(next), "seed {seed} frame {f} lead {k}");
                    }
                }
            }
        }
    }

    #[test]
    fn cue_only_when_change_is_imminent() {
        for seed in 0..20 {
            let v = generate_video(seed, 240).unwrap();
            let labels = v.labels();
            // frames whose full look-ahead window lies inside the video
            for i in 0..labels.len() - CUE_LEAD {
                let upcoming = (i + 1..=i + CUE_LEAD).any(|f| labels[f] != labels[f - 1]);
                assert_eq!(detect_cue(v.frame(i)).is_some(), upcoming, "seed {seed} frame {i}");
            }
        }
    }

    #[test]
    fn dwell_times_within_bounds() {
        let v = generate_video(5, 480).unwrap();
        let labels = v.labels();
        let mut runs = vec![];
        let mut run = 1;
        for f in 1..labels.len() {
            if labels[f] == labels[f - 1] {
                run += 1;
            } else {
                runs.push(run);
                run = 1;
            }
        }
        // the first run starts at the beginning of the schedule, so it is a full dwell
        assert!(runs.iter().all(|&r| (MIN_DWELL..=MAX_DWELL).contains(&r)), "{runs:?}");
    }

    #[test]
    fn label_histogram_covers_all_classes() {
        let videos = generate_dataset(0, 42, 240).unwrap();
        let mut counts = [0usize; NUM_ACTIONS];
        let mut total = 0;
        for v in &videos {
            for &l in v.labels() {
                counts[l as usize] += 1;
                total += 1;
            }
        }
        assert!(total >= 10_000);
        for (a, &c) in counts.iter().enumerate() {
            assert!(c as f64 / total as f64 >= 0.02, "class {a}: {c}/{total}");
        }
    }

    #[test]
    fn split_counts() {
        let ids: Vec<u32> = (0..10).collect();
        let s = split_dataset(&ids, (0.6, 0.2, 0.2), 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (6, 2, 2));
        let s = split_dataset(&ids[..5], (0.6, 0.2, 0.2), 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (3, 1, 1));
        assert!(split_dataset(&ids[..2], (0.6, 0.2, 0.2), 1).is_err());
        assert!(split_dataset(&ids, (0.6, 0.2, 0.3), 1).is_err());
        assert_eq!(s, split_dataset(&ids[..5], (0.6, 0.2, 0.2), 1).unwrap());
    }

    #[test]
    fn only_start_for_exact_length() {
        let v = generate_video(1, 24).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            assert_eq!(sample_clip(&v, 12, 12, &mut rng).unwrap().start, 0);
        }
        assert!(matches!(sample_clip(&v, 13, 12, &mut rng), Err(SynthError::Sampling(_))));
    }

    #[test]
    fn majority_label_ties_to_lowest() {
        let v = generate_video(1, 24).unwrap();
        let mut c = clip_at(&v, 0, 4, 1).unwrap();
        c.past_labels = vec![3, 1, 3, 1];
        assert_eq!(c.majority_label(), 1);
    }

    #[test]
    fn file_round_trip_and_rejection() {
        let dir = tempfile::tempdir().unwrap();
        let videos = generate_dataset(9, 5, 30).unwrap();
        let ids: Vec<u32> = videos.iter().map(|v| v.id).collect();
        let manifest = Manifest {
            version: 1,
            master_seed: 9,
            video_length: 30,
            split: split_dataset(&ids, (0.6, 0.2, 0.2), 9).unwrap(),
        };
        save_dataset(dir.path(), &videos, &manifest).unwrap();
        assert_eq!(load_manifest(dir.path()).unwrap(), manifest);
        let back = load_videos(dir.path(), &ids).unwrap();
        assert_eq!(back, videos);

        let mut bytes = videos[0].to_bytes();
        bytes.truncate(bytes.len() - 1);
        assert!(SyntheticVideo::from_bytes(&bytes, Path::new("x")).is_err());
    }
}
