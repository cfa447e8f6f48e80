//! Episode recording and training-window extraction: three agent sources,
//! yaw-based command labels, ego-frame waypoint targets, conditioning
//! dropout with fixed statistics, and bit-exact on-disk formats.

mod collect;
mod io;
mod store;

pub use collect::{collect, run_episode, splitmix64};
pub use io::{read_episode, write_episode, Manifest, ManifestEntry};
pub use store::{CorpusStore, StoredEpisode};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::toyworld::{wrap_angle, Frame};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("trajectory window [{t0}, {t0}+40] out of range for {len} poses")]
    WindowOutOfRange { t0: usize, len: usize },
    #[error("episode invalid: {0}")]
    InvalidEpisode(String),
    #[error("bad magic (expected RSEP)")]
    BadMagic,
    #[error("unsupported episode format version {0}")]
    BadVersion(u16),
    #[error("episode file checksum mismatch")]
    Checksum,
    #[error("episode file truncated")]
    Truncated,
    #[error("empty ledger: {0}")]
    Score(#[from] crate::toyworld::ToyworldError),
    #[error("manifest: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Episode length in frames (12 s at 10 Hz).
pub const EPISODE_LEN: usize = 120;
/// Visual context frames per training window.
pub const CONTEXT_LEN: usize = 9;
/// Prediction-target frames per training window.
pub const FUTURE_LEN: usize = 40;
/// Frames per training window.
pub const WINDOW_LEN: usize = CONTEXT_LEN + FUTURE_LEN;
/// Tick stride between consecutive windows cut from one episode.
pub const WINDOW_STRIDE: usize = 10;
/// Strict yaw-change threshold for Left/Right command labels (15°).
pub const COMMAND_YAW_THRESHOLD: f64 = 0.26;
/// Sampling weight for turn-labeled episodes relative to Forward ones.
pub const TURN_SAMPLING_WEIGHT: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Source {
    Unlabeled,
    Expert,
    NonExpert,
}

impl Source {
    pub fn code(self) -> u8 {
        match self {
            Source::Unlabeled => 0,
            Source::Expert => 1,
            Source::NonExpert => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Source> {
        match c {
            0 => Some(Source::Unlabeled),
            1 => Some(Source::Expert),
            2 => Some(Source::NonExpert),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Command {
    Left,
    Forward,
    Right,
}

impl Command {
    pub fn code(self) -> u8 {
        match self {
            Command::Left => 0,
            Command::Forward => 1,
            Command::Right => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Command> {
        match c {
            0 => Some(Command::Left),
            1 => Some(Command::Forward),
            2 => Some(Command::Right),
            _ => None,
        }
    }
}

/// Recorded ego pose, stored at storage precision.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodePose {
    pub x: f32,
    pub y: f32,
    pub yaw: f32,
}

/// Recorded control, stored at storage precision.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeControl {
    pub steer: f32,
    pub accel: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub frames: Vec<Frame>,
    pub controls: Vec<EpisodeControl>,
    pub poses: Vec<EpisodePose>,
    pub command: Command,
    pub source: Source,
    pub infraction: f32,
    pub seed: u64,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.controls.len() != self.frames.len() || self.poses.len() != self.frames.len() {
            return Err(CorpusError::InvalidEpisode(format!(
                "length mismatch: {} frames, {} controls, {} poses",
                self.frames.len(),
                self.controls.len(),
                self.poses.len()
            )));
        }
        if !(0.0..=1.0).contains(&self.infraction) {
            return Err(CorpusError::InvalidEpisode(format!(
                "infraction {} outside [0, 1]",
                self.infraction
            )));
        }
        Ok(())
    }
}

/// Future waypoints in the ego frame at the window start: 8 points at 2 Hz
/// covering 4 s, the first one 0.5 s ahead.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Trajectory {
    pub waypoints: [[f32; 2]; 8],
}

impl Trajectory {
    pub fn flat(&self) -> [f32; 16] {
        let mut out = [0.0; 16];
        for (i, wp) in self.waypoints.iter().enumerate() {
            out[2 * i] = wp[0];
            out[2 * i + 1] = wp[1];
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub context: Vec<Frame>,
    pub future: Vec<Frame>,
    pub command: Option<Command>,
    pub trajectory: Option<Trajectory>,
    pub source: Source,
}

/// Cumulative signed yaw change over a pose window, mapped to a command with
/// a strict ±15° threshold. Left turns have positive yaw change.
pub fn label_command(poses: &[EpisodePose]) -> Command {
    let mut total = 0.0f64;
    for w in poses.windows(2) {
        total += wrap_angle(w[1].yaw as f64 - w[0].yaw as f64);
    }
    if total > COMMAND_YAW_THRESHOLD {
        Command::Left
    } else if total < -COMMAND_YAW_THRESHOLD {
        Command::Right
    } else {
        Command::Forward
    }
}

/// World-frame poses at ticks t0+5, t0+10, …, t0+40, rotated and translated
/// into the ego frame at t0.
pub fn extract_trajectory(poses: &[EpisodePose], t0: usize) -> Result<Trajectory, CorpusError> {
    if t0 + 40 >= poses.len() {
        return Err(CorpusError::WindowOutOfRange {
            t0,
            len: poses.len(),
        });
    }
    let origin = poses[t0];
    let (sin, cos) = (origin.yaw as f64).sin_cos();
    let mut waypoints = [[0.0f32; 2]; 8];
    for (k, wp) in waypoints.iter_mut().enumerate() {
        let p = poses[t0 + 5 * (k + 1)];
        let dx = p.x as f64 - origin.x as f64;
        let dy = p.y as f64 - origin.y as f64;
        wp[0] = (cos * dx + sin * dy) as f32;
        wp[1] = (-sin * dx + cos * dy) as f32;
    }
    Ok(Trajectory { waypoints })
}

/// Tick offsets at which training windows start within an episode of `len`
/// frames: every `WINDOW_STRIDE` ticks while a full window still fits.
pub fn window_starts(len: usize) -> Vec<usize> {
    if len < WINDOW_LEN {
        return vec![];
    }
    (0..=len - WINDOW_LEN).step_by(WINDOW_STRIDE).collect()
}

/// One conditioning-dropout draw. This is the single source of truth for the
/// masking statistics; every sampling path goes through it. Draw order:
/// command keep (p = 0.5, all sources), then the source rule for the
/// trajectory — absent for Unlabeled, kept with p = 0.5 for Expert, always
/// kept for NonExpert.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskDraw {
    pub keep_command: bool,
    pub keep_trajectory: bool,
}

pub fn draw_masks<R: Rng>(source: Source, rng: &mut R) -> MaskDraw {
    let keep_command = rng.random_bool(0.5);
    let keep_trajectory = match source {
        Source::Unlabeled => false,
        Source::Expert => rng.random_bool(0.5),
        Source::NonExpert => true,
    };
    MaskDraw {
        keep_command,
        keep_trajectory,
    }
}

/// Cuts the window at `t0` and applies conditioning dropout via
/// [`draw_masks`]. The waypoint frame is the last context tick.
pub fn make_sample<R: Rng>(
    episode: &Episode,
    t0: usize,
    rng: &mut R,
) -> Result<TrainingSample, CorpusError> {
    if t0 + WINDOW_LEN > episode.len() {
        return Err(CorpusError::WindowOutOfRange {
            t0,
            len: episode.len(),
        });
    }
    let masks = draw_masks(episode.source, rng);
    let command = masks.keep_command.then_some(episode.command);
    let trajectory = if masks.keep_trajectory {
        Some(extract_trajectory(&episode.poses, t0 + CONTEXT_LEN - 1)?)
    } else {
        None
    };
    Ok(TrainingSample {
        context: episode.frames[t0..t0 + CONTEXT_LEN].to_vec(),
        future: episode.frames[t0 + CONTEXT_LEN..t0 + WINDOW_LEN].to_vec(),
        command,
        trajectory,
        source: episode.source,
    })
}

/// Per-episode draw weights: turn-labeled episodes are upweighted 5×.
pub fn sampling_weights(commands: &[Command]) -> Vec<f64> {
    commands
        .iter()
        .map(|c| match c {
            Command::Left | Command::Right => TURN_SAMPLING_WEIGHT,
            Command::Forward => 1.0,
        })
        .collect()
}

/// Draws indices proportionally to fixed nonnegative weights.
#[derive(Clone, Debug)]
pub struct WeightedSampler {
    cumulative: Vec<f64>,
}

impl WeightedSampler {
    /// `None` when the weights are empty or sum to zero.
    pub fn new(weights: &[f64]) -> Option<WeightedSampler> {
        let mut cumulative = Vec::with_capacity(weights.len());
        let mut total = 0.0;
        for &w in weights {
            assert!(w >= 0.0 && w.is_finite(), "weights must be finite and >= 0");
            total += w;
            cumulative.push(total);
        }
        if cumulative.is_empty() || total <= 0.0 {
            return None;
        }
        Some(WeightedSampler { cumulative })
    }

    pub fn draw<R: Rng>(&self, rng: &mut R) -> usize {
        let total = *self.cumulative.last().unwrap();
        let u: f64 = rng.random_range(0.0..total);
        match self
            .cumulative
            .binary_search_by(|v| v.partial_cmp(&u).unwrap())
        {
            Ok(i) => (i + 1).min(self.cumulative.len() - 1),
            Err(i) => i,
        }
    }
}
