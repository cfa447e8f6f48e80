//! In-memory training corpus. Observation masks are binary, so frames are
//! bit-packed (512 bytes per frame instead of 16 KB) and unpacked on demand.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::toyworld::{Frame, FRAME_LEN};

use super::{
    draw_masks, extract_trajectory, read_episode, window_starts, Command, CorpusError, Episode,
    EpisodeControl, EpisodePose, Manifest, Source, TrainingSample, CONTEXT_LEN, WINDOW_LEN,
};

const PACKED_FRAME_BYTES: usize = FRAME_LEN / 8;

fn pack_frame(frame: &Frame) -> [u8; PACKED_FRAME_BYTES] {
    let mut out = [0u8; PACKED_FRAME_BYTES];
    for (i, &v) in frame.values().iter().enumerate() {
        assert!(v == 0.0 || v == 1.0, "frame value {v} is not a binary mask");
        if v == 1.0 {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

fn unpack_frame(packed: &[u8]) -> Frame {
    let mut values = vec![0.0f32; FRAME_LEN];
    for (i, v) in values.iter_mut().enumerate() {
        if packed[i / 8] >> (i % 8) & 1 == 1 {
            *v = 1.0;
        }
    }
    Frame::from_values(values)
}

#[derive(Clone, Debug)]
pub struct StoredEpisode {
    packed: Vec<u8>,
    len: usize,
    pub poses: Vec<EpisodePose>,
    pub controls: Vec<EpisodeControl>,
    pub command: Command,
    pub source: Source,
    pub infraction: f32,
    pub seed: u64,
}

impl StoredEpisode {
    pub fn from_episode(episode: &Episode) -> StoredEpisode {
        let mut packed = Vec::with_capacity(episode.len() * PACKED_FRAME_BYTES);
        for f in &episode.frames {
            packed.extend_from_slice(&pack_frame(f));
        }
        StoredEpisode {
            packed,
            len: episode.len(),
            poses: episode.poses.clone(),
            controls: episode.controls.clone(),
            command: episode.command,
            source: episode.source,
            infraction: episode.infraction,
            seed: episode.seed,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn frame(&self, t: usize) -> Frame {
        assert!(t < self.len, "frame index {t} out of {}", self.len);
        unpack_frame(&self.packed[t * PACKED_FRAME_BYTES..(t + 1) * PACKED_FRAME_BYTES])
    }

    pub fn frames(&self, range: std::ops::Range<usize>) -> Vec<Frame> {
        range.map(|t| self.frame(t)).collect()
    }

    /// Same contract as [`super::make_sample`], drawing through the shared
    /// mask rule.
    pub fn make_sample<R: Rng>(
        &self,
        t0: usize,
        rng: &mut R,
    ) -> Result<TrainingSample, CorpusError> {
        if t0 + WINDOW_LEN > self.len {
            return Err(CorpusError::WindowOutOfRange { t0, len: self.len });
        }
        let masks = draw_masks(self.source, rng);
        let command = masks.keep_command.then_some(self.command);
        let trajectory = if masks.keep_trajectory {
            Some(extract_trajectory(&self.poses, t0 + CONTEXT_LEN - 1)?)
        } else {
            None
        };
        Ok(TrainingSample {
            context: self.frames(t0..t0 + CONTEXT_LEN),
            future: self.frames(t0 + CONTEXT_LEN..t0 + WINDOW_LEN),
            command,
            trajectory,
            source: self.source,
        })
    }

    pub fn window_starts(&self) -> Vec<usize> {
        window_starts(self.len)
    }
}

#[derive(Clone, Debug)]
pub struct CorpusStore {
    pub episodes: Vec<StoredEpisode>,
    pub master_seed: u64,
}

impl CorpusStore {
    pub fn from_episodes(episodes: &[Episode], master_seed: u64) -> CorpusStore {
        CorpusStore {
            episodes: episodes.iter().map(StoredEpisode::from_episode).collect(),
            master_seed,
        }
    }

    /// Loads every episode listed in the directory's manifest.
    pub fn load(dir: &Path) -> Result<CorpusStore, CorpusError> {
        let manifest = Manifest::load(dir)?;
        let mut episodes = Vec::with_capacity(manifest.episodes.len());
        for entry in &manifest.episodes {
            let ep = read_episode(&dir.join(&entry.file))?;
            if ep.source != entry.source || ep.command != entry.command {
                return Err(CorpusError::InvalidEpisode(format!(
                    "{} disagrees with its manifest entry",
                    entry.file
                )));
            }
            episodes.push(StoredEpisode::from_episode(&ep));
        }
        Ok(CorpusStore {
            episodes,
            master_seed: manifest.master_seed,
        })
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn total_windows(&self) -> usize {
        self.episodes.iter().map(|e| e.window_starts().len()).sum()
    }

    pub fn commands(&self) -> Vec<Command> {
        self.episodes.iter().map(|e| e.command).collect()
    }

    /// Deterministic episode split: returns (train, holdout) index lists,
    /// disjoint and exhaustive, shuffled by `seed`.
    pub fn split_holdout(&self, holdout_frac: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
        assert!((0.0..=1.0).contains(&holdout_frac));
        let mut indices: Vec<usize> = (0..self.episodes.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..indices.len()).rev() {
            let j = rng.random_range(0..=i);
            indices.swap(i, j);
        }
        let n_holdout = (holdout_frac * indices.len() as f64).ceil() as usize;
        let mut holdout: Vec<usize> = indices[..n_holdout.min(indices.len())].to_vec();
        let mut train: Vec<usize> = indices[n_holdout.min(indices.len())..].to_vec();
        holdout.sort_unstable();
        train.sort_unstable();
        (train, holdout)
    }
}
