//! Deterministic DDIM sampling with decreasing classifier-free guidance and
//! multi-round long-horizon rollout.
//!
//! The sampler turns a trained denoiser into a video generator: starting from
//! seeded Gaussian future latents it repeatedly asks the model for a clean
//! estimate under both the given conditions and the fully nulled conditions,
//! blends the two with a guidance weight that decays linearly over the steps,
//! and advances the latents with a deterministic (eta = 0) DDIM update.
//! `rollout` chains several generations by reusing the last frames of one
//! round as the context of the next.

use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{
    splitmix64, write_episode, Command, CorpusError, Episode, EpisodeControl, EpisodePose, Source,
    Trajectory,
};
use crate::denoiser::{ConditionSet, DenoiserError, WorldModel};
use crate::diffusion::{
    decode_latent, encode_latent, DiffusionError, NoiseSchedule, FUTURE_LEN, HISTORY_LEN,
    LATENT_FRAME, T_STEPS,
};
use crate::nnkit::Tensor;
use crate::toyworld::Frame;
use rand::SeedableRng;

/// Number of denoiser evaluations in a standard generation.
pub const DEFAULT_STEPS: usize = 50;
/// Guidance weight at the first (noisiest) step.
pub const DEFAULT_GUIDANCE_START: f32 = 7.5;
/// Guidance weight at the last step.
pub const DEFAULT_GUIDANCE_END: f32 = 1.0;
/// Clamp bounds applied to the guided clean estimate, slightly wider than the
/// unit data range so guidance overshoot cannot blow up the trajectory.
pub const GUIDED_CLAMP: (f32, f32) = (-0.1, 1.1);

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("invalid sampler config: {0}")]
    Config(String),
    #[error("ddim step must move toward 0: t_prev {t_prev} not below t {t}")]
    Ordering { t: usize, t_prev: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("sidecar serialization failure: {0}")]
    Json(#[from] serde_json::Error),
}

/// Sampling hyperparameters. The noise schedule is passed separately to the
/// operations so the config stays plain data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance_start: f32,
    pub guidance_end: f32,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> SamplerConfig {
        SamplerConfig {
            steps: DEFAULT_STEPS,
            guidance_start: DEFAULT_GUIDANCE_START,
            guidance_end: DEFAULT_GUIDANCE_END,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        if self.steps == 0 {
            return Err(SamplerError::Config("steps must be at least 1".into()));
        }
        if self.steps >= T_STEPS {
            return Err(SamplerError::Config(format!(
                "steps {} must be below the schedule length {T_STEPS}",
                self.steps
            )));
        }
        if !self.guidance_start.is_finite() || !self.guidance_end.is_finite() {
            return Err(SamplerError::Config("guidance weights must be finite".into()));
        }
        if self.guidance_end < 0.0 || self.guidance_start < self.guidance_end {
            return Err(SamplerError::Config(format!(
                "need guidance_start >= guidance_end >= 0, got {} and {}",
                self.guidance_start, self.guidance_end
            )));
        }
        Ok(())
    }
}

/// Anything that can produce the conditional/unconditional pair of clean
/// estimates for noised future latents. Implemented by [`WorldModel`]; tests
/// substitute oracles with known answers.
pub trait Denoise {
    fn denoise_pair(
        &self,
        z_t: &Tensor,
        t: usize,
        cond: &ConditionSet,
    ) -> Result<(Tensor, Tensor), DenoiserError>;
}

impl Denoise for WorldModel {
    fn denoise_pair(
        &self,
        z_t: &Tensor,
        t: usize,
        cond: &ConditionSet,
    ) -> Result<(Tensor, Tensor), DenoiserError> {
        self.guidance_pair(z_t, t, cond)
    }
}

/// Guidance weight for one step: linear interpolation from `guidance_start`
/// at step 0 down to `guidance_end` at the final step. A single-step run uses
/// `guidance_start`.
pub fn guidance_weight(step_index: usize, cfg: &SamplerConfig) -> f32 {
    assert!(
        step_index < cfg.steps,
        "step index {step_index} outside 0..{}",
        cfg.steps
    );
    if cfg.steps == 1 {
        return cfg.guidance_start;
    }
    let frac = step_index as f32 / (cfg.steps - 1) as f32;
    cfg.guidance_start + (cfg.guidance_end - cfg.guidance_start) * frac
}

/// Classifier-free guidance on clean estimates:
/// `uncond + w * (cond - uncond)`, clamped to [`GUIDED_CLAMP`].
///
/// `w = 1` and `w = 0` short-circuit to the conditional and unconditional
/// branches so those identities hold exactly rather than up to rounding.
pub fn guided_x0(z0_cond: &Tensor, z0_uncond: &Tensor, w: f32) -> Result<Tensor, SamplerError> {
    if z0_cond.shape() != z0_uncond.shape() {
        return Err(SamplerError::Shape(format!(
            "guidance branches disagree: {:?} vs {:?}",
            z0_cond.shape(),
            z0_uncond.shape()
        )));
    }
    let (lo, hi) = GUIDED_CLAMP;
    let data: Vec<f32> = if w == 1.0 {
        z0_cond.data().iter().map(|v| v.clamp(lo, hi)).collect()
    } else if w == 0.0 {
        z0_uncond.data().iter().map(|v| v.clamp(lo, hi)).collect()
    } else {
        z0_cond
            .data()
            .iter()
            .zip(z0_uncond.data())
            .map(|(&c, &u)| (u + w * (c - u)).clamp(lo, hi))
            .collect()
    };
    Ok(Tensor::new(z0_cond.shape().to_vec(), data).expect("length preserved"))
}

/// Deterministic DDIM update from timestep `t` to `t_prev` using the clean
/// estimate `x0_hat`:
///
/// ```text
/// eps_hat = (z_t - sqrt(abar_t) * x0_hat) / sqrt(1 - abar_t)
/// z_prev  = sqrt(abar_prev) * x0_hat + sqrt(1 - abar_prev) * eps_hat
/// ```
///
/// Stepping to `t_prev = 0` returns `x0_hat` exactly (the schedule boundary
/// is treated as fully clean).
pub fn ddim_step(
    z_t: &Tensor,
    x0_hat: &Tensor,
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
) -> Result<Tensor, SamplerError> {
    if t >= schedule.len() {
        return Err(SamplerError::Diffusion(DiffusionError::Timestep {
            t,
            max: schedule.len(),
        }));
    }
    if t_prev >= t {
        return Err(SamplerError::Ordering { t, t_prev });
    }
    if z_t.shape() != x0_hat.shape() {
        return Err(SamplerError::Shape(format!(
            "noised latents {:?} vs clean estimate {:?}",
            z_t.shape(),
            x0_hat.shape()
        )));
    }
    if t_prev == 0 {
        return Ok(x0_hat.clone());
    }
    let ab_t = schedule.alpha_bar(t);
    let ab_p = schedule.alpha_bar(t_prev);
    let (a_t, s_t) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
    let (a_p, s_p) = (ab_p.sqrt(), (1.0 - ab_p).sqrt());
    let data: Vec<f32> = z_t
        .data()
        .iter()
        .zip(x0_hat.data())
        .map(|(&z, &x0)| {
            let (z, x0) = (z as f64, x0 as f64);
            let eps_hat = (z - a_t * x0) / s_t;
            (a_p * x0 + s_p * eps_hat) as f32
        })
        .collect();
    Ok(Tensor::new(z_t.shape().to_vec(), data).expect("length preserved"))
}

/// The evaluation timesteps for a run: `steps` values uniformly spaced from
/// `T_STEPS - 1` downward with stride `T_STEPS / steps`. The final update
/// after the last evaluation always targets timestep 0.
pub fn timesteps(steps: usize) -> Vec<usize> {
    assert!(
        (1..T_STEPS).contains(&steps),
        "steps {steps} outside 1..{T_STEPS}"
    );
    let stride = (T_STEPS / steps).max(1);
    (0..steps).map(|i| T_STEPS - 1 - i * stride).collect()
}

/// Generates future frames conditioned on history frames and
/// optional command / trajectory.
///
/// History is encoded without augmentation noise (`t_aug = 0`), future
/// latents start from a seeded standard Gaussian, and every step runs the
/// guidance pair, blends with [`guided_x0`], and advances with [`ddim_step`].
/// Decoded frames are clamped to `[0, 1]`.
pub fn generate<D: Denoise + ?Sized>(
    model: &D,
    schedule: &NoiseSchedule,
    history: &[Frame],
    command: Option<Command>,
    trajectory: Option<Trajectory>,
    cfg: &SamplerConfig,
) -> Result<Vec<Frame>, SamplerError> {
    cfg.validate()?;
    if history.len() != HISTORY_LEN {
        return Err(SamplerError::Shape(format!(
            "history must hold {HISTORY_LEN} frames, got {}",
            history.len()
        )));
    }
    let mut cond = ConditionSet::new(encode_latent(history));
    if let Some(c) = command {
        cond = cond.with_command(c);
    }
    if let Some(tr) = trajectory {
        cond = cond.with_trajectory(tr);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut z = Tensor::randn(&[FUTURE_LEN, LATENT_FRAME], 1.0, &mut rng);
    let ts = timesteps(cfg.steps);
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = if i + 1 < ts.len() { ts[i + 1] } else { 0 };
        let (z0_cond, z0_uncond) = model.denoise_pair(&z, t, &cond)?;
        let x0 = guided_x0(&z0_cond, &z0_uncond, guidance_weight(i, cfg))?;
        z = ddim_step(&z, &x0, t, t_prev, schedule)?;
    }

    let mut frames = decode_latent(&z)?;
    for frame in &mut frames {
        let clamped: Vec<f32> = frame.values().iter().map(|v| v.clamp(0.0, 1.0)).collect();
        *frame = Frame::from_values(clamped);
    }
    Ok(frames)
}

/// Conditions for one rollout round.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RoundCondition {
    pub command: Option<Command>,
    pub trajectory: Option<Trajectory>,
}

/// Seed for one rollout round: the first round reuses the configured seed so
/// a single-round rollout is identical to [`generate`]; later rounds derive
/// fresh seeds through a mixing step.
fn round_seed(seed: u64, round: usize) -> u64 {
    if round == 0 {
        seed
    } else {
        splitmix64(seed ^ round as u64)
    }
}

/// Long-horizon generation: one [`generate`] per round, where every round
/// after the first uses the last [`HISTORY_LEN`] frames generated so far as
/// its context. Returns all rounds concatenated.
pub fn rollout<D: Denoise + ?Sized>(
    model: &D,
    schedule: &NoiseSchedule,
    history: &[Frame],
    rounds: &[RoundCondition],
    cfg: &SamplerConfig,
) -> Result<Vec<Frame>, SamplerError> {
    if rounds.is_empty() {
        return Err(SamplerError::Config("rollout needs at least one round".into()));
    }
    let mut out: Vec<Frame> = Vec::with_capacity(rounds.len() * FUTURE_LEN);
    let mut context: Vec<Frame> = history.to_vec();
    for (r, rc) in rounds.iter().enumerate() {
        let round_cfg = SamplerConfig {
            seed: round_seed(cfg.seed, r),
            ..cfg.clone()
        };
        let frames = generate(model, schedule, &context, rc.command, rc.trajectory, &round_cfg)?;
        context = frames[FUTURE_LEN - HISTORY_LEN..].to_vec();
        out.extend(frames);
    }
    Ok(out)
}

/// Sidecar metadata stored next to an exported generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub seed: u64,
    pub steps: usize,
    pub guidance_start: f32,
    pub guidance_end: f32,
    /// Command code (`Command::code`) if the generation was command-conditioned.
    pub command: Option<u8>,
    /// Flattened waypoints (x0, y0, x1, y1, ...) if trajectory-conditioned.
    pub trajectory: Option<Vec<f32>>,
    /// Hash of the configuration that produced the generating model.
    pub config_hash: u32,
}

impl GenerationRecord {
    pub fn new(
        cfg: &SamplerConfig,
        command: Option<Command>,
        trajectory: Option<&Trajectory>,
        config_hash: u32,
    ) -> GenerationRecord {
        GenerationRecord {
            seed: cfg.seed,
            steps: cfg.steps,
            guidance_start: cfg.guidance_start,
            guidance_end: cfg.guidance_end,
            command: command.map(Command::code),
            trajectory: trajectory.map(|t| t.flat().to_vec()),
            config_hash,
        }
    }
}

/// Writes generated frames as an episode-format fragment (frames only:
/// controls and poses are zeroed, the source is `Unlabeled`) plus a JSON
/// sidecar with the generation metadata. Returns the two paths.
pub fn write_generated(
    dir: &Path,
    stem: &str,
    frames: &[Frame],
    record: &GenerationRecord,
) -> Result<(PathBuf, PathBuf), SamplerError> {
    std::fs::create_dir_all(dir)?;
    let command = record
        .command
        .and_then(Command::from_code)
        .unwrap_or(Command::Forward);
    let episode = Episode {
        frames: frames.to_vec(),
        controls: vec![EpisodeControl { steer: 0.0, accel: 0.0 }; frames.len()],
        poses: vec![EpisodePose { x: 0.0, y: 0.0, yaw: 0.0 }; frames.len()],
        command,
        source: Source::Unlabeled,
        infraction: 0.0,
        seed: record.seed,
    };
    let episode_path = dir.join(format!("{stem}.rsep"));
    write_episode(&episode_path, &episode)?;
    let sidecar_path = dir.join(format!("{stem}.json"));
    std::fs::write(&sidecar_path, serde_json::to_vec_pretty(record)?)?;
    Ok((episode_path, sidecar_path))
}
