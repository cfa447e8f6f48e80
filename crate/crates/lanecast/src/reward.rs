//! Video reward estimation: a frozen per-frame encoder feeds a small
//! temporal-attention head that regresses a driving-quality score from a
//! 49-frame clip.
//!
//! The encoder is a two-stage strided patch downsampler (the local-window
//! equivalent of two stride-matched conv layers) pretrained as a frame
//! autoencoder on corpus frames and then frozen; only the head trains on
//! reward targets. Composed with the sampler, [`estimate_reward`] scores a
//! proposed trajectory by generating the future it would produce and scoring
//! the resulting clip.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::{Command, Trajectory};
use crate::diffusion::{NoiseSchedule, CLIP_LEN, HISTORY_LEN};
use crate::featstack::{
    encoder_node, init_encoder, init_linear, init_temporal_trunk, plain_linear,
    temporal_trunk, FRAME_VALUES,
};
use crate::nnkit::{AdamState, AdamW, Graph, NnError, NodeId, ParamNodes, ParamStore, Tensor};
use crate::sampler::{generate, Denoise, SamplerConfig, SamplerError};
use crate::toyworld::Frame;

pub use crate::featstack::{patchify, FRAME_FEATURE};

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid reward input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

/// One supervised example: a full clip and the infraction-style score of the
/// episode it was cut from.
#[derive(Clone, Debug)]
pub struct RewardSample {
    pub frames: Vec<Frame>,
    pub target: f32,
}

impl RewardSample {
    pub fn validate(&self) -> Result<(), RewardError> {
        if self.frames.len() != CLIP_LEN {
            return Err(RewardError::Shape(format!(
                "reward sample needs {CLIP_LEN} frames, got {}",
                self.frames.len()
            )));
        }
        if !(0.0..=1.0).contains(&self.target) || !self.target.is_finite() {
            return Err(RewardError::Invalid(format!(
                "target {} outside [0, 1]",
                self.target
            )));
        }
        Ok(())
    }
}

/// Reward head over per-frame features `[CLIP_LEN, FRAME_FEATURE]`: the
/// shared temporal trunk followed by a sigmoid scalar projection.
fn head_node(
    g: &mut Graph<'_>,
    nodes: &ParamNodes,
    feats: NodeId,
) -> Result<NodeId, NnError> {
    let h = temporal_trunk(g, nodes, feats, CLIP_LEN)?;
    let logit = plain_linear(g, nodes, "head.mlp2", h)?;
    g.sigmoid(logit)
}

fn is_frozen_stack(name: &str) -> bool {
    name.starts_with("enc.") || name.starts_with("dec.")
}

/// Frozen-encoder reward model. `enc.*` / `dec.*` parameters belong to the
/// frame autoencoder (the decoder is only used during pretraining); `head.*`
/// parameters are the trainable reward head.
pub struct RewardModel {
    params: ParamStore,
}

impl RewardModel {
    pub fn new(seed: u64) -> Result<RewardModel, RewardError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();

        init_encoder(&mut p, &mut rng)?;
        init_linear(&mut p, &mut rng, "dec.out", FRAME_FEATURE, FRAME_VALUES)?;
        p.insert(
            "head.pos",
            Tensor::randn(&[CLIP_LEN, FRAME_FEATURE], 0.02, &mut rng),
            true,
        )?;
        init_temporal_trunk(&mut p, &mut rng)?;
        // The output layer starts at zero so an untrained model scores every
        // clip exactly sigmoid(0) = 0.5: the baseline expresses no preference
        // between clips. Its gradient is nonzero, so training moves it off
        // zero on the first step.
        p.insert("head.mlp2.w", Tensor::zeros(&[FRAME_FEATURE, 1]), true)?;
        p.insert("head.mlp2.b", Tensor::zeros(&[1]), true)?;

        Ok(RewardModel { params: p })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Hash of the encoder parameters; unchanged by reward training.
    pub fn encoder_hash(&self) -> u32 {
        self.params.hash_where(|n| n.starts_with("enc."))
    }

    /// Per-frame feature from the (normally frozen) encoder.
    pub fn encode_frame(&self, frame: &Frame) -> Tensor {
        let mut g = Graph::new();
        let nodes = g.bind(&self.params);
        let patches = g.constant(patchify(frame));
        let out = encoder_node(&mut g, &nodes, patches).expect("encoder graph");
        g.value(out).clone()
    }

    /// Features for a full clip: `[CLIP_LEN, FRAME_FEATURE]`.
    pub fn encode_clip(&self, frames: &[Frame]) -> Result<Tensor, RewardError> {
        if frames.len() != CLIP_LEN {
            return Err(RewardError::Shape(format!(
                "clip needs {CLIP_LEN} frames, got {}",
                frames.len()
            )));
        }
        let mut g = Graph::new();
        let nodes = g.bind(&self.params);
        let mut rows = Vec::with_capacity(CLIP_LEN);
        for frame in frames {
            let patches = g.constant(patchify(frame));
            rows.push(encoder_node(&mut g, &nodes, patches)?);
        }
        let all = g.concat_rows(&rows)?;
        Ok(g.value(all).clone())
    }

    /// Scores a 49-frame clip; output strictly inside (0, 1).
    pub fn score(&self, frames: &[Frame]) -> Result<f32, RewardError> {
        if frames.len() != CLIP_LEN {
            return Err(RewardError::Shape(format!(
                "clip needs {CLIP_LEN} frames, got {}",
                frames.len()
            )));
        }
        let mut g = Graph::new();
        let nodes = g.bind(&self.params);
        let mut rows = Vec::with_capacity(CLIP_LEN);
        for frame in frames {
            let patches = g.constant(patchify(frame));
            rows.push(encoder_node(&mut g, &nodes, patches)?);
        }
        let feats = g.concat_rows(&rows)?;
        let out = head_node(&mut g, &nodes, feats)?;
        Ok(g.value(out).data()[0])
    }
}

/// Autoencoder pretraining of the encoder: reconstruct raw frame values from
/// the 64-dim bottleneck. Returns the per-step batch losses. Leaves `enc.*`
/// and `dec.*` trainable; callers freeze afterwards.
pub fn pretrain_encoder(
    model: &mut RewardModel,
    pool: &[&Frame],
    steps: usize,
    lr: f64,
    batch: usize,
    seed: u64,
) -> Result<Vec<f64>, RewardError> {
    if pool.is_empty() || batch == 0 {
        return Err(RewardError::Invalid(
            "pretraining needs a nonempty frame pool and batch".into(),
        ));
    }
    model.params.set_trainable_where(is_frozen_stack, true);
    model.params.set_trainable_where(|n| n.starts_with("head."), false);

    let opt = AdamW {
        lr: lr as f32,
        ..AdamW::default()
    };
    let mut state = AdamState::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut g = Graph::new();
        let nodes = g.bind(&model.params);
        let mut total = g.constant(Tensor::scalar(0.0));
        for _ in 0..batch {
            let frame = pool[rng.random_range(0..pool.len())];
            let patches = g.constant(patchify(frame));
            let feat = encoder_node(&mut g, &nodes, patches)?;
            let recon = plain_linear(&mut g, &nodes, "dec.out", feat)?;
            let target = g.constant(
                Tensor::new(vec![1, FRAME_VALUES], frame.values().to_vec()).expect("frame size"),
            );
            let diff = g.sub(recon, target)?;
            let sq = g.mul(diff, diff)?;
            let mse = g.mean_all(sq)?;
            total = g.add(total, mse)?;
        }
        let loss = g.scale(total, 1.0 / batch as f32)?;
        g.backward(loss)?;
        let loss_val = g.value(loss).data()[0] as f64;
        let grads = g.collect_grads(&nodes);
        drop(g);
        opt.step(&mut model.params, &grads, &mut state);
        losses.push(loss_val);
    }
    Ok(losses)
}

/// Reward training hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    pub pretrain_batch: usize,
}

impl Default for RewardTrainConfig {
    fn default() -> RewardTrainConfig {
        RewardTrainConfig {
            epochs: 20,
            lr: 1e-3,
            batch: 8,
            seed: 0,
            pretrain_steps: 200,
            pretrain_lr: 1e-3,
            pretrain_batch: 8,
        }
    }
}

impl RewardTrainConfig {
    pub fn validate(&self) -> Result<(), RewardError> {
        if self.epochs == 0 || self.batch == 0 || self.pretrain_batch == 0 {
            return Err(RewardError::Invalid(
                "epochs and batch sizes must be at least 1".into(),
            ));
        }
        let lr_ok = |v: f64| v.is_finite() && v > 0.0;
        if !lr_ok(self.lr) || !lr_ok(self.pretrain_lr) {
            return Err(RewardError::Invalid("learning rates must be positive".into()));
        }
        Ok(())
    }
}

/// What a training run measured.
#[derive(Clone, Debug)]
pub struct RewardTrainReport {
    pub pretrain_losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
    /// Encoder hash at freeze time; equals the trained model's
    /// [`RewardModel::encoder_hash`] by the freezing contract.
    pub encoder_hash: u32,
}

/// Full training pipeline: pretrain the frame autoencoder on the sample
/// frames, freeze it, then regress the head to the sample targets with MSE.
pub fn train_reward(
    samples: &[RewardSample],
    cfg: &RewardTrainConfig,
) -> Result<(RewardModel, RewardTrainReport), RewardError> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(RewardError::Invalid("no training samples".into()));
    }
    for s in samples {
        s.validate()?;
    }

    let mut model = RewardModel::new(cfg.seed)?;

    let pool: Vec<&Frame> = samples.iter().flat_map(|s| s.frames.iter()).collect();
    let pretrain_losses = pretrain_encoder(
        &mut model,
        &pool,
        cfg.pretrain_steps,
        cfg.pretrain_lr,
        cfg.pretrain_batch,
        cfg.seed ^ 0xAE,
    )?;

    model.params.set_trainable_where(is_frozen_stack, false);
    model.params.set_trainable_where(|n| n.starts_with("head."), true);
    let encoder_hash = model.encoder_hash();

    // The encoder is frozen from here on, so per-sample features are fixed
    // and computed once.
    let feats: Vec<Tensor> = samples
        .iter()
        .map(|s| model.encode_clip(&s.frames))
        .collect::<Result<_, _>>()?;

    let opt = AdamW {
        lr: cfg.lr as f32,
        ..AdamW::default()
    };
    let mut state = AdamState::new();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37));
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let mut epoch_sum = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let mut g = Graph::new();
            let nodes = g.bind(&model.params);
            let mut total = g.constant(Tensor::scalar(0.0));
            for &idx in chunk {
                let f = g.constant(feats[idx].clone());
                let pred = head_node(&mut g, &nodes, f)?;
                let target = g.constant(
                    Tensor::new(vec![1, 1], vec![samples[idx].target]).expect("scalar target"),
                );
                let diff = g.sub(pred, target)?;
                let sq = g.mul(diff, diff)?;
                let mse = g.mean_all(sq)?;
                total = g.add(total, mse)?;
            }
            let loss = g.scale(total, 1.0 / chunk.len() as f32)?;
            g.backward(loss)?;
            let loss_val = g.value(loss).data()[0] as f64;
            let grads = g.collect_grads(&nodes);
            drop(g);
            opt.step(&mut model.params, &grads, &mut state);
            epoch_sum += loss_val * chunk.len() as f64;
        }
        epoch_losses.push(epoch_sum / samples.len() as f64);
    }

    Ok((
        model,
        RewardTrainReport {
            pretrain_losses,
            epoch_losses,
            encoder_hash,
        },
    ))
}

/// Scores a proposed trajectory: generate the future it would produce, stitch
/// it onto the history, and score the whole clip.
pub fn estimate_reward<D: Denoise + ?Sized>(
    world: &D,
    reward: &RewardModel,
    schedule: &NoiseSchedule,
    history: &[Frame],
    command: Option<Command>,
    trajectory: Trajectory,
    cfg: &SamplerConfig,
) -> Result<f32, RewardError> {
    if history.len() != HISTORY_LEN {
        return Err(RewardError::Shape(format!(
            "history must hold {HISTORY_LEN} frames, got {}",
            history.len()
        )));
    }
    let future = generate(world, schedule, history, command, Some(trajectory), cfg)?;
    let mut clip = history.to_vec();
    clip.extend(future);
    reward.score(&clip)
}

/// A judged pair: a clip produced by expert behavior and one produced by
/// non-expert behavior in a comparable scenario.
#[derive(Clone, Debug)]
pub struct RewardPair {
    pub expert: Vec<Frame>,
    pub other: Vec<Frame>,
}

/// One scored pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairRecord {
    pub pair_id: usize,
    pub reward_expert: f32,
    pub reward_other: f32,
    /// 1 if the expert clip scored higher, 0.5 on a tie, 0 otherwise.
    pub credit: f64,
}

/// Fraction of pairs where the first reward beats the second; ties count
/// half. An empty slice scores 0.5 (no evidence either way).
pub fn pair_accuracy(scores: &[(f64, f64)]) -> f64 {
    if scores.is_empty() {
        return 0.5;
    }
    let total: f64 = scores
        .iter()
        .map(|&(e, o)| {
            if e > o {
                1.0
            } else if e == o {
                0.5
            } else {
                0.0
            }
        })
        .sum();
    total / scores.len() as f64
}

/// Scores every pair with the model and returns (accuracy, per-pair records).
pub fn eval_reward_pairs(
    model: &RewardModel,
    pairs: &[RewardPair],
) -> Result<(f64, Vec<PairRecord>), RewardError> {
    let mut records = Vec::with_capacity(pairs.len());
    let mut scores = Vec::with_capacity(pairs.len());
    for (pair_id, pair) in pairs.iter().enumerate() {
        let reward_expert = model.score(&pair.expert)?;
        let reward_other = model.score(&pair.other)?;
        let credit = pair_accuracy(&[(reward_expert as f64, reward_other as f64)]);
        scores.push((reward_expert as f64, reward_other as f64));
        records.push(PairRecord {
            pair_id,
            reward_expert,
            reward_other,
            credit,
        });
    }
    Ok((pair_accuracy(&scores), records))
}

/// Writes pair records as CSV: `pair_id,reward_expert,reward_nonexpert,correct`.
pub fn write_pair_csv(path: &Path, records: &[PairRecord]) -> Result<(), RewardError> {
    let mut out = String::from("pair_id,reward_expert,reward_nonexpert,correct\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.pair_id, r.reward_expert, r.reward_other, r.credit
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}
