//! Trajectory estimation from frames: a clip-to-waypoints regressor over the
//! full 49-frame window, a history-only 9-frame variant that doubles as the
//! weak driving policy, and the mean waypoint-distance metric used to compare
//! trajectories.
//!
//! Both variants share the frame-encoder + temporal-attention architecture
//! (independent parameters) and regress the 8 future waypoints in the ego
//! frame of the last history tick. The only difference between them is how
//! many frames they see.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::{
    extract_trajectory, window_starts, CorpusError, Episode, Source, Trajectory, CONTEXT_LEN,
};
use crate::diffusion::{CLIP_LEN, HISTORY_LEN};
use crate::featstack::{
    encoder_node, init_encoder, init_linear, init_temporal_trunk, patchify, plain_linear,
    temporal_trunk, FRAME_FEATURE,
};
use crate::nnkit::{AdamState, AdamW, Graph, NnError, NodeId, ParamNodes, ParamStore, Tensor};
use crate::toyworld::Frame;

const OUT_VALUES: usize = 16; // 8 waypoints x 2
/// Fixed output gain: waypoints span tens of meters while trunk activations
/// are order one, so the final projection regresses target/10 implicitly.
const OUT_SCALE: f32 = 10.0;

#[derive(Debug, Error)]
pub enum IdmError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

/// Waypoint regressor over a fixed number of input frames: the 49-frame clip
/// model or the 9-frame history-only model.
pub struct IdmModel {
    params: ParamStore,
    input_len: usize,
}

impl IdmModel {
    pub fn new(seed: u64, input_len: usize) -> Result<IdmModel, IdmError> {
        if input_len != CLIP_LEN && input_len != HISTORY_LEN {
            return Err(IdmError::Invalid(format!(
                "input length must be {CLIP_LEN} (clip) or {HISTORY_LEN} (history), got {input_len}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        init_encoder(&mut p, &mut rng)?;
        p.insert(
            "head.pos",
            Tensor::randn(&[input_len, FRAME_FEATURE], 0.02, &mut rng),
            true,
        )?;
        init_temporal_trunk(&mut p, &mut rng)?;
        init_linear(&mut p, &mut rng, "head.out", FRAME_FEATURE, OUT_VALUES)?;
        Ok(IdmModel {
            params: p,
            input_len,
        })
    }

    pub fn input_len(&self) -> usize {
        self.input_len
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Predicted future waypoints for exactly `input_len` frames.
    pub fn forward(&self, frames: &[Frame]) -> Result<Trajectory, IdmError> {
        if frames.len() != self.input_len {
            return Err(IdmError::Shape(format!(
                "model takes {} frames, got {}",
                self.input_len,
                frames.len()
            )));
        }
        let mut g = Graph::new();
        let nodes = g.bind(&self.params);
        let out = model_node(&mut g, &nodes, frames)?;
        let data = g.value(out).data();
        let mut waypoints = [[0.0f32; 2]; 8];
        for (k, wp) in waypoints.iter_mut().enumerate() {
            wp[0] = data[2 * k];
            wp[1] = data[2 * k + 1];
        }
        Ok(Trajectory { waypoints })
    }
}

/// Scaled prediction node `[1, OUT_VALUES]` for one sample's frames.
fn model_node(
    g: &mut Graph<'_>,
    nodes: &ParamNodes,
    frames: &[Frame],
) -> Result<NodeId, NnError> {
    let mut rows = Vec::with_capacity(frames.len());
    for frame in frames {
        let patches = g.constant(patchify(frame));
        rows.push(encoder_node(g, nodes, patches)?);
    }
    let feats = g.concat_rows(&rows)?;
    let h = temporal_trunk(g, nodes, feats, frames.len())?;
    let out = plain_linear(g, nodes, "head.out", h)?;
    g.scale(out, OUT_SCALE)
}

/// Full-clip inverse dynamics: requires a 49-frame clip model.
pub fn idm_forward(model: &IdmModel, frames: &[Frame]) -> Result<Trajectory, IdmError> {
    if model.input_len != CLIP_LEN {
        return Err(IdmError::Invalid(format!(
            "clip model required (input length {CLIP_LEN}), this one takes {}",
            model.input_len
        )));
    }
    model.forward(frames)
}

/// History-only variant: requires a 9-frame model. This is the weak policy
/// baseline and the closed-loop driver.
pub fn vo_forward(model: &IdmModel, frames: &[Frame]) -> Result<Trajectory, IdmError> {
    if model.input_len != HISTORY_LEN {
        return Err(IdmError::Invalid(format!(
            "history model required (input length {HISTORY_LEN}), this one takes {}",
            model.input_len
        )));
    }
    model.forward(frames)
}

/// Mean Euclidean distance between corresponding waypoints, in meters.
pub fn trajectory_difference(a: &Trajectory, b: &Trajectory) -> f64 {
    let mut total = 0.0f64;
    for (wa, wb) in a.waypoints.iter().zip(b.waypoints.iter()) {
        let dx = wa[0] as f64 - wb[0] as f64;
        let dy = wa[1] as f64 - wb[1] as f64;
        total += (dx * dx + dy * dy).sqrt();
    }
    total / a.waypoints.len() as f64
}

/// One supervised example: `input_len` frames and the future waypoints in the
/// ego frame of the last history tick.
#[derive(Clone, Debug)]
pub struct IdmSample {
    pub frames: Vec<Frame>,
    pub target: Trajectory,
}

/// All training windows of an episode for a model with `input_len` input
/// frames. Window starts and targets are shared across input lengths, so the
/// clip model and the history model train on identical scenario sets.
/// Unlabeled episodes are rejected: they carry no waypoints.
pub fn idm_samples_from_episode(
    ep: &Episode,
    input_len: usize,
) -> Result<Vec<IdmSample>, IdmError> {
    if ep.source == Source::Unlabeled {
        return Err(IdmError::Invalid(
            "unlabeled episodes carry no waypoints and never feed trajectory training".into(),
        ));
    }
    if input_len != CLIP_LEN && input_len != HISTORY_LEN {
        return Err(IdmError::Invalid(format!(
            "input length must be {CLIP_LEN} or {HISTORY_LEN}, got {input_len}"
        )));
    }
    let mut out = Vec::new();
    for t0 in window_starts(ep.len()) {
        out.push(IdmSample {
            frames: ep.frames[t0..t0 + input_len].to_vec(),
            target: extract_trajectory(&ep.poses, t0 + CONTEXT_LEN - 1)?,
        });
    }
    Ok(out)
}

/// Trajectory-regression hyperparameters. The learning rate is `lr_first`
/// for the first half of the epochs and `lr_second` from the midpoint on.
#[derive(Clone, Debug, PartialEq)]
pub struct IdmTrainConfig {
    pub input_len: usize,
    pub epochs: usize,
    pub lr_first: f64,
    pub lr_second: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for IdmTrainConfig {
    fn default() -> IdmTrainConfig {
        IdmTrainConfig {
            input_len: CLIP_LEN,
            epochs: 100,
            lr_first: 1e-4,
            lr_second: 1e-5,
            batch: 8,
            seed: 0,
        }
    }
}

impl IdmTrainConfig {
    pub fn validate(&self) -> Result<(), IdmError> {
        if self.epochs == 0 || self.batch == 0 {
            return Err(IdmError::Invalid(
                "epochs and batch must be at least 1".into(),
            ));
        }
        let lr_ok = |v: f64| v.is_finite() && v > 0.0;
        if !lr_ok(self.lr_first) || !lr_ok(self.lr_second) {
            return Err(IdmError::Invalid("learning rates must be positive".into()));
        }
        if self.input_len != CLIP_LEN && self.input_len != HISTORY_LEN {
            return Err(IdmError::Invalid(format!(
                "input length must be {CLIP_LEN} or {HISTORY_LEN}, got {}",
                self.input_len
            )));
        }
        Ok(())
    }
}

/// Learning rate for a (zero-based) epoch under the two-phase schedule.
pub fn idm_lr(epoch: usize, cfg: &IdmTrainConfig) -> f64 {
    if epoch < cfg.epochs.div_ceil(2) {
        cfg.lr_first
    } else {
        cfg.lr_second
    }
}

/// What a training run measured.
#[derive(Clone, Debug)]
pub struct IdmTrainReport {
    pub epoch_losses: Vec<f64>,
    pub lr_by_epoch: Vec<f64>,
}

/// End-to-end L2 waypoint regression (encoder and head both train).
pub fn train_idm(
    samples: &[IdmSample],
    cfg: &IdmTrainConfig,
) -> Result<(IdmModel, IdmTrainReport), IdmError> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(IdmError::Invalid("no training samples".into()));
    }
    for (i, s) in samples.iter().enumerate() {
        if s.frames.len() != cfg.input_len {
            return Err(IdmError::Shape(format!(
                "sample {i} holds {} frames, config expects {}",
                s.frames.len(),
                cfg.input_len
            )));
        }
        if s.target.flat().iter().any(|v| !v.is_finite()) {
            return Err(IdmError::Invalid(format!("sample {i} target not finite")));
        }
    }

    let mut model = IdmModel::new(cfg.seed, cfg.input_len)?;
    let mut state = AdamState::new();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut lr_by_epoch = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = idm_lr(epoch, cfg);
        lr_by_epoch.push(lr);
        let opt = AdamW {
            lr: lr as f32,
            ..AdamW::default()
        };
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
                let pred = model_node(&mut g, &nodes, &samples[idx].frames)?;
                let target = g.constant(
                    Tensor::new(vec![1, OUT_VALUES], samples[idx].target.flat().to_vec())
                        .expect("target size"),
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
        IdmTrainReport {
            epoch_losses,
            lr_by_epoch,
        },
    ))
}

/// Per-sample trajectory difference against the ground-truth target.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TdRecord {
    pub sample_id: usize,
    pub td: f64,
}

/// Mean trajectory difference of a model's predictions over samples, plus
/// the per-sample records.
pub fn eval_idm(
    model: &IdmModel,
    samples: &[IdmSample],
) -> Result<(f64, Vec<TdRecord>), IdmError> {
    if samples.is_empty() {
        return Err(IdmError::Invalid("no evaluation samples".into()));
    }
    let mut records = Vec::with_capacity(samples.len());
    let mut total = 0.0;
    for (i, s) in samples.iter().enumerate() {
        let pred = model.forward(&s.frames)?;
        let td = trajectory_difference(&pred, &s.target);
        total += td;
        records.push(TdRecord { sample_id: i, td });
    }
    Ok((total / samples.len() as f64, records))
}

/// Evaluation CSV: one row of (sample_id, td) per sample.
pub fn write_td_csv(path: &Path, records: &[TdRecord]) -> Result<(), IdmError> {
    let mut out = String::from("sample_id,td\n");
    for r in records {
        out.push_str(&format!("{},{}\n", r.sample_id, r.td));
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{run_episode, Command, EpisodeControl, EpisodePose, EPISODE_LEN};
    use crate::nnkit::{load_checkpoint, save_checkpoint};
    use crate::toyworld::{render, Track, WorldState};
    use proptest::prelude::*;

    fn traj(points: [[f32; 2]; 8]) -> Trajectory {
        Trajectory { waypoints: points }
    }

    #[test]
    fn trajectory_difference_hand_values() {
        let a = traj([[1.0, 2.0]; 8]);
        assert_eq!(trajectory_difference(&a, &a), 0.0);

        let mut shifted = a;
        for wp in shifted.waypoints.iter_mut() {
            wp[0] += 1.0;
        }
        assert_eq!(trajectory_difference(&a, &shifted), 1.0);
        assert_eq!(trajectory_difference(&shifted, &a), 1.0);

        // 3-4-5 triangle on a single waypoint: mean over 8 = 5/8.
        let mut b = a;
        b.waypoints[3][0] += 3.0;
        b.waypoints[3][1] += 4.0;
        assert!((trajectory_difference(&a, &b) - 5.0 / 8.0).abs() < 1e-12);
    }

    fn trajectory_strategy() -> impl Strategy<Value = Trajectory> {
        proptest::array::uniform8(proptest::array::uniform2(-100.0f32..100.0))
            .prop_map(|waypoints| Trajectory { waypoints })
    }

    proptest! {
        #[test]
        fn trajectory_difference_is_a_metric(
            a in trajectory_strategy(),
            b in trajectory_strategy(),
            c in trajectory_strategy(),
        ) {
            let ab = trajectory_difference(&a, &b);
            let ba = trajectory_difference(&b, &a);
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(ab, ba);
            prop_assert_eq!(trajectory_difference(&a, &a), 0.0);
            if a.waypoints != b.waypoints {
                prop_assert!(ab > 0.0);
            }
            let ac = trajectory_difference(&a, &c);
            let cb = trajectory_difference(&c, &b);
            prop_assert!(ab <= ac + cb + 1e-9);
        }
    }

    #[test]
    fn model_validates_input_lengths_and_is_deterministic() {
        assert!(matches!(
            IdmModel::new(0, 10),
            Err(IdmError::Invalid(_))
        ));

        let clip_model = IdmModel::new(1, CLIP_LEN).unwrap();
        let hist_model = IdmModel::new(1, HISTORY_LEN).unwrap();
        assert_eq!(clip_model.input_len(), CLIP_LEN);
        assert_eq!(hist_model.input_len(), HISTORY_LEN);

        let ep = run_episode(Source::Expert, 3).unwrap();
        let t1 = idm_forward(&clip_model, &ep.frames[..CLIP_LEN]).unwrap();
        let t2 = idm_forward(&clip_model, &ep.frames[..CLIP_LEN]).unwrap();
        assert_eq!(t1, t2);
        assert!(t1.flat().iter().all(|v| v.is_finite()));

        let h1 = vo_forward(&hist_model, &ep.frames[..HISTORY_LEN]).unwrap();
        assert!(h1.flat().iter().all(|v| v.is_finite()));

        // Wrong-length input and wrong-kind model are both rejected.
        assert!(matches!(
            clip_model.forward(&ep.frames[..HISTORY_LEN]),
            Err(IdmError::Shape(_))
        ));
        assert!(matches!(
            idm_forward(&hist_model, &ep.frames[..CLIP_LEN]),
            Err(IdmError::Invalid(_))
        ));
        assert!(matches!(
            vo_forward(&clip_model, &ep.frames[..HISTORY_LEN]),
            Err(IdmError::Invalid(_))
        ));
    }

    #[test]
    fn lr_schedule_switches_at_half() {
        let cfg = IdmTrainConfig::default();
        assert_eq!(cfg.epochs, 100);
        assert_eq!(idm_lr(0, &cfg), 1e-4);
        assert_eq!(idm_lr(49, &cfg), 1e-4);
        assert_eq!(idm_lr(50, &cfg), 1e-5);
        assert_eq!(idm_lr(99, &cfg), 1e-5);

        let one = IdmTrainConfig {
            epochs: 1,
            ..IdmTrainConfig::default()
        };
        assert_eq!(idm_lr(0, &one), 1e-4);
    }

    #[test]
    fn samples_share_targets_across_input_lengths() {
        let ep = run_episode(Source::NonExpert, 12).unwrap();
        let long = idm_samples_from_episode(&ep, CLIP_LEN).unwrap();
        let short = idm_samples_from_episode(&ep, HISTORY_LEN).unwrap();
        assert_eq!(long.len(), short.len());
        assert_eq!(long.len(), window_starts(ep.len()).len());
        for (l, s) in long.iter().zip(short.iter()) {
            assert_eq!(l.frames.len(), CLIP_LEN);
            assert_eq!(s.frames.len(), HISTORY_LEN);
            assert_eq!(l.target, s.target);
            assert_eq!(&l.frames[..HISTORY_LEN], &s.frames[..]);
        }
    }

    #[test]
    fn unlabeled_episodes_are_rejected() {
        let ep = run_episode(Source::Unlabeled, 5).unwrap();
        assert!(matches!(
            idm_samples_from_episode(&ep, CLIP_LEN),
            Err(IdmError::Invalid(_))
        ));
    }

    #[test]
    fn training_is_deterministic() {
        let ep = run_episode(Source::Expert, 40).unwrap();
        let samples = &idm_samples_from_episode(&ep, HISTORY_LEN).unwrap()[..4];
        let cfg = IdmTrainConfig {
            input_len: HISTORY_LEN,
            epochs: 2,
            batch: 2,
            ..IdmTrainConfig::default()
        };
        let (m1, r1) = train_idm(samples, &cfg).unwrap();
        let (m2, r2) = train_idm(samples, &cfg).unwrap();
        assert_eq!(r1.epoch_losses, r2.epoch_losses);
        let hash = |m: &IdmModel| m.params().hash_where(|_| true);
        assert_eq!(hash(&m1), hash(&m2));
        let probe = &samples[0].frames;
        assert_eq!(
            m1.forward(probe).unwrap(),
            m2.forward(probe).unwrap()
        );
    }

    #[test]
    fn training_loss_decreases() {
        let mut samples = Vec::new();
        for seed in [60u64, 61] {
            let ep = run_episode(Source::Expert, seed).unwrap();
            samples.extend(idm_samples_from_episode(&ep, HISTORY_LEN).unwrap());
        }
        let cfg = IdmTrainConfig {
            input_len: HISTORY_LEN,
            epochs: 6,
            lr_first: 1e-3,
            lr_second: 1e-3,
            ..IdmTrainConfig::default()
        };
        let (_, report) = train_idm(&samples, &cfg).unwrap();
        assert_eq!(report.epoch_losses.len(), 6);
        assert!(report.epoch_losses.iter().all(|l| l.is_finite()));
        assert!(
            report.epoch_losses.last().unwrap() < report.epoch_losses.first().unwrap(),
            "losses: {:?}",
            report.epoch_losses
        );
        assert_eq!(report.lr_by_epoch, vec![1e-3; 6]);
    }

    /// Full-schedule training on a 500-sample corpus drops the loss by at
    /// least 80% from its starting value.
    #[test]
    #[ignore = "full 100-epoch training schedule; run explicitly"]
    fn full_schedule_training_reaches_deep_loss_decrease() {
        let mut samples = Vec::new();
        let mut seed = 0u64;
        while samples.len() < 500 {
            let source = if seed % 2 == 0 {
                Source::Expert
            } else {
                Source::NonExpert
            };
            let ep = run_episode(source, 7000 + seed).unwrap();
            samples.extend(idm_samples_from_episode(&ep, CLIP_LEN).unwrap());
            seed += 1;
        }
        samples.truncate(500);
        let (_, report) = train_idm(&samples, &IdmTrainConfig::default()).unwrap();
        let first = report.epoch_losses[0];
        let last = *report.epoch_losses.last().unwrap();
        assert!(
            last < 0.2 * first,
            "loss fell only {first} -> {last}"
        );
    }

    #[test]
    fn single_sample_overfit_reaches_small_error() {
        let ep = run_episode(Source::Expert, 70).unwrap();
        let sample = idm_samples_from_episode(&ep, CLIP_LEN).unwrap()
            .into_iter()
            .next()
            .unwrap();
        let cfg = IdmTrainConfig {
            epochs: 220,
            lr_first: 5e-3,
            lr_second: 1e-3,
            batch: 1,
            ..IdmTrainConfig::default()
        };
        let (model, report) = train_idm(std::slice::from_ref(&sample), &cfg).unwrap();
        let pred = idm_forward(&model, &sample.frames).unwrap();
        let err = trajectory_difference(&pred, &sample.target);
        assert!(
            err < 0.1,
            "overfit error {err} m (loss {:?} -> {:?})",
            report.epoch_losses.first(),
            report.epoch_losses.last()
        );
    }

    /// An episode where nothing moves: identical frames, constant pose.
    fn stationary_episode(track_seed: u64) -> Episode {
        let track = Track::generate(track_seed);
        let mut rng = ChaCha8Rng::seed_from_u64(track_seed);
        let mut state = WorldState::spawn(&track, &mut rng);
        state.ego.speed = 0.0;
        state.npcs.clear();
        let frame = render(&state, &track);
        let pose = EpisodePose {
            x: state.ego.x as f32,
            y: state.ego.y as f32,
            yaw: state.ego.yaw as f32,
        };
        Episode {
            frames: vec![frame; EPISODE_LEN],
            controls: vec![
                EpisodeControl {
                    steer: 0.0,
                    accel: 0.0
                };
                EPISODE_LEN
            ],
            poses: vec![pose; EPISODE_LEN],
            command: Command::Forward,
            source: Source::Expert,
            infraction: 0.0,
            seed: track_seed,
        }
    }

    #[test]
    fn stationary_scene_maps_to_near_zero_displacement() {
        let mut samples = Vec::new();
        for seed in [900u64, 901] {
            let ep = stationary_episode(seed);
            samples.extend(idm_samples_from_episode(&ep, HISTORY_LEN).unwrap());
        }
        for seed in [80u64, 81] {
            let ep = run_episode(Source::Expert, seed).unwrap();
            samples.extend(idm_samples_from_episode(&ep, HISTORY_LEN).unwrap());
        }
        let cfg = IdmTrainConfig {
            input_len: HISTORY_LEN,
            epochs: 12,
            lr_first: 2e-3,
            lr_second: 1e-3,
            ..IdmTrainConfig::default()
        };
        let (model, _) = train_idm(&samples, &cfg).unwrap();

        // Held-out stationary scene on a different track.
        let probe = stationary_episode(902);
        let pred = vo_forward(&model, &probe.frames[..HISTORY_LEN]).unwrap();
        let mean_forward = pred
            .waypoints
            .iter()
            .map(|wp| wp[0].abs() as f64)
            .sum::<f64>()
            / 8.0;
        assert!(
            mean_forward < 1.0,
            "stationary clip predicted {mean_forward} m mean forward displacement: {:?}",
            pred.waypoints
        );
    }

    #[test]
    fn checkpoint_round_trip_preserves_forward() {
        let ep = run_episode(Source::Expert, 33).unwrap();
        let model = IdmModel::new(8, HISTORY_LEN).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("idm.rsck");
        save_checkpoint(model.params(), &path, None).unwrap();

        let mut loaded = IdmModel::new(9, HISTORY_LEN).unwrap();
        load_checkpoint(loaded.params_mut(), &path).unwrap();
        assert_eq!(
            model.forward(&ep.frames[..HISTORY_LEN]).unwrap(),
            loaded.forward(&ep.frames[..HISTORY_LEN]).unwrap()
        );

        // A clip model cannot absorb a history checkpoint: head.pos differs.
        let mut other = IdmModel::new(9, CLIP_LEN).unwrap();
        assert!(load_checkpoint(other.params_mut(), &path).is_err());
    }

    #[test]
    fn td_csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("td.csv");
        let records = vec![
            TdRecord {
                sample_id: 0,
                td: 1.25,
            },
            TdRecord {
                sample_id: 1,
                td: 0.5,
            },
        ];
        write_td_csv(&path, &records).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("sample_id,td"));
        let parsed: Vec<TdRecord> = lines
            .map(|l| {
                let (id, td) = l.split_once(',').unwrap();
                TdRecord {
                    sample_id: id.parse().unwrap(),
                    td: td.parse().unwrap(),
                }
            })
            .collect();
        assert_eq!(parsed, records);
    }
}
