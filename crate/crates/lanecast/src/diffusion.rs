//! Training mathematics for the latent video diffusion model: the noise
//! schedule, forward noising, band-weighted timestep sampling, the denoising
//! and dynamics-consistency losses, and history-conditioning augmentation.
//!
//! The denoiser is x₀-parameterized throughout: it predicts the clean latent
//! directly, and losses compare predictions against clean targets.

use rand::Rng;
use thiserror::Error;

use crate::nnkit::{Graph, NnError, NodeId, Tensor};
use crate::toyworld::{Frame, FRAME_CHANNELS, FRAME_H, FRAME_LEN, FRAME_W};

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("timestep {t} outside [0, {max})")]
    Timestep { t: usize, max: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Diffusion steps.
pub const T_STEPS: usize = 1000;
/// Latent frame grid: 2×16×32, a 2×2 average pool of the observation frame.
pub const LATENT_C: usize = FRAME_CHANNELS;
pub const LATENT_H: usize = FRAME_H / 2;
pub const LATENT_W: usize = FRAME_W / 2;
pub const LATENT_FRAME: usize = LATENT_C * LATENT_H * LATENT_W;
/// Clean history frames per clip (the `k` index: first predicted frame).
pub const HISTORY_LEN: usize = 9;
/// Predicted future frames per clip.
pub const FUTURE_LEN: usize = 40;
/// Latent frames per clip.
pub const CLIP_LEN: usize = HISTORY_LEN + FUTURE_LEN;
/// Weight of the dynamics-consistency term in the combined objective.
pub const LAMBDA_DYNAMICS: f64 = 0.1;
/// Largest frame interval supervised by the dynamics loss.
pub const DYNAMICS_INTERVALS: usize = 4;
/// Largest history-augmentation timestep drawn during training.
pub const T_AUG_MAX: usize = 200;

/// Linear β schedule with precomputed cumulative signal levels.
#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear() -> NoiseSchedule {
        let (beta_min, beta_max) = (1e-4, 0.02);
        let mut betas = Vec::with_capacity(T_STEPS);
        let mut alpha_bar = Vec::with_capacity(T_STEPS);
        let mut prod = 1.0f64;
        for t in 0..T_STEPS {
            let beta = beta_min + (beta_max - beta_min) * t as f64 / (T_STEPS - 1) as f64;
            prod *= 1.0 - beta;
            betas.push(beta);
            alpha_bar.push(prod);
        }
        NoiseSchedule { betas, alpha_bar }
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// √ᾱ_t, the clean-signal coefficient.
    pub fn signal_coeff(&self, t: usize) -> f32 {
        self.alpha_bar[t].sqrt() as f32
    }

    /// √(1−ᾱ_t), the noise coefficient.
    pub fn noise_coeff(&self, t: usize) -> f32 {
        (1.0 - self.alpha_bar[t]).sqrt() as f32
    }

    fn check(&self, t: usize) -> Result<(), DiffusionError> {
        if t >= self.len() {
            return Err(DiffusionError::Timestep { t, max: self.len() });
        }
        Ok(())
    }
}

/// A full latent clip: `CLIP_LEN` rows of flattened latent frames, history
/// first.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentClip {
    data: Tensor,
}

impl LatentClip {
    pub fn new(data: Tensor) -> Result<LatentClip, DiffusionError> {
        if data.shape() != [CLIP_LEN, LATENT_FRAME] {
            return Err(DiffusionError::Shape(format!(
                "latent clip must be [{CLIP_LEN}, {LATENT_FRAME}], got {:?}",
                data.shape()
            )));
        }
        Ok(LatentClip { data })
    }

    pub fn from_parts(history: &Tensor, future: &Tensor) -> Result<LatentClip, DiffusionError> {
        if history.shape() != [HISTORY_LEN, LATENT_FRAME] {
            return Err(DiffusionError::Shape(format!(
                "history must be [{HISTORY_LEN}, {LATENT_FRAME}], got {:?}",
                history.shape()
            )));
        }
        if future.shape() != [FUTURE_LEN, LATENT_FRAME] {
            return Err(DiffusionError::Shape(format!(
                "future must be [{FUTURE_LEN}, {LATENT_FRAME}], got {:?}",
                future.shape()
            )));
        }
        let mut data = Vec::with_capacity(CLIP_LEN * LATENT_FRAME);
        data.extend_from_slice(history.data());
        data.extend_from_slice(future.data());
        Ok(LatentClip {
            data: Tensor::new(vec![CLIP_LEN, LATENT_FRAME], data).expect("sized above"),
        })
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn history(&self) -> Tensor {
        self.rows(0, HISTORY_LEN)
    }

    pub fn future(&self) -> Tensor {
        self.rows(HISTORY_LEN, FUTURE_LEN)
    }

    fn rows(&self, start: usize, len: usize) -> Tensor {
        let d = &self.data.data()[start * LATENT_FRAME..(start + len) * LATENT_FRAME];
        Tensor::new(vec![len, LATENT_FRAME], d.to_vec()).expect("sized above")
    }
}

/// 2×2 average pooling of observation frames into latent rows, one row per
/// frame.
pub fn encode_latent(frames: &[Frame]) -> Tensor {
    let mut out = Vec::with_capacity(frames.len() * LATENT_FRAME);
    for frame in frames {
        let v = frame.values();
        for ch in 0..LATENT_C {
            for r in 0..LATENT_H {
                for c in 0..LATENT_W {
                    let base = ch * FRAME_H * FRAME_W + 2 * r * FRAME_W + 2 * c;
                    let sum =
                        v[base] + v[base + 1] + v[base + FRAME_W] + v[base + FRAME_W + 1];
                    out.push(sum / 4.0);
                }
            }
        }
    }
    Tensor::new(vec![frames.len(), LATENT_FRAME], out).expect("sized above")
}

/// Nearest-neighbor unpooling back to observation-frame geometry.
pub fn decode_latent(z: &Tensor) -> Result<Vec<Frame>, DiffusionError> {
    let (n, w) = z.dims2();
    if w != LATENT_FRAME {
        return Err(DiffusionError::Shape(format!(
            "latent rows must have {LATENT_FRAME} values, got {w}"
        )));
    }
    let mut frames = Vec::with_capacity(n);
    for i in 0..n {
        let row = &z.data()[i * LATENT_FRAME..(i + 1) * LATENT_FRAME];
        let mut values = vec![0.0f32; FRAME_LEN];
        for ch in 0..LATENT_C {
            for r in 0..LATENT_H {
                for c in 0..LATENT_W {
                    let v = row[ch * LATENT_H * LATENT_W + r * LATENT_W + c];
                    let base = ch * FRAME_H * FRAME_W + 2 * r * FRAME_W + 2 * c;
                    values[base] = v;
                    values[base + 1] = v;
                    values[base + FRAME_W] = v;
                    values[base + FRAME_W + 1] = v;
                }
            }
        }
        frames.push(Frame::from_values(values));
    }
    Ok(frames)
}

/// Forward noising: `√ᾱ_t·z0 + √(1−ᾱ_t)·ε`. Callers pass the block being
/// noised (the future rows during training; history augmentation goes
/// through [`cond_aug`]).
pub fn add_noise(
    z0: &Tensor,
    t: usize,
    eps: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<Tensor, DiffusionError> {
    schedule.check(t)?;
    if z0.shape() != eps.shape() {
        return Err(DiffusionError::Shape(format!(
            "z0 {:?} vs eps {:?}",
            z0.shape(),
            eps.shape()
        )));
    }
    let (s, n) = (schedule.signal_coeff(t), schedule.noise_coeff(t));
    let data = z0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&z, &e)| s * z + n * e)
        .collect();
    Ok(Tensor::new(z0.shape().to_vec(), data).expect("same shape"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TimestepMode {
    Uniform,
    Unbalanced,
}

/// Band-weighted timestep sampling: the high band is drawn with probability
/// `high_prob` (2/3 by default, against its 1/2 natural measure).
#[derive(Clone, Copy, Debug)]
pub struct TimestepSamplerConfig {
    pub mode: TimestepMode,
    pub high_band: (usize, usize),
    pub high_prob: f64,
}

impl TimestepSamplerConfig {
    pub fn unbalanced() -> Self {
        TimestepSamplerConfig {
            mode: TimestepMode::Unbalanced,
            high_band: (T_STEPS / 2, T_STEPS),
            high_prob: 2.0 / 3.0,
        }
    }

    pub fn uniform() -> Self {
        TimestepSamplerConfig {
            mode: TimestepMode::Uniform,
            high_band: (T_STEPS / 2, T_STEPS),
            high_prob: 0.5,
        }
    }
}

pub fn sample_timestep<R: Rng>(rng: &mut R, cfg: &TimestepSamplerConfig) -> usize {
    match cfg.mode {
        TimestepMode::Uniform => rng.random_range(0..T_STEPS),
        TimestepMode::Unbalanced => {
            if rng.random_bool(cfg.high_prob) {
                rng.random_range(cfg.high_band.0..cfg.high_band.1)
            } else {
                rng.random_range(0..cfg.high_band.0)
            }
        }
    }
}

/// History-conditioning augmentation: draws `t_aug` uniformly on
/// `[0, t_aug_max]` and noises the history block. `t_aug = 0` is the exact
/// identity (the inference setting) and draws no noise.
pub fn cond_aug<R: Rng>(
    history: &Tensor,
    rng: &mut R,
    t_aug_max: usize,
    schedule: &NoiseSchedule,
) -> Result<(Tensor, usize), DiffusionError> {
    let t_aug = rng.random_range(0..=t_aug_max);
    if t_aug == 0 {
        return Ok((history.clone(), 0));
    }
    let eps = Tensor::randn(history.shape(), 1.0, rng);
    Ok((add_noise(history, t_aug, &eps, schedule)?, t_aug))
}

fn check_clip_pair(z_true: &Tensor, z_pred: &Tensor, k: usize) -> Result<(), DiffusionError> {
    if z_true.shape() != z_pred.shape() {
        return Err(DiffusionError::Shape(format!(
            "target {:?} vs prediction {:?}",
            z_true.shape(),
            z_pred.shape()
        )));
    }
    let (n, _) = z_true.dims2();
    if k > n {
        return Err(DiffusionError::Shape(format!(
            "first supervised frame {k} beyond clip of {n} frames"
        )));
    }
    Ok(())
}

/// Mean squared error over frames `k..N-1`, averaged over every element of
/// those frames. Frames before `k` never contribute.
pub fn diffusion_loss(z_true: &Tensor, z_pred: &Tensor, k: usize) -> Result<f64, DiffusionError> {
    check_clip_pair(z_true, z_pred, k)?;
    let (n, w) = z_true.dims2();
    if n == k {
        return Ok(0.0);
    }
    let mut acc = 0.0f64;
    for i in k * w..n * w {
        let d = z_pred.data()[i] as f64 - z_true.data()[i] as f64;
        acc += d * d;
    }
    Ok(acc / ((n - k) * w) as f64)
}

fn motion_scale(z_true: &Tensor, j: usize, k: usize) -> f64 {
    let (n, w) = z_true.dims2();
    let mut acc = 0.0f64;
    let mut count = 0usize;
    for i in k..n - j {
        for e in 0..w {
            acc += (z_true.data()[(i + j) * w + e] as f64 - z_true.data()[i * w + e] as f64).abs();
            count += 1;
        }
    }
    (acc / count as f64).max(1e-6)
}

/// Motion-consistency loss: for each interval `j ∈ 1..=K`, the squared error
/// between predicted and true frame-difference fields over frames `k..`,
/// normalized by the mean absolute true motion `s_j` (a constant — it carries
/// no gradient), averaged over pairs and elements, summed over `j`.
pub fn dynamics_loss(
    z_true: &Tensor,
    z_pred: &Tensor,
    intervals: usize,
    k: usize,
) -> Result<f64, DiffusionError> {
    assert!(intervals >= 1, "need at least one interval");
    check_clip_pair(z_true, z_pred, k)?;
    let (n, w) = z_true.dims2();
    if n - k < 2 {
        return Ok(0.0);
    }
    let mut total = 0.0f64;
    for j in 1..=intervals.min(n - k - 1) {
        let s = motion_scale(z_true, j, k);
        let mut acc = 0.0f64;
        let mut count = 0usize;
        for i in k..n - j {
            for e in 0..w {
                let dz = z_true.data()[(i + j) * w + e] as f64 - z_true.data()[i * w + e] as f64;
                let dd = z_pred.data()[(i + j) * w + e] as f64 - z_pred.data()[i * w + e] as f64;
                acc += (dd - dz) * (dd - dz);
                count += 1;
            }
        }
        total += acc / count as f64 / s;
    }
    Ok(total)
}

/// Combined objective: `diffusion_loss + λ·dynamics_loss`.
pub fn total_loss(
    z_true: &Tensor,
    z_pred: &Tensor,
    k: usize,
    intervals: usize,
    lambda: f64,
) -> Result<f64, DiffusionError> {
    Ok(diffusion_loss(z_true, z_pred, k)?
        + lambda * dynamics_loss(z_true, z_pred, intervals, k)?)
}

/// Graph form of [`diffusion_loss`] over future-only blocks (`k` = 0).
pub fn diffusion_loss_node(
    g: &mut Graph,
    pred: NodeId,
    target: NodeId,
) -> Result<NodeId, NnError> {
    let d = g.sub(pred, target)?;
    let sq = g.mul(d, d)?;
    g.mean_all(sq)
}

/// Graph form of [`dynamics_loss`] over future-only blocks. The motion
/// scales come from the clean target and enter the graph as constants.
pub fn dynamics_loss_node(
    g: &mut Graph,
    pred: NodeId,
    target_future: &Tensor,
    intervals: usize,
) -> Result<NodeId, NnError> {
    let (n, w) = target_future.dims2();
    let mut loss = g.constant(Tensor::scalar(0.0));
    if n < 2 {
        return Ok(loss);
    }
    for j in 1..=intervals.min(n - 1) {
        let s = motion_scale(target_future, j, 0);
        let ahead = g.slice_rows(pred, j, n - j)?;
        let behind = g.slice_rows(pred, 0, n - j)?;
        let dd = g.sub(ahead, behind)?;
        let mut td = Vec::with_capacity((n - j) * w);
        for i in 0..n - j {
            for e in 0..w {
                td.push(target_future.data()[(i + j) * w + e] - target_future.data()[i * w + e]);
            }
        }
        let td = g.constant(Tensor::new(vec![n - j, w], td).expect("sized above"));
        let err = g.sub(dd, td)?;
        let sq = g.mul(err, err)?;
        let m = g.mean_all(sq)?;
        let term = g.scale(m, (1.0 / s) as f32)?;
        loss = g.add(loss, term)?;
    }
    Ok(loss)
}

/// Graph form of [`total_loss`] over future-only blocks.
pub fn total_loss_node(
    g: &mut Graph,
    pred: NodeId,
    target_future: &Tensor,
    intervals: usize,
    lambda: f32,
) -> Result<NodeId, NnError> {
    let target = g.constant(target_future.clone());
    let diff = diffusion_loss_node(g, pred, target)?;
    let dyn_ = dynamics_loss_node(g, pred, target_future, intervals)?;
    let scaled = g.scale(dyn_, lambda)?;
    g.add(diff, scaled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnkit::{check_scalar_fn, CoordPlan, GradCheck};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_clip<R: Rng>(n: usize, w: usize, rng: &mut R) -> Tensor {
        Tensor::randn(&[n, w], 1.0, rng)
    }

    #[test]
    fn schedule_meets_its_invariants() {
        let s = NoiseSchedule::linear();
        assert_eq!(s.len(), 1000);
        assert!(s.alpha_bar(0) > 0.999);
        assert!(s.alpha_bar(999) < 0.01);
        for t in 1..1000 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1), "ᾱ must decrease");
        }
        assert!((s.beta(0) - 1e-4).abs() < 1e-12);
        assert!((s.beta(999) - 0.02).abs() < 1e-12);
    }

    #[test]
    fn pooling_examples() {
        let constant = Frame::from_values(vec![0.25; FRAME_LEN]);
        let z = encode_latent(&[constant]);
        assert!(z.data().iter().all(|&v| v == 0.25));

        // checkerboard: every 2×2 block holds two ones and two zeros
        let mut values = vec![0.0f32; FRAME_LEN];
        for ch in 0..FRAME_CHANNELS {
            for r in 0..FRAME_H {
                for c in 0..FRAME_W {
                    if (r + c) % 2 == 0 {
                        values[ch * FRAME_H * FRAME_W + r * FRAME_W + c] = 1.0;
                    }
                }
            }
        }
        let z = encode_latent(&[Frame::from_values(values)]);
        assert!(z.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn decode_then_encode_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let frame = Frame::from_values(
            (0..FRAME_LEN)
                .map(|_| if rng.random_bool(0.4) { 1.0 } else { 0.0 })
                .collect(),
        );
        let z1 = encode_latent(&[frame]);
        let decoded = decode_latent(&z1).unwrap();
        let z2 = encode_latent(&decoded);
        assert_eq!(z1, z2);
        assert_eq!(decoded.len(), 1);
    }

    #[test]
    fn clean_latents_stay_in_unit_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let frames: Vec<Frame> = (0..5)
            .map(|_| {
                Frame::from_values(
                    (0..FRAME_LEN)
                        .map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 })
                        .collect(),
                )
            })
            .collect();
        let z = encode_latent(&frames);
        assert_eq!(z.shape(), [5, LATENT_FRAME]);
        assert!(z.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn add_noise_limits() {
        let s = NoiseSchedule::linear();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z0 = Tensor::new(vec![2, 8], (0..16).map(|i| i as f32 / 16.0).collect()).unwrap();
        let eps = Tensor::randn(&[2, 8], 1.0, &mut rng);

        // t = 0: the clean-signal coefficient is nearly one, so z_t ≈ z0
        assert!(s.alpha_bar(0).sqrt() > 0.9999);
        let z_t = add_noise(&z0, 0, &eps, &s).unwrap();
        let num: f64 = z_t
            .data()
            .iter()
            .zip(z0.data())
            .map(|(&a, &b)| ((a - b) as f64).powi(2))
            .sum();
        let den: f64 = z0.data().iter().map(|&v| (v as f64).powi(2)).sum();
        assert!((num / den).sqrt() < 0.05, "{}", (num / den).sqrt());

        let z_t = add_noise(&z0, 999, &eps, &s).unwrap();
        let num: f64 = z_t
            .data()
            .iter()
            .zip(eps.data())
            .map(|(&a, &e)| ((a - e) as f64).powi(2))
            .sum();
        let den: f64 = eps.data().iter().map(|&e| (e as f64).powi(2)).sum();
        assert!((num / den).sqrt() < 0.1, "{}", (num / den).sqrt());

        assert!(matches!(
            add_noise(&z0, 1000, &eps, &s),
            Err(DiffusionError::Timestep { t: 1000, max: 1000 })
        ));
        let bad = Tensor::zeros(&[2, 7]);
        assert!(matches!(
            add_noise(&z0, 5, &bad, &s),
            Err(DiffusionError::Shape(_))
        ));
    }

    #[test]
    fn noising_is_unbiased_toward_the_scaled_signal() {
        let s = NoiseSchedule::linear();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z0 = Tensor::full(&[4, 64], 0.7);
        let t = 500;
        let n = 2000;
        let mut mean = 0.0f64;
        for _ in 0..n {
            let eps = Tensor::randn(&[4, 64], 1.0, &mut rng);
            let z_t = add_noise(&z0, t, &eps, &s).unwrap();
            mean += z_t.data().iter().map(|&v| v as f64).sum::<f64>() / 256.0;
        }
        mean /= n as f64;
        let expect = s.signal_coeff(t) as f64 * 0.7;
        assert!((mean - expect).abs() < 3e-3, "{mean} vs {expect}");
    }

    #[test]
    fn timestep_bands_match_configuration() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 100_000;
        let unbalanced = TimestepSamplerConfig::unbalanced();
        let mut high = 0usize;
        for _ in 0..n {
            let t = sample_timestep(&mut rng, &unbalanced);
            assert!(t < 1000);
            high += (t >= 500) as usize;
        }
        let frac = high as f64 / n as f64;
        assert!((frac - 2.0 / 3.0).abs() < 0.01, "unbalanced frac {frac}");

        let uniform = TimestepSamplerConfig::uniform();
        let mut high = 0usize;
        for _ in 0..n {
            high += (sample_timestep(&mut rng, &uniform) >= 500) as usize;
        }
        let frac = high as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.01, "uniform frac {frac}");
    }

    #[test]
    fn cond_aug_identity_and_distribution() {
        let s = NoiseSchedule::linear();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let history = Tensor::randn(&[HISTORY_LEN, 16], 1.0, &mut rng);

        // t_aug_max = 0 forces the identity
        let (h, t_aug) = cond_aug(&history, &mut rng, 0, &s).unwrap();
        assert_eq!(t_aug, 0);
        assert_eq!(h, history);

        // χ² uniformity over 10 bins of [0, 200], and independence from the
        // future timestep drawn alongside
        let n = 10_000;
        let cfg = TimestepSamplerConfig::unbalanced();
        let mut bins = [0usize; 10];
        let mut t_augs = Vec::with_capacity(n);
        let mut ts = Vec::with_capacity(n);
        let mut any_noised = false;
        for _ in 0..n {
            let t = sample_timestep(&mut rng, &cfg);
            let (h, t_aug) = cond_aug(&history, &mut rng, T_AUG_MAX, &s).unwrap();
            assert!(t_aug <= T_AUG_MAX);
            if t_aug == 0 {
                assert_eq!(h, history);
            } else {
                any_noised = true;
            }
            bins[t_aug * 10 / (T_AUG_MAX + 1)] += 1;
            t_augs.push(t_aug as f64);
            ts.push(t as f64);
        }
        assert!(any_noised);
        let mut chi2 = 0.0f64;
        for (b, &count) in bins.iter().enumerate() {
            let values_in_bin = (0..=T_AUG_MAX).filter(|v| v * 10 / (T_AUG_MAX + 1) == b).count();
            let expect = n as f64 * values_in_bin as f64 / (T_AUG_MAX + 1) as f64;
            chi2 += (count as f64 - expect).powi(2) / expect;
        }
        // df = 9, critical value at p = 0.01
        assert!(chi2 < 21.67, "χ² = {chi2}");

        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (ma, mb) = (mean(&t_augs), mean(&ts));
        let mut cov = 0.0;
        let mut va = 0.0;
        let mut vb = 0.0;
        for i in 0..n {
            cov += (t_augs[i] - ma) * (ts[i] - mb);
            va += (t_augs[i] - ma).powi(2);
            vb += (ts[i] - mb).powi(2);
        }
        let corr = cov / (va.sqrt() * vb.sqrt());
        assert!(corr.abs() < 0.05, "corr = {corr}");
    }

    #[test]
    fn diffusion_loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z = rand_clip(6, 4, &mut rng);
        assert_eq!(diffusion_loss(&z, &z, 2).unwrap(), 0.0);

        // corrupt only history frames: loss stays zero
        let mut corrupted = z.clone();
        for v in corrupted.data_mut()[..2 * 4].iter_mut() {
            *v += 100.0;
        }
        assert_eq!(diffusion_loss(&z, &corrupted, 2).unwrap(), 0.0);
        assert!(diffusion_loss(&z, &corrupted, 1).unwrap() > 0.0);

        // hand case: two single-element future frames with errors 1 and 3
        let z_true = Tensor::new(vec![2, 1], vec![0.0, 0.0]).unwrap();
        let z_pred = Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap();
        assert_eq!(diffusion_loss(&z_true, &z_pred, 0).unwrap(), 5.0);

        let bad = rand_clip(6, 5, &mut rng);
        assert!(diffusion_loss(&z, &bad, 0).is_err());
    }

    #[test]
    fn dynamics_loss_hand_oracle() {
        // z = (0,1,2), d = (0,1,3), K = 2: j=1 gives mean(0,1)/s₁ with s₁=1;
        // j=2 gives mean(1)/s₂ with s₂=2 → 0.5 + 0.5 = 1
        let z = Tensor::new(vec![3, 1], vec![0.0, 1.0, 2.0]).unwrap();
        let d = Tensor::new(vec![3, 1], vec![0.0, 1.0, 3.0]).unwrap();
        let loss = dynamics_loss(&z, &d, 2, 0).unwrap();
        assert!((loss - 1.0).abs() < 1e-12, "{loss}");

        assert_eq!(dynamics_loss(&z, &z, 2, 0).unwrap(), 0.0);

        // fewer than 2 supervised frames: zero by definition
        assert_eq!(dynamics_loss(&z, &d, 2, 2).unwrap(), 0.0);
    }

    #[test]
    fn dynamics_loss_is_first_order_homogeneous() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let z = rand_clip(7, 5, &mut rng);
        let d = rand_clip(7, 5, &mut rng);
        let base = dynamics_loss(&z, &d, 3, 1).unwrap();
        for c in [2.0, 0.5, 7.0] {
            let zc = z.map(|v| v * c);
            let dc = d.map(|v| v * c);
            let scaled = dynamics_loss(&zc, &dc, 3, 1).unwrap();
            assert!(
                (scaled - c as f64 * base).abs() < 1e-4 * base.max(1.0),
                "c={c}: {scaled} vs {}",
                c as f64 * base
            );
        }
    }

    /// Literal transcription of the defining double loop, recomputed per
    /// (i, j) pair without any shared passes.
    fn naive_dynamics(z: &Tensor, d: &Tensor, intervals: usize, k: usize) -> f64 {
        let (n, w) = z.dims2();
        if n - k < 2 {
            return 0.0;
        }
        let mut total = 0.0;
        for j in 1..=intervals {
            let mut pairs = Vec::new();
            for i in k..n {
                if i + j < n {
                    pairs.push(i);
                }
            }
            if pairs.is_empty() {
                continue;
            }
            let at = |t: &Tensor, i: usize, e: usize| t.data()[i * w + e] as f64;
            let mut s = 0.0;
            for &i in &pairs {
                for e in 0..w {
                    s += (at(z, i + j, e) - at(z, i, e)).abs();
                }
            }
            let s = (s / (pairs.len() * w) as f64).max(1e-6);
            let mut acc = 0.0;
            for &i in &pairs {
                for e in 0..w {
                    let dz = at(z, i + j, e) - at(z, i, e);
                    let dd = at(d, i + j, e) - at(d, i, e);
                    acc += (dd - dz).powi(2);
                }
            }
            total += acc / (pairs.len() * w) as f64 / s;
        }
        total
    }

    #[test]
    fn dynamics_loss_matches_the_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..100 {
            let n = rng.random_range(2..=10);
            let w = rng.random_range(1..=6);
            let k = rng.random_range(0..n - 1);
            let intervals = rng.random_range(1..=4);
            let z = rand_clip(n, w, &mut rng);
            let d = rand_clip(n, w, &mut rng);
            let fast = dynamics_loss(&z, &d, intervals, k).unwrap();
            let slow = naive_dynamics(&z, &d, intervals, k);
            assert!(
                (fast - slow).abs() < 1e-6,
                "trial {trial}: {fast} vs {slow}"
            );
        }
    }

    #[test]
    fn total_loss_combines_linearly() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let z = rand_clip(8, 3, &mut rng);
        let d = rand_clip(8, 3, &mut rng);
        let a = diffusion_loss(&z, &d, 2).unwrap();
        let b = dynamics_loss(&z, &d, 4, 2).unwrap();
        let t = total_loss(&z, &d, 2, 4, 0.1).unwrap();
        assert!((t - (a + 0.1 * b)).abs() < 1e-12);
        assert_eq!(total_loss(&z, &d, 2, 4, 0.0).unwrap(), a);
        assert_eq!(total_loss(&z, &z, 2, 4, 0.1).unwrap(), 0.0);
    }

    #[test]
    fn graph_losses_match_the_pure_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        // a [N, w] clip with k = 3 history rows; graph forms see future only
        let (n, w, k) = (9, 5, 3);
        let z = rand_clip(n, w, &mut rng);
        let d = rand_clip(n, w, &mut rng);
        let z_future =
            Tensor::new(vec![n - k, w], z.data()[k * w..].to_vec()).unwrap();
        let d_future =
            Tensor::new(vec![n - k, w], d.data()[k * w..].to_vec()).unwrap();

        let mut g = Graph::new();
        let pred = g.var(d_future.clone());
        let out = total_loss_node(&mut g, pred, &z_future, 4, 0.1).unwrap();
        let got = g.value(out).data()[0] as f64;
        let want = total_loss(&z, &d, k, 4, 0.1).unwrap();
        assert!((got - want).abs() < 1e-5 * want.max(1.0), "{got} vs {want}");
    }

    #[test]
    fn total_loss_gradient_passes_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let target = rand_clip(6, 4, &mut rng);
        let pred0 = rand_clip(6, 4, &mut rng);
        let report = check_scalar_fn(
            "total_loss",
            &[pred0],
            |g, inputs| total_loss_node(g, inputs[0], &target, 4, 0.1),
            CoordPlan::All,
            GradCheck::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn latent_clip_shape_contracts() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let history = Tensor::randn(&[HISTORY_LEN, LATENT_FRAME], 1.0, &mut rng);
        let future = Tensor::randn(&[FUTURE_LEN, LATENT_FRAME], 1.0, &mut rng);
        let clip = LatentClip::from_parts(&history, &future).unwrap();
        assert_eq!(clip.data().shape(), [CLIP_LEN, LATENT_FRAME]);
        assert_eq!(clip.history(), history);
        assert_eq!(clip.future(), future);

        assert!(LatentClip::new(Tensor::zeros(&[48, LATENT_FRAME])).is_err());
        assert!(LatentClip::from_parts(&future, &history).is_err());
    }
}
