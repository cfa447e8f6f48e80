//! The conditional world-model network: predicts clean future latents from
//! noised ones, conditioned on history frames, an optional maneuver command,
//! and an optional waypoint trajectory.
//!
//! The network is a token mixer: every latent frame becomes one token,
//! command and trajectory each contribute one more, and a stack of
//! alternating temporal self-attention and per-token MLP blocks mixes the
//! sequence. Absent conditions are replaced by learned null embeddings — that
//! substitution is what "unconditional" means for classifier-free guidance.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::{Command, Trajectory};
use crate::diffusion::{FUTURE_LEN, HISTORY_LEN, LATENT_FRAME, T_STEPS};
use crate::nnkit::layers::{attention_mix, layer_norm, sinusoidal_embedding};
use crate::nnkit::{
    lora_linear, merge_lora, Graph, LowRankAdapter, NnError, NodeId, ParamNodes, ParamStore,
    Tensor,
};

#[derive(Debug, Error)]
pub enum DenoiserError {
    #[error("bad configuration: {0}")]
    Config(String),
    #[error("timestep {t} outside [0, {max})")]
    Timestep { t: usize, max: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Tokens in the mixing sequence: history frames, future frames, command,
/// trajectory.
pub const N_TOKENS: usize = HISTORY_LEN + FUTURE_LEN + 2;
/// Row index of the command token.
pub const CMD_TOKEN: usize = HISTORY_LEN + FUTURE_LEN;
/// Row index of the trajectory token.
pub const TRAJ_TOKEN: usize = CMD_TOKEN + 1;
/// Number of maneuver commands in the embedding table.
pub const N_COMMANDS: usize = 3;
/// Waypoints per trajectory.
pub const N_WAYPOINTS: usize = 8;

/// Training stages: action-free pretraining, adapter-based action
/// fine-tuning with a frozen backbone, and full joint training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    ActionFree,
    AdapterAction,
    Full,
}

#[derive(Clone, Debug)]
pub struct DenoiserConfig {
    pub d_model: usize,
    /// Mixing blocks, alternating temporal self-attention (even index) and
    /// per-token MLP (odd index).
    pub n_blocks: usize,
    pub n_heads: usize,
    /// Self-attention blocks in the trajectory encoder.
    pub traj_blocks: usize,
    pub lora_rank: usize,
    pub lora_alpha: f32,
    /// Whether entering [`Stage::Full`] folds adapters into base weights
    /// (resetting them to identity) or keeps them factored.
    pub merge_adapters_on_full: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            d_model: 256,
            n_blocks: 6,
            n_heads: 4,
            traj_blocks: 1,
            lora_rank: 4,
            lora_alpha: 8.0,
            merge_adapters_on_full: false,
        }
    }
}

impl DenoiserConfig {
    fn validate(&self) -> Result<(), DenoiserError> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(DenoiserError::Config(format!(
                "d_model {} not divisible into {} heads",
                self.d_model, self.n_heads
            )));
        }
        if self.d_model % 2 != 0 {
            return Err(DenoiserError::Config(
                "d_model must be even for sinusoidal embeddings".into(),
            ));
        }
        if self.n_blocks == 0 || self.traj_blocks == 0 {
            return Err(DenoiserError::Config("need at least one block".into()));
        }
        if self.lora_rank == 0 {
            return Err(DenoiserError::Config("adapter rank must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Everything the denoiser is conditioned on. `t_aug` is the timestep the
/// history was noised with (0 at inference: clean history).
#[derive(Clone, Debug)]
pub struct ConditionSet {
    pub history: Tensor,
    pub t_aug: usize,
    pub command: Option<Command>,
    pub trajectory: Option<Trajectory>,
}

impl ConditionSet {
    pub fn new(history: Tensor) -> ConditionSet {
        ConditionSet {
            history,
            t_aug: 0,
            command: None,
            trajectory: None,
        }
    }

    pub fn with_command(mut self, command: Command) -> ConditionSet {
        self.command = Some(command);
        self
    }

    pub fn with_trajectory(mut self, trajectory: Trajectory) -> ConditionSet {
        self.trajectory = Some(trajectory);
        self
    }

    pub fn with_t_aug(mut self, t_aug: usize) -> ConditionSet {
        self.t_aug = t_aug;
        self
    }

    /// The unconditional counterpart for guidance: command and trajectory
    /// nulled jointly, history kept.
    pub fn nulled(&self) -> ConditionSet {
        ConditionSet {
            history: self.history.clone(),
            t_aug: self.t_aug,
            command: None,
            trajectory: None,
        }
    }

    fn validate(&self) -> Result<(), DenoiserError> {
        if self.history.shape() != [HISTORY_LEN, LATENT_FRAME] {
            return Err(DenoiserError::Shape(format!(
                "history must be [{HISTORY_LEN}, {LATENT_FRAME}], got {:?}",
                self.history.shape()
            )));
        }
        if self.t_aug >= T_STEPS {
            return Err(DenoiserError::Timestep {
                t: self.t_aug,
                max: T_STEPS,
            });
        }
        Ok(())
    }
}

/// The world model: a parameter store plus the wiring that builds its
/// forward pass on an autodiff tape.
#[derive(Clone, Debug)]
pub struct WorldModel {
    config: DenoiserConfig,
    params: ParamStore,
    stage: Stage,
}

fn is_adapter(name: &str) -> bool {
    name.contains(".lora.")
}

fn is_traj_encoder(name: &str) -> bool {
    name.starts_with("traj.")
}

fn is_backbone_base(name: &str) -> bool {
    !is_adapter(name) && !is_traj_encoder(name)
}

impl WorldModel {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<WorldModel, DenoiserError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let d = config.d_model;

        let linear = |p: &mut ParamStore,
                          rng: &mut ChaCha8Rng,
                          base: &str,
                          n_in: usize,
                          n_out: usize,
                          adapted: bool|
         -> Result<(), NnError> {
            p.insert(format!("{base}.w"), Tensor::randn(&[n_in, n_out], 0.02, rng), true)?;
            p.insert(format!("{base}.b"), Tensor::zeros(&[n_out]), true)?;
            if adapted {
                let ad = LowRankAdapter::new(n_in, n_out, config.lora_rank, config.lora_alpha, rng);
                p.insert(format!("{base}.lora.a"), ad.a, true)?;
                p.insert(format!("{base}.lora.b"), ad.b, true)?;
            }
            Ok(())
        };
        let norm = |p: &mut ParamStore, base: &str| -> Result<(), NnError> {
            p.insert(format!("{base}.g"), Tensor::full(&[d], 1.0), true)?;
            p.insert(format!("{base}.b"), Tensor::zeros(&[d]), true)?;
            Ok(())
        };

        (|| -> Result<(), NnError> {
            linear(&mut p, &mut rng, "embed.frame", LATENT_FRAME, d, true)?;
            p.insert("embed.pos", Tensor::randn(&[N_TOKENS, d], 0.02, &mut rng), true)?;
            p.insert("cmd.table", Tensor::randn(&[N_COMMANDS, d], 0.02, &mut rng), true)?;
            p.insert("null.cmd", Tensor::randn(&[1, d], 0.02, &mut rng), true)?;
            p.insert("null.traj", Tensor::randn(&[1, d], 0.02, &mut rng), true)?;

            for i in 0..config.n_blocks {
                let blk = format!("bb.blk{i}");
                norm(&mut p, &format!("{blk}.ln"))?;
                if i % 2 == 0 {
                    for proj in ["q", "k", "v", "o"] {
                        linear(&mut p, &mut rng, &format!("{blk}.{proj}"), d, d, true)?;
                    }
                } else {
                    linear(&mut p, &mut rng, &format!("{blk}.fc1"), d, 4 * d, true)?;
                    linear(&mut p, &mut rng, &format!("{blk}.fc2"), 4 * d, d, true)?;
                }
            }

            norm(&mut p, "head.ln")?;
            linear(&mut p, &mut rng, "head.out", d, LATENT_FRAME, true)?;

            linear(&mut p, &mut rng, "traj.embed", 2, d, false)?;
            p.insert("traj.pos", Tensor::randn(&[N_WAYPOINTS, d], 0.02, &mut rng), true)?;
            for i in 0..config.traj_blocks {
                let blk = format!("traj.blk{i}");
                norm(&mut p, &format!("{blk}.ln"))?;
                for proj in ["q", "k", "v", "o"] {
                    linear(&mut p, &mut rng, &format!("{blk}.{proj}"), d, d, false)?;
                }
            }
            linear(&mut p, &mut rng, "traj.head", d, d, false)?;
            Ok(())
        })()?;

        let mut model = WorldModel {
            config,
            params: p,
            stage: Stage::ActionFree,
        };
        model.set_stage(Stage::ActionFree);
        Ok(model)
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Sets which parameter groups train. Action-free: the backbone (frame
    /// embedding, mixer blocks, output head, command/null embeddings).
    /// Adapter-action: only low-rank adapters and the trajectory encoder.
    /// Full: everything, optionally folding adapters into their base weights
    /// first (which leaves the forward function unchanged).
    pub fn set_stage(&mut self, stage: Stage) {
        if stage == Stage::Full && self.config.merge_adapters_on_full {
            self.merge_adapters().expect("adapter shapes fixed at init");
        }
        let (base, traj, lora) = match stage {
            Stage::ActionFree => (true, false, false),
            Stage::AdapterAction => (false, true, true),
            Stage::Full => (true, true, true),
        };
        self.params.set_trainable_where(is_backbone_base, base);
        self.params.set_trainable_where(is_traj_encoder, traj);
        self.params.set_trainable_where(is_adapter, lora);
        self.stage = stage;
    }

    fn merge_adapters(&mut self) -> Result<(), NnError> {
        let bases: Vec<String> = self
            .params
            .names()
            .filter_map(|n| n.strip_suffix(".lora.a").map(str::to_string))
            .collect();
        for base in bases {
            let a = self.params.tensor(&format!("{base}.lora.a"))?.clone();
            let b = self.params.tensor(&format!("{base}.lora.b"))?.clone();
            let w = self.params.tensor_mut(&format!("{base}.w"))?;
            merge_lora(w, &a, &b, self.config.lora_alpha)?;
            let zero = Tensor::zeros(b.shape());
            self.params.set_value(&format!("{base}.lora.b"), zero)?;
        }
        Ok(())
    }

    /// A backbone linear: base weight plus its low-rank adapter, plus bias.
    fn adapted_linear(
        &self,
        g: &mut Graph<'_>,
        nodes: &ParamNodes,
        base: &str,
        x: NodeId,
    ) -> Result<NodeId, NnError> {
        let w = nodes.node(&format!("{base}.w"))?;
        let a = nodes.node(&format!("{base}.lora.a"))?;
        let b = nodes.node(&format!("{base}.lora.b"))?;
        let bias = nodes.node(&format!("{base}.b"))?;
        let y = lora_linear(g, x, w, a, b, self.config.lora_alpha)?;
        g.add_row(y, bias)
    }

    fn plain_linear(
        &self,
        g: &mut Graph<'_>,
        nodes: &ParamNodes,
        base: &str,
        x: NodeId,
    ) -> Result<NodeId, NnError> {
        let w = nodes.node(&format!("{base}.w"))?;
        let bias = nodes.node(&format!("{base}.b"))?;
        let y = g.matmul(x, w)?;
        g.add_row(y, bias)
    }

    fn norm(
        &self,
        g: &mut Graph<'_>,
        nodes: &ParamNodes,
        base: &str,
        x: NodeId,
    ) -> Result<NodeId, NnError> {
        let gain = nodes.node(&format!("{base}.g"))?;
        let bias = nodes.node(&format!("{base}.b"))?;
        layer_norm(g, x, gain, bias, 1e-5)
    }

    fn attention_block(
        &self,
        g: &mut Graph<'_>,
        nodes: &ParamNodes,
        blk: &str,
        x: NodeId,
        adapted: bool,
    ) -> Result<NodeId, NnError> {
        let h = self.norm(g, nodes, &format!("{blk}.ln"), x)?;
        let proj = |g: &mut Graph<'_>, p: &str, x: NodeId| -> Result<NodeId, NnError> {
            let base = format!("{blk}.{p}");
            if adapted {
                self.adapted_linear(g, nodes, &base, x)
            } else {
                self.plain_linear(g, nodes, &base, x)
            }
        };
        let q = proj(g, "q", h)?;
        let k = proj(g, "k", h)?;
        let v = proj(g, "v", h)?;
        let mixed = attention_mix(g, q, k, v, self.config.n_heads)?;
        let o = proj(g, "o", mixed)?;
        g.add(x, o)
    }

    fn mlp_block(
        &self,
        g: &mut Graph<'_>,
        nodes: &ParamNodes,
        blk: &str,
        x: NodeId,
    ) -> Result<NodeId, NnError> {
        let h = self.norm(g, nodes, &format!("{blk}.ln"), x)?;
        let h = self.adapted_linear(g, nodes, &format!("{blk}.fc1"), h)?;
        let h = g.gelu(h)?;
        let h = self.adapted_linear(g, nodes, &format!("{blk}.fc2"), h)?;
        g.add(x, h)
    }

    /// Encodes a trajectory to its condition token on the tape: embed each
    /// waypoint, add learned positions, run the encoder blocks, mean-pool,
    /// project.
    pub fn trajectory_token_node(
        &self,
        g: &mut Graph<'_>,
        nodes: &ParamNodes,
        traj: &Trajectory,
    ) -> Result<NodeId, NnError> {
        let wp = Tensor::new(
            vec![N_WAYPOINTS, 2],
            traj.flat().to_vec(),
        )
        .expect("trajectory is 8 waypoints by construction");
        let x = g.constant(wp);
        let mut x = self.plain_linear(g, nodes, "traj.embed", x)?;
        let pos = nodes.node("traj.pos")?;
        x = g.add(x, pos)?;
        for i in 0..self.config.traj_blocks {
            x = self.attention_block(g, nodes, &format!("traj.blk{i}"), x, false)?;
        }
        let pooled = g.mean_pool_rows(x, N_WAYPOINTS)?;
        self.plain_linear(g, nodes, "traj.head", pooled)
    }

    fn command_token_node(
        &self,
        g: &mut Graph<'_>,
        nodes: &ParamNodes,
        command: Option<Command>,
    ) -> Result<NodeId, NnError> {
        match command {
            Some(c) => {
                let table = nodes.node("cmd.table")?;
                g.slice_rows(table, c.code() as usize, 1)
            }
            None => nodes.node("null.cmd"),
        }
    }

    fn trajectory_slot_node(
        &self,
        g: &mut Graph<'_>,
        nodes: &ParamNodes,
        trajectory: Option<&Trajectory>,
    ) -> Result<NodeId, NnError> {
        match trajectory {
            Some(t) => self.trajectory_token_node(g, nodes, t),
            None => nodes.node("null.traj"),
        }
    }

    /// Builds the full forward pass on the tape and returns the predicted
    /// clean future latents `[FUTURE_LEN, LATENT_FRAME]`. Callers own graph
    /// and binding so they can attach losses and run backward.
    pub fn forward_node(
        &self,
        g: &mut Graph<'_>,
        nodes: &ParamNodes,
        z_t_future: NodeId,
        t: usize,
        cond: &ConditionSet,
    ) -> Result<NodeId, NnError> {
        let d = self.config.d_model;

        let hist_in = g.constant(cond.history.clone());
        let mut hist = self.adapted_linear(g, nodes, "embed.frame", hist_in)?;
        let t_aug_emb = g.constant(sinusoidal_embedding(cond.t_aug as u32, d));
        hist = g.add_row(hist, t_aug_emb)?;

        let mut fut = self.adapted_linear(g, nodes, "embed.frame", z_t_future)?;
        let t_emb = g.constant(sinusoidal_embedding(t as u32, d));
        fut = g.add_row(fut, t_emb)?;

        let cmd = self.command_token_node(g, nodes, cond.command)?;
        let traj = self.trajectory_slot_node(g, nodes, cond.trajectory.as_ref())?;

        let mut x = g.concat_rows(&[hist, fut, cmd, traj])?;
        let pos = nodes.node("embed.pos")?;
        x = g.add(x, pos)?;

        for i in 0..self.config.n_blocks {
            let blk = format!("bb.blk{i}");
            x = if i % 2 == 0 {
                self.attention_block(g, nodes, &blk, x, true)?
            } else {
                self.mlp_block(g, nodes, &blk, x)?
            };
        }

        let fut_tokens = g.slice_rows(x, HISTORY_LEN, FUTURE_LEN)?;
        let h = self.norm(g, nodes, "head.ln", fut_tokens)?;
        self.adapted_linear(g, nodes, "head.out", h)
    }

    fn validate_forward(&self, z_t_future: &Tensor, t: usize, cond: &ConditionSet) -> Result<(), DenoiserError> {
        if z_t_future.shape() != [FUTURE_LEN, LATENT_FRAME] {
            return Err(DenoiserError::Shape(format!(
                "noised future must be [{FUTURE_LEN}, {LATENT_FRAME}], got {:?}",
                z_t_future.shape()
            )));
        }
        if t >= T_STEPS {
            return Err(DenoiserError::Timestep { t, max: T_STEPS });
        }
        cond.validate()
    }

    /// Inference forward: predicted clean future latents for a noised input.
    /// Deterministic given parameters and inputs.
    pub fn forward(
        &self,
        z_t_future: &Tensor,
        t: usize,
        cond: &ConditionSet,
    ) -> Result<Tensor, DenoiserError> {
        self.validate_forward(z_t_future, t, cond)?;
        let mut g = Graph::new();
        let nodes = g.bind(&self.params);
        let z = g.constant(z_t_future.clone());
        let out = self.forward_node(&mut g, &nodes, z, t, cond)?;
        Ok(g.value(out).clone())
    }

    /// The two guidance branches: conditional as given, and unconditional
    /// with command and trajectory nulled jointly (history kept).
    pub fn guidance_pair(
        &self,
        z_t_future: &Tensor,
        t: usize,
        cond: &ConditionSet,
    ) -> Result<(Tensor, Tensor), DenoiserError> {
        self.validate_forward(z_t_future, t, cond)?;
        let null = cond.nulled();
        let mut g = Graph::new();
        let nodes = g.bind(&self.params);
        let z = g.constant(z_t_future.clone());
        let out_c = self.forward_node(&mut g, &nodes, z, t, cond)?;
        let out_u = self.forward_node(&mut g, &nodes, z, t, &null)?;
        Ok((g.value(out_c).clone(), g.value(out_u).clone()))
    }

    /// The trajectory condition token as a plain tensor; `None` yields the
    /// learned null token exactly.
    pub fn trajectory_token(&self, traj: Option<&Trajectory>) -> Result<Tensor, DenoiserError> {
        let mut g = Graph::new();
        let nodes = g.bind(&self.params);
        let out = self.trajectory_slot_node(&mut g, &nodes, traj)?;
        Ok(g.value(out).clone())
    }
}
