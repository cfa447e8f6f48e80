//! Shared neural building blocks for the clip-scoring and trajectory models:
//! a two-stage strided patch downsampler over binary frames (the local-window
//! equivalent of two stride-matched conv layers) and pre-LN temporal
//! attention blocks with a pooled MLP tail. The reward and trajectory models
//! share this architecture but train their own independent parameters.

use std::sync::{Arc, OnceLock};

use rand_chacha::ChaCha8Rng;

use crate::nnkit::layers::{attention_mix, layer_norm, linear};
use crate::nnkit::{Graph, NnError, NodeId, ParamNodes, ParamStore, Tensor};
use crate::toyworld::{Frame, FRAME_H, FRAME_W};

/// Dimension of the per-frame feature produced by the encoder stack.
pub const FRAME_FEATURE: usize = 64;

// First encoder stage: 4x4 patches, stride 4, over the 2x32x64 frame.
pub(crate) const PATCH_EDGE: usize = 4;
pub(crate) const GRID_H: usize = FRAME_H / PATCH_EDGE; // 8
pub(crate) const GRID_W: usize = FRAME_W / PATCH_EDGE; // 16
pub(crate) const PATCH_TOKENS: usize = GRID_H * GRID_W; // 128
pub(crate) const PATCH_VALUES: usize = 2 * PATCH_EDGE * PATCH_EDGE; // 32
// Second stage: 2x2 neighborhoods of first-stage features.
pub(crate) const CELL_TOKENS: usize = PATCH_TOKENS / 4; // 32
pub(crate) const CELL_VALUES: usize = 4 * PATCH_VALUES; // 128
pub(crate) const FRAME_VALUES: usize = 2 * FRAME_H * FRAME_W; // 4096

pub(crate) const HEAD_BLOCKS: usize = 2;
pub(crate) const HEAD_HEADS: usize = 4;
pub(crate) const HEAD_MLP: usize = 4 * FRAME_FEATURE;
pub(crate) const LN_EPS: f32 = 1e-5;

/// Rearranges a frame into first-stage patch rows: `[PATCH_TOKENS,
/// PATCH_VALUES]`, channel-major within each patch.
pub fn patchify(frame: &Frame) -> Tensor {
    let mut data = Vec::with_capacity(PATCH_TOKENS * PATCH_VALUES);
    for pr in 0..GRID_H {
        for pc in 0..GRID_W {
            for ch in 0..2 {
                for dr in 0..PATCH_EDGE {
                    for dc in 0..PATCH_EDGE {
                        data.push(frame.get(ch, pr * PATCH_EDGE + dr, pc * PATCH_EDGE + dc));
                    }
                }
            }
        }
    }
    Tensor::new(vec![PATCH_TOKENS, PATCH_VALUES], data).expect("patch layout")
}

/// Flat gather indices that regroup the 8x16 patch grid into 4x8 cells of
/// 2x2 neighboring patch features: `[PATCH_TOKENS, d] -> [CELL_TOKENS, 4d]`.
pub(crate) fn regroup_indices() -> Arc<Vec<u32>> {
    static IDX: OnceLock<Arc<Vec<u32>>> = OnceLock::new();
    IDX.get_or_init(|| {
        let mut idx = Vec::with_capacity(CELL_TOKENS * CELL_VALUES);
        for cr in 0..GRID_H / 2 {
            for cc in 0..GRID_W / 2 {
                for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let patch = (2 * cr + dr) * GRID_W + (2 * cc + dc);
                    for e in 0..PATCH_VALUES {
                        idx.push((patch * PATCH_VALUES + e) as u32);
                    }
                }
            }
        }
        Arc::new(idx)
    })
    .clone()
}

pub(crate) fn plain_linear(
    g: &mut Graph<'_>,
    nodes: &ParamNodes,
    base: &str,
    x: NodeId,
) -> Result<NodeId, NnError> {
    let w = nodes.node(&format!("{base}.w"))?;
    let b = nodes.node(&format!("{base}.b"))?;
    linear(g, x, w, b)
}

pub(crate) fn norm(
    g: &mut Graph<'_>,
    nodes: &ParamNodes,
    base: &str,
    x: NodeId,
) -> Result<NodeId, NnError> {
    let gain = nodes.node(&format!("{base}.g"))?;
    let bias = nodes.node(&format!("{base}.b"))?;
    layer_norm(g, x, gain, bias, LN_EPS)
}

/// Two-stage downsampler: patch linear + GELU, 2x2 regroup, cell linear +
/// GELU, mean pool to a single `[1, FRAME_FEATURE]` row. Parameters live
/// under `enc.*`.
pub(crate) fn encoder_node(
    g: &mut Graph<'_>,
    nodes: &ParamNodes,
    patches: NodeId,
) -> Result<NodeId, NnError> {
    let h = plain_linear(g, nodes, "enc.l1", patches)?;
    let h = g.gelu(h)?;
    let grouped = g.gather(h, regroup_indices(), &[CELL_TOKENS, CELL_VALUES])?;
    let h = plain_linear(g, nodes, "enc.l2", grouped)?;
    let h = g.gelu(h)?;
    g.mean_pool_rows(h, CELL_TOKENS)
}

/// One pre-LN attention block with residuals; parameters under `{base}.*`.
pub(crate) fn attention_block(
    g: &mut Graph<'_>,
    nodes: &ParamNodes,
    base: &str,
    x: NodeId,
) -> Result<NodeId, NnError> {
    let n = norm(g, nodes, &format!("{base}.ln1"), x)?;
    let q = plain_linear(g, nodes, &format!("{base}.q"), n)?;
    let k = plain_linear(g, nodes, &format!("{base}.k"), n)?;
    let v = plain_linear(g, nodes, &format!("{base}.v"), n)?;
    let mixed = attention_mix(g, q, k, v, HEAD_HEADS)?;
    let o = plain_linear(g, nodes, &format!("{base}.o"), mixed)?;
    let x = g.add(x, o)?;
    let n = norm(g, nodes, &format!("{base}.ln2"), x)?;
    let h = plain_linear(g, nodes, &format!("{base}.fc1"), n)?;
    let h = g.gelu(h)?;
    let h = plain_linear(g, nodes, &format!("{base}.fc2"), h)?;
    g.add(x, h)
}

/// Temporal trunk shared by the heads: positional add (`head.pos`, sized by
/// the caller), `HEAD_BLOCKS` attention blocks, mean pool over `rows`,
/// layer norm, and one GELU MLP layer — everything up to a model's final
/// projection.
pub(crate) fn temporal_trunk(
    g: &mut Graph<'_>,
    nodes: &ParamNodes,
    feats: NodeId,
    rows: usize,
) -> Result<NodeId, NnError> {
    let pos = nodes.node("head.pos")?;
    let mut x = g.add(feats, pos)?;
    for i in 0..HEAD_BLOCKS {
        x = attention_block(g, nodes, &format!("head.blk{i}"), x)?;
    }
    let pooled = g.mean_pool_rows(x, rows)?;
    let n = norm(g, nodes, "head.ln", pooled)?;
    let h = plain_linear(g, nodes, "head.mlp1", n)?;
    g.gelu(h)
}

pub(crate) fn init_linear(
    p: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    base: &str,
    n_in: usize,
    n_out: usize,
) -> Result<(), NnError> {
    p.insert(format!("{base}.w"), Tensor::randn(&[n_in, n_out], 0.02, rng), true)?;
    p.insert(format!("{base}.b"), Tensor::zeros(&[n_out]), true)?;
    Ok(())
}

pub(crate) fn init_norm(p: &mut ParamStore, base: &str, d: usize) -> Result<(), NnError> {
    p.insert(format!("{base}.g"), Tensor::full(&[d], 1.0), true)?;
    p.insert(format!("{base}.b"), Tensor::zeros(&[d]), true)?;
    Ok(())
}

/// Encoder parameters: `enc.l1` and `enc.l2`.
pub(crate) fn init_encoder(p: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<(), NnError> {
    init_linear(p, rng, "enc.l1", PATCH_VALUES, PATCH_VALUES)?;
    init_linear(p, rng, "enc.l2", CELL_VALUES, FRAME_FEATURE)
}

/// Trunk parameters between the positional add and the final projection:
/// `head.blk{i}.*`, `head.ln`, `head.mlp1`. `head.pos` is sized and
/// initialized by the caller.
pub(crate) fn init_temporal_trunk(
    p: &mut ParamStore,
    rng: &mut ChaCha8Rng,
) -> Result<(), NnError> {
    for i in 0..HEAD_BLOCKS {
        let blk = format!("head.blk{i}");
        init_norm(p, &format!("{blk}.ln1"), FRAME_FEATURE)?;
        for proj in ["q", "k", "v", "o"] {
            init_linear(p, rng, &format!("{blk}.{proj}"), FRAME_FEATURE, FRAME_FEATURE)?;
        }
        init_norm(p, &format!("{blk}.ln2"), FRAME_FEATURE)?;
        init_linear(p, rng, &format!("{blk}.fc1"), FRAME_FEATURE, HEAD_MLP)?;
        init_linear(p, rng, &format!("{blk}.fc2"), HEAD_MLP, FRAME_FEATURE)?;
    }
    init_norm(p, "head.ln", FRAME_FEATURE)?;
    init_linear(p, rng, "head.mlp1", FRAME_FEATURE, FRAME_FEATURE)
}
