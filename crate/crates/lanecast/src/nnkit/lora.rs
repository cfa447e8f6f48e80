//! Low-rank adapters for linear layers.
//!
//! With weights stored `[in, out]` and activations as rows, the adapted layer
//! is `y = x @ (w + (alpha/r) * a @ b)` computed factored as
//! `x @ w + (alpha/r) * (x @ a) @ b`. `b` starts at zero so a fresh adapter
//! leaves the base layer's function untouched.

use rand::Rng;

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use super::NnError;

#[derive(Clone, Debug)]
pub struct LowRankAdapter {
    /// `[in, rank]`, small random init.
    pub a: Tensor,
    /// `[rank, out]`, zero init.
    pub b: Tensor,
    pub alpha: f32,
}

impl LowRankAdapter {
    pub fn new<R: Rng>(
        in_dim: usize,
        out_dim: usize,
        rank: usize,
        alpha: f32,
        rng: &mut R,
    ) -> Self {
        LowRankAdapter {
            a: Tensor::randn(&[in_dim, rank], 0.02, rng),
            b: Tensor::zeros(&[rank, out_dim]),
            alpha,
        }
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[1]
    }

    /// Dense equivalent `w + (alpha/r) * a @ b`.
    pub fn merged_weight(&self, w: &Tensor) -> Result<Tensor, NnError> {
        let mut out = w.clone();
        merge_lora(&mut out, &self.a, &self.b, self.alpha)?;
        Ok(out)
    }
}

/// `y = x @ w + (alpha/r) * (x @ a) @ b` on the tape.
pub fn lora_linear(
    g: &mut Graph<'_>,
    x: NodeId,
    w: NodeId,
    a: NodeId,
    b: NodeId,
    alpha: f32,
) -> Result<NodeId, NnError> {
    let rank = g.shape(a)[1];
    let base = g.matmul(x, w)?;
    let xa = g.matmul(x, a)?;
    let xab = g.matmul(xa, b)?;
    let scaled = g.scale(xab, alpha / rank as f32)?;
    g.add(base, scaled)
}

/// Folds an adapter into its base weight in place: `w += (alpha/r) * a @ b`.
pub fn merge_lora(w: &mut Tensor, a: &Tensor, b: &Tensor, alpha: f32) -> Result<(), NnError> {
    let (in_dim, rank) = a.dims2();
    let (rank2, out_dim) = b.dims2();
    let (win, wout) = w.dims2();
    if rank != rank2 || win != in_dim || wout != out_dim {
        return Err(super::shape_err(
            "merge_lora",
            format!(
                "w {:?}, a {:?}, b {:?}",
                w.shape(),
                a.shape(),
                b.shape()
            ),
        ));
    }
    let scale = alpha / rank as f32;
    for i in 0..in_dim {
        for j in 0..out_dim {
            let mut acc = 0.0f64;
            for r in 0..rank {
                acc += (a.at(i, r) * b.at(r, j)) as f64;
            }
            let idx = i * out_dim + j;
            w.data_mut()[idx] += scale * acc as f32;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fresh_adapter_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let w = Tensor::randn(&[6, 4], 0.5, &mut rng);
        let x = Tensor::randn(&[3, 6], 1.0, &mut rng);
        let ad = LowRankAdapter::new(6, 4, 2, 8.0, &mut rng);

        let mut g = Graph::new();
        let xn = g.constant_ref(&x);
        let wn = g.constant_ref(&w);
        let an = g.constant_ref(&ad.a);
        let bn = g.constant_ref(&ad.b);
        let adapted = lora_linear(&mut g, xn, wn, an, bn, ad.alpha).unwrap();
        let plain = g.matmul(xn, wn).unwrap();
        assert_eq!(g.value(adapted).data(), g.value(plain).data());
    }

    #[test]
    fn factored_matches_dense_merge() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let w = Tensor::randn(&[5, 7], 0.5, &mut rng);
        let x = Tensor::randn(&[2, 5], 1.0, &mut rng);
        let mut ad = LowRankAdapter::new(5, 7, 3, 6.0, &mut rng);
        // give b real content so the adapter actually does something
        ad.b = Tensor::randn(&[3, 7], 0.3, &mut rng);

        let merged = ad.merged_weight(&w).unwrap();
        let mut g = Graph::new();
        let xn = g.constant_ref(&x);
        let wn = g.constant_ref(&w);
        let an = g.constant_ref(&ad.a);
        let bn = g.constant_ref(&ad.b);
        let factored = lora_linear(&mut g, xn, wn, an, bn, ad.alpha).unwrap();
        let mn = g.constant_ref(&merged);
        let dense = g.matmul(xn, mn).unwrap();
        for (f, d) in g.value(factored).data().iter().zip(g.value(dense).data()) {
            assert!((f - d).abs() < 1e-4, "{f} vs {d}");
        }
    }

    #[test]
    fn gradients_reach_adapter_with_frozen_base() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let w = Tensor::randn(&[4, 4], 0.5, &mut rng);
        let x = Tensor::randn(&[2, 4], 1.0, &mut rng);
        let ad = LowRankAdapter::new(4, 4, 2, 4.0, &mut rng);

        let mut g = Graph::new();
        let xn = g.constant_ref(&x);
        let wn = g.constant_ref(&w); // frozen: constant, no gradient
        let an = g.param(&ad.a);
        let bn = g.param(&ad.b);
        let y = lora_linear(&mut g, xn, wn, an, bn, ad.alpha).unwrap();
        let sq = g.mul(y, y).unwrap();
        let loss = g.mean_all(sq).unwrap();
        g.backward(loss).unwrap();

        assert!(g.grad(wn).is_none());
        // b is zero, so dL/da = 0 on the first step, but dL/db is live.
        let gb = g.grad(bn).unwrap();
        assert!(gb.data().iter().any(|&v| v != 0.0));
        assert!(g.grad(an).is_some());
    }
}
