//! Composite layers shared by the model stacks: linear, affine layer norm,
//! multi-head attention mixing, and sinusoidal index embeddings.

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use super::{shape_err, NnError};

/// `x @ w + b` with `w: [in, out]`, `b: [out]`.
pub fn linear(g: &mut Graph<'_>, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, NnError> {
    let h = g.matmul(x, w)?;
    g.add_row(h, b)
}

/// Row-wise layer norm with learned gain and bias.
pub fn layer_norm(
    g: &mut Graph<'_>,
    x: NodeId,
    gain: NodeId,
    bias: NodeId,
    eps: f32,
) -> Result<NodeId, NnError> {
    let n = g.layer_norm_rows(x, eps)?;
    let n = g.mul_row(n, gain)?;
    g.add_row(n, bias)
}

/// Scaled dot-product attention over already-projected q/k/v `[tokens, d]`,
/// mixed per head and re-concatenated. Callers apply their own output
/// projection.
pub fn attention_mix(
    g: &mut Graph<'_>,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    n_heads: usize,
) -> Result<NodeId, NnError> {
    let d = g.shape(q)[1];
    if n_heads == 0 || d % n_heads != 0 {
        return Err(shape_err(
            "attention_mix",
            format!("width {d} not divisible into {n_heads} heads"),
        ));
    }
    let hd = d / n_heads;
    let scale = 1.0 / (hd as f32).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = g.slice_cols(q, h * hd, hd)?;
        let kh = g.slice_cols(k, h * hd, hd)?;
        let vh = g.slice_cols(v, h * hd, hd)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale)?;
        let attn = g.softmax_rows(scores)?;
        heads.push(g.matmul(attn, vh)?);
    }
    g.concat_cols(&heads)
}

/// Classic sinusoidal embedding of a nonnegative index, `[dim]` with `dim`
/// even: sines in the first half, cosines in the second.
pub fn sinusoidal_embedding(t: u32, dim: usize) -> Tensor {
    assert!(dim % 2 == 0, "sinusoidal embedding needs an even dim");
    let half = dim / 2;
    let mut data = vec![0.0f32; dim];
    for i in 0..half {
        let freq = 1.0 / 10000f64.powf(i as f64 / half as f64);
        let angle = t as f64 * freq;
        data[i] = angle.sin() as f32;
        data[half + i] = angle.cos() as f32;
    }
    Tensor::from_vec(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_head_attention_matches_hand_rolled() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let q = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let k = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let v = Tensor::randn(&[3, 4], 1.0, &mut rng);

        let mut g = Graph::new();
        let qn = g.constant_ref(&q);
        let kn = g.constant_ref(&k);
        let vn = g.constant_ref(&v);
        let mixed = attention_mix(&mut g, qn, kn, vn, 1).unwrap();

        let kt = g.transpose(kn).unwrap();
        let scores = g.matmul(qn, kt).unwrap();
        let scores = g.scale(scores, 0.5).unwrap(); // 1/sqrt(4)
        let attn = g.softmax_rows(scores).unwrap();
        let want = g.matmul(attn, vn).unwrap();
        assert_eq!(g.value(mixed).data(), g.value(want).data());
    }

    #[test]
    fn attention_is_equivariant_to_token_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = Tensor::randn(&[4, 6], 1.0, &mut rng);
        let mix = |t: &Tensor| -> Vec<f32> {
            let mut g = Graph::new();
            let n = g.constant(t.clone());
            let out = attention_mix(&mut g, n, n, n, 2).unwrap();
            g.value(out).data().to_vec()
        };
        let base = mix(&x);
        // swap rows 1 and 3
        let mut swapped = x.clone();
        let n = 6;
        for c in 0..n {
            swapped.data_mut().swap(n + c, 3 * n + c);
        }
        let out = mix(&swapped);
        for c in 0..n {
            assert!((base[n + c] - out[3 * n + c]).abs() < 1e-6);
            assert!((base[3 * n + c] - out[n + c]).abs() < 1e-6);
            assert!((base[c] - out[c]).abs() < 1e-6);
        }
    }

    #[test]
    fn sinusoidal_embeddings_separate_indices() {
        let a = sinusoidal_embedding(0, 16);
        let b = sinusoidal_embedding(1, 16);
        let c = sinusoidal_embedding(999, 16);
        assert_ne!(a.data(), b.data());
        assert_ne!(b.data(), c.data());
        for t in [a, b, c] {
            assert!(t.data().iter().all(|v| v.abs() <= 1.0));
        }
        // index 0: all sines zero, all cosines one
        let z = sinusoidal_embedding(0, 8);
        assert_eq!(&z.data()[..4], &[0.0; 4]);
        assert_eq!(&z.data()[4..], &[1.0; 4]);
    }
}
