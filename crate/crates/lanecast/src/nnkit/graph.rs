//! Define-by-run autodiff tape.
//!
//! Ops compute eagerly at construction and record themselves on the tape;
//! `backward` walks the tape in reverse construction order. Forward semantics
//! live in one evaluator generic over f32/f64 so the finite-difference
//! harness can replay any recorded graph in double precision.
//!
//! Conventions: rank-2 tensors are row-major `[rows, cols]`; linear layers
//! are `y = x @ w + b` with `w` stored `[in, out]`. Reductions (means, sums,
//! softmax and layer-norm statistics, broadcast-gradient column sums)
//! accumulate in f64 before casting back to the working precision.

use std::sync::Arc;

use super::store::{Gradients, ParamNodes, ParamStore};
use super::tensor::Tensor;
use super::{shape_err, NnError};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(pub(crate) usize);

enum Value<'a> {
    Owned(Tensor),
    Borrowed(&'a Tensor),
}

impl Value<'_> {
    fn tensor(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Matmul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f32),
    /// `[m,n] + [n]`, the row vector added to every row.
    AddRow(NodeId, NodeId),
    /// `[m,n] * [n]`, the row vector scaling every column.
    MulRow(NodeId, NodeId),
    Gelu(NodeId),
    Sigmoid(NodeId),
    SoftmaxRows(NodeId),
    /// Row-wise `(x - mean) / sqrt(var + eps)`; affine gain/bias compose via
    /// `MulRow`/`AddRow`.
    LayerNormRows(NodeId, f32),
    MeanAll(NodeId),
    SumAll(NodeId),
    /// `[g*k, n] -> [k, n]`, mean over each consecutive group of g rows.
    MeanPoolRows(NodeId, usize),
    ConcatRows(Vec<NodeId>),
    SliceRows(NodeId, usize, usize),
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, usize, usize),
    Transpose(NodeId),
    Reshape(NodeId),
    /// `out.flat[i] = x.flat[idx[i]]`; duplicate indices accumulate on the
    /// way back.
    Gather(NodeId, Arc<Vec<u32>>),
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::Matmul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Gelu(a)
            | Op::Sigmoid(a)
            | Op::SoftmaxRows(a)
            | Op::LayerNormRows(a, _)
            | Op::MeanAll(a)
            | Op::SumAll(a)
            | Op::MeanPoolRows(a, _)
            | Op::SliceRows(a, _, _)
            | Op::SliceCols(a, _, _)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::Gather(a, _) => vec![*a],
            Op::ConcatRows(xs) | Op::ConcatCols(xs) => xs.clone(),
        }
    }
}

/// Working precision for the shared forward evaluator.
pub(crate) trait Scalar:
    Copy
    + Send
    + Sync
    + PartialOrd
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f32(v: f32) -> Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn tanh(self) -> Self;
    fn exp(self) -> Self;
    /// `c = A @ B + beta * c` with `A: [m,k]`, `B: [k,n]` row-major; a `true`
    /// transpose flag means the slice holds the operand's transpose.
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        ta: bool,
        b: &[Self],
        tb: bool,
        beta: Self,
        c: &mut [Self],
    );
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            fn from_f32(v: f32) -> Self {
                v as $t
            }
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn tanh(self) -> Self {
                self.tanh()
            }
            fn exp(self) -> Self {
                self.exp()
            }
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                ta: bool,
                b: &[Self],
                tb: bool,
                beta: Self,
                c: &mut [Self],
            ) {
                assert_eq!(a.len(), m * k);
                assert_eq!(b.len(), k * n);
                assert_eq!(c.len(), m * n);
                let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
                let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_scalar<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (T::ONE + u.tanh())
}

fn gelu_deriv(x: f32) -> f32 {
    let xd = x as f64;
    let u = GELU_C * (xd + GELU_A * xd.powi(3));
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * xd * xd);
    (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du) as f32
}

fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    T::ONE / (T::ONE + (T::ZERO - x).exp())
}

/// Evaluates one op. `ins` carries `(shape, values)` per input in the op's
/// argument order; shape validity was established at construction.
fn eval<T: Scalar>(op: &Op, out_shape: &[usize], ins: &[(&[usize], &[T])]) -> Vec<T> {
    match op {
        Op::Leaf => unreachable!("leaf nodes carry their own value"),
        Op::Matmul(..) => {
            let (sa, a) = ins[0];
            let (sb, b) = ins[1];
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let mut c = vec![T::ZERO; m * n];
            T::gemm(m, k, n, a, false, b, false, T::ZERO, &mut c);
            c
        }
        Op::Add(..) => ins[0].1.iter().zip(ins[1].1).map(|(&x, &y)| x + y).collect(),
        Op::Sub(..) => ins[0].1.iter().zip(ins[1].1).map(|(&x, &y)| x - y).collect(),
        Op::Mul(..) => ins[0].1.iter().zip(ins[1].1).map(|(&x, &y)| x * y).collect(),
        Op::Scale(_, c) => {
            let c = T::from_f32(*c);
            ins[0].1.iter().map(|&x| x * c).collect()
        }
        Op::AddRow(..) => {
            let (sa, a) = ins[0];
            let r = ins[1].1;
            let n = sa[1];
            a.iter()
                .enumerate()
                .map(|(i, &x)| x + r[i % n])
                .collect()
        }
        Op::MulRow(..) => {
            let (sa, a) = ins[0];
            let r = ins[1].1;
            let n = sa[1];
            a.iter()
                .enumerate()
                .map(|(i, &x)| x * r[i % n])
                .collect()
        }
        Op::Gelu(_) => ins[0].1.iter().map(|&x| gelu_scalar(x)).collect(),
        Op::Sigmoid(_) => ins[0].1.iter().map(|&x| sigmoid_scalar(x)).collect(),
        Op::SoftmaxRows(_) => {
            let (s, a) = ins[0];
            let (m, n) = (s[0], s[1]);
            let mut out = vec![T::ZERO; m * n];
            for i in 0..m {
                let row = &a[i * n..(i + 1) * n];
                let mut mx = row[0];
                for &v in row {
                    if v > mx {
                        mx = v;
                    }
                }
                let mut sum = 0.0f64;
                for (j, &v) in row.iter().enumerate() {
                    let e = (v - mx).exp();
                    out[i * n + j] = e;
                    sum += e.to_f64();
                }
                let inv = T::from_f64(1.0 / sum);
                for j in 0..n {
                    out[i * n + j] = out[i * n + j] * inv;
                }
            }
            out
        }
        Op::LayerNormRows(_, eps) => {
            let (s, a) = ins[0];
            let (m, n) = (s[0], s[1]);
            let mut out = vec![T::ZERO; m * n];
            for i in 0..m {
                let row = &a[i * n..(i + 1) * n];
                let mean = row.iter().map(|v| v.to_f64()).sum::<f64>() / n as f64;
                let var = row
                    .iter()
                    .map(|v| {
                        let d = v.to_f64() - mean;
                        d * d
                    })
                    .sum::<f64>()
                    / n as f64;
                let inv = 1.0 / (var + *eps as f64).sqrt();
                for j in 0..n {
                    out[i * n + j] = T::from_f64((row[j].to_f64() - mean) * inv);
                }
            }
            out
        }
        Op::MeanAll(_) => {
            let a = ins[0].1;
            let sum: f64 = a.iter().map(|v| v.to_f64()).sum();
            vec![T::from_f64(sum / a.len() as f64)]
        }
        Op::SumAll(_) => {
            let a = ins[0].1;
            vec![T::from_f64(a.iter().map(|v| v.to_f64()).sum())]
        }
        Op::MeanPoolRows(_, g) => {
            let (s, a) = ins[0];
            let n = s[1];
            let groups = s[0] / g;
            let mut out = vec![T::ZERO; groups * n];
            for k in 0..groups {
                for j in 0..n {
                    let mut acc = 0.0f64;
                    for i in 0..*g {
                        acc += a[(k * g + i) * n + j].to_f64();
                    }
                    out[k * n + j] = T::from_f64(acc / *g as f64);
                }
            }
            out
        }
        Op::ConcatRows(_) => {
            let mut out = Vec::with_capacity(out_shape.iter().product());
            for (_, v) in ins {
                out.extend_from_slice(v);
            }
            out
        }
        Op::SliceRows(_, start, len) => {
            let (s, a) = ins[0];
            let n = s[1];
            a[start * n..(start + len) * n].to_vec()
        }
        Op::ConcatCols(_) => {
            let m = out_shape[0];
            let n = out_shape[1];
            let mut out = vec![T::ZERO; m * n];
            for i in 0..m {
                let mut off = 0;
                for (s, v) in ins {
                    let w = s[1];
                    out[i * n + off..i * n + off + w].copy_from_slice(&v[i * w..(i + 1) * w]);
                    off += w;
                }
            }
            out
        }
        Op::SliceCols(_, start, len) => {
            let (s, a) = ins[0];
            let (m, n) = (s[0], s[1]);
            let mut out = Vec::with_capacity(m * len);
            for i in 0..m {
                out.extend_from_slice(&a[i * n + start..i * n + start + len]);
            }
            out
        }
        Op::Transpose(_) => {
            let (s, a) = ins[0];
            let (m, n) = (s[0], s[1]);
            let mut out = vec![T::ZERO; m * n];
            for i in 0..m {
                for j in 0..n {
                    out[j * m + i] = a[i * n + j];
                }
            }
            out
        }
        Op::Reshape(_) => ins[0].1.to_vec(),
        Op::Gather(_, idx) => idx.iter().map(|&i| ins[0].1[i as usize]).collect(),
    }
}

struct Node<'a> {
    shape: Vec<usize>,
    value: Value<'a>,
    op: Op,
    needs_grad: bool,
}

/// The tape. Leaves are constants (no gradient), variables (owned,
/// gradient-tracked) or parameters (borrowed from a [`ParamStore`]).
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    grads: Vec<Option<Tensor>>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push_leaf(&mut self, value: Value<'a>, needs_grad: bool) -> NodeId {
        let shape = value.tensor().shape().to_vec();
        self.nodes.push(Node {
            shape,
            value,
            op: Op::Leaf,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push_leaf(Value::Owned(t), false)
    }

    pub fn constant_ref(&mut self, t: &'a Tensor) -> NodeId {
        self.push_leaf(Value::Borrowed(t), false)
    }

    pub fn var(&mut self, t: Tensor) -> NodeId {
        self.push_leaf(Value::Owned(t), true)
    }

    pub fn param(&mut self, t: &'a Tensor) -> NodeId {
        self.push_leaf(Value::Borrowed(t), true)
    }

    /// Binds every parameter in the store as a leaf; frozen parameters come
    /// in as constants so backward never spends time on them.
    pub fn bind(&mut self, store: &'a ParamStore) -> ParamNodes {
        let mut nodes = std::collections::BTreeMap::new();
        for (name, param) in store.iter() {
            let id = self.push_leaf(Value::Borrowed(&param.value), param.trainable);
            nodes.insert(name.clone(), id);
        }
        ParamNodes { nodes }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        self.nodes[id.0].value.tensor()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    fn push_op(&mut self, op: Op, out_shape: Vec<usize>) -> Result<NodeId, NnError> {
        let input_ids = op.inputs();
        let ins: Vec<(&[usize], &[f32])> = input_ids
            .iter()
            .map(|id| {
                let n = &self.nodes[id.0];
                (n.shape.as_slice(), n.value.tensor().data())
            })
            .collect();
        let data = eval::<f32>(&op, &out_shape, &ins);
        let needs_grad = input_ids.iter().any(|id| self.nodes[id.0].needs_grad);
        let value = Value::Owned(Tensor::new(out_shape.clone(), data)?);
        self.nodes.push(Node {
            shape: out_shape,
            value,
            op,
            needs_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn dims2(&self, op: &'static str, id: NodeId) -> Result<(usize, usize), NnError> {
        let s = &self.nodes[id.0].shape;
        if s.len() != 2 {
            return Err(shape_err(op, format!("expected rank-2 tensor, got {:?}", s)));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m},{k}] @ [{k2},{n}]")));
        }
        self.push_op(Op::Matmul(a, b), vec![m, n])
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        op: Op,
        a: NodeId,
        b: NodeId,
    ) -> Result<NodeId, NnError> {
        let sa = self.nodes[a.0].shape.clone();
        let sb = &self.nodes[b.0].shape;
        if sa != *sb {
            return Err(shape_err(name, format!("{:?} vs {:?}", sa, sb)));
        }
        self.push_op(op, sa)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        self.elementwise("add", Op::Add(a, b), a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        self.elementwise("sub", Op::Sub(a, b), a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        self.elementwise("mul", Op::Mul(a, b), a, b)
    }

    pub fn scale(&mut self, a: NodeId, c: f32) -> Result<NodeId, NnError> {
        let s = self.nodes[a.0].shape.clone();
        self.push_op(Op::Scale(a, c), s)
    }

    fn rowwise(
        &mut self,
        name: &'static str,
        op: Op,
        a: NodeId,
        r: NodeId,
    ) -> Result<NodeId, NnError> {
        let (m, n) = self.dims2(name, a)?;
        let sr = &self.nodes[r.0].shape;
        if sr.len() != 1 || sr[0] != n {
            return Err(shape_err(name, format!("[{m},{n}] with row {:?}", sr)));
        }
        self.push_op(op, vec![m, n])
    }

    /// Adds a `[n]` row vector to every row of a `[m,n]` tensor.
    pub fn add_row(&mut self, a: NodeId, r: NodeId) -> Result<NodeId, NnError> {
        self.rowwise("add_row", Op::AddRow(a, r), a, r)
    }

    /// Multiplies every row of a `[m,n]` tensor by a `[n]` row vector.
    pub fn mul_row(&mut self, a: NodeId, r: NodeId) -> Result<NodeId, NnError> {
        self.rowwise("mul_row", Op::MulRow(a, r), a, r)
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId, NnError> {
        let s = self.nodes[a.0].shape.clone();
        self.push_op(Op::Gelu(a), s)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, NnError> {
        let s = self.nodes[a.0].shape.clone();
        self.push_op(Op::Sigmoid(a), s)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId, NnError> {
        let (m, n) = self.dims2("softmax_rows", a)?;
        self.push_op(Op::SoftmaxRows(a), vec![m, n])
    }

    pub fn layer_norm_rows(&mut self, a: NodeId, eps: f32) -> Result<NodeId, NnError> {
        let (m, n) = self.dims2("layer_norm_rows", a)?;
        self.push_op(Op::LayerNormRows(a, eps), vec![m, n])
    }

    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId, NnError> {
        self.push_op(Op::MeanAll(a), vec![1])
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId, NnError> {
        self.push_op(Op::SumAll(a), vec![1])
    }

    /// Mean over each consecutive group of `group` rows.
    pub fn mean_pool_rows(&mut self, a: NodeId, group: usize) -> Result<NodeId, NnError> {
        let (m, n) = self.dims2("mean_pool_rows", a)?;
        if group == 0 || m % group != 0 {
            return Err(shape_err(
                "mean_pool_rows",
                format!("{m} rows not divisible into groups of {group}"),
            ));
        }
        self.push_op(Op::MeanPoolRows(a, group), vec![m / group, n])
    }

    pub fn concat_rows(&mut self, xs: &[NodeId]) -> Result<NodeId, NnError> {
        if xs.is_empty() {
            return Err(shape_err("concat_rows", "empty input list".into()));
        }
        let (_, n) = self.dims2("concat_rows", xs[0])?;
        let mut rows = 0;
        for &x in xs {
            let (m, nx) = self.dims2("concat_rows", x)?;
            if nx != n {
                return Err(shape_err("concat_rows", format!("{n} vs {nx} cols")));
            }
            rows += m;
        }
        self.push_op(Op::ConcatRows(xs.to_vec()), vec![rows, n])
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId, NnError> {
        let (m, n) = self.dims2("slice_rows", a)?;
        if start + len > m {
            return Err(shape_err(
                "slice_rows",
                format!("rows {start}..{} of [{m},{n}]", start + len),
            ));
        }
        self.push_op(Op::SliceRows(a, start, len), vec![len, n])
    }

    pub fn concat_cols(&mut self, xs: &[NodeId]) -> Result<NodeId, NnError> {
        if xs.is_empty() {
            return Err(shape_err("concat_cols", "empty input list".into()));
        }
        let (m, _) = self.dims2("concat_cols", xs[0])?;
        let mut cols = 0;
        for &x in xs {
            let (mx, nx) = self.dims2("concat_cols", x)?;
            if mx != m {
                return Err(shape_err("concat_cols", format!("{m} vs {mx} rows")));
            }
            cols += nx;
        }
        self.push_op(Op::ConcatCols(xs.to_vec()), vec![m, cols])
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId, NnError> {
        let (m, n) = self.dims2("slice_cols", a)?;
        if start + len > n {
            return Err(shape_err(
                "slice_cols",
                format!("cols {start}..{} of [{m},{n}]", start + len),
            ));
        }
        self.push_op(Op::SliceCols(a, start, len), vec![m, len])
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, NnError> {
        let (m, n) = self.dims2("transpose", a)?;
        self.push_op(Op::Transpose(a), vec![n, m])
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId, NnError> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[a.0].shape.iter().product::<usize>() {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {:?}", self.nodes[a.0].shape, shape),
            ));
        }
        self.push_op(Op::Reshape(a), shape.to_vec())
    }

    /// Flat-index gather: `out.flat[i] = a.flat[idx[i]]` with
    /// `out_shape.numel() == idx.len()`.
    pub fn gather(
        &mut self,
        a: NodeId,
        idx: Arc<Vec<u32>>,
        out_shape: &[usize],
    ) -> Result<NodeId, NnError> {
        let numel: usize = out_shape.iter().product();
        if numel != idx.len() {
            return Err(shape_err(
                "gather",
                format!("{} indices for shape {:?}", idx.len(), out_shape),
            ));
        }
        let src = self.nodes[a.0].shape.iter().product::<usize>() as u32;
        if let Some(&bad) = idx.iter().find(|&&i| i >= src) {
            return Err(shape_err(
                "gather",
                format!("index {bad} out of range for {src} source elements"),
            ));
        }
        self.push_op(Op::Gather(a, idx), out_shape.to_vec())
    }

    /// Replays the recorded forward computation in f64, optionally overriding
    /// leaf values. Used by the finite-difference harness: the probe points
    /// are evaluated in double precision so the numeric derivative is not
    /// drowned by f32 rounding.
    pub fn eval_f64(
        &self,
        out: NodeId,
        overrides: &[(NodeId, Vec<f64>)],
    ) -> Result<Vec<f64>, NnError> {
        let mut vals: Vec<Option<Vec<f64>>> = vec![None; out.0 + 1];
        for (id, v) in overrides {
            if !matches!(self.nodes[id.0].op, Op::Leaf) {
                return Err(NnError::Graph("eval_f64 override on non-leaf".into()));
            }
            if v.len() != self.nodes[id.0].shape.iter().product::<usize>() {
                return Err(NnError::Graph("eval_f64 override length mismatch".into()));
            }
            vals[id.0] = Some(v.clone());
        }
        for i in 0..=out.0 {
            if vals[i].is_some() {
                continue;
            }
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                vals[i] = Some(node.value.tensor().data().iter().map(|&v| v as f64).collect());
            } else {
                let ids = node.op.inputs();
                let ins: Vec<(&[usize], &[f64])> = ids
                    .iter()
                    .map(|id| {
                        (
                            self.nodes[id.0].shape.as_slice(),
                            vals[id.0].as_deref().expect("topological order"),
                        )
                    })
                    .collect();
                let out_vals = eval::<f64>(&node.op, &node.shape, &ins);
                vals[i] = Some(out_vals);
            }
        }
        Ok(vals[out.0].take().expect("evaluated"))
    }

    pub fn backward(&mut self, loss: NodeId) -> Result<(), NnError> {
        if self.nodes[loss.0].shape.iter().product::<usize>() != 1 {
            return Err(NnError::Graph(format!(
                "backward from non-scalar node of shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let seed = Tensor::new(self.nodes[loss.0].shape.clone(), vec![1.0])?;
        self.backward_seeded(loss, seed)
    }

    /// Backward with an explicit output cotangent; `backward` is the scalar
    /// special case with seed 1.
    pub fn backward_seeded(&mut self, out: NodeId, seed: Tensor) -> Result<(), NnError> {
        if seed.shape() != self.nodes[out.0].shape.as_slice() {
            return Err(NnError::Graph(format!(
                "seed shape {:?} does not match node shape {:?}",
                seed.shape(),
                self.nodes[out.0].shape
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.accumulate_inputs(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Routes the cotangent `g` of node `i` into its inputs.
    fn accumulate_inputs(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let needs = |id: NodeId| self.nodes[id.0].needs_grad;
        let shape_of = |id: NodeId| self.nodes[id.0].shape.as_slice();
        macro_rules! slot {
            ($id:expr) => {{
                let s = &mut grads[$id.0];
                if s.is_none() {
                    *s = Some(Tensor::zeros(shape_of($id)));
                }
                s.as_mut().unwrap().data_mut()
            }};
        }
        let val = |id: NodeId| self.nodes[id.0].value.tensor().data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (m, k) = (shape_of(*a)[0], shape_of(*a)[1]);
                let n = shape_of(*b)[1];
                if needs(*a) {
                    // da += g @ b^T
                    let bv = val(*b);
                    f32::gemm(m, n, k, g.data(), false, bv, true, 1.0, slot!(*a));
                }
                if needs(*b) {
                    // db += a^T @ g
                    let av = val(*a);
                    f32::gemm(k, m, n, av, true, g.data(), false, 1.0, slot!(*b));
                }
            }
            Op::Add(a, b) => {
                for id in [a, b] {
                    if needs(*id) {
                        let d = slot!(*id);
                        for (dst, &src) in d.iter_mut().zip(g.data()) {
                            *dst += src;
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    let d = slot!(*a);
                    for (dst, &src) in d.iter_mut().zip(g.data()) {
                        *dst += src;
                    }
                }
                if needs(*b) {
                    let d = slot!(*b);
                    for (dst, &src) in d.iter_mut().zip(g.data()) {
                        *dst -= src;
                    }
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let bv = val(*b);
                    let d = slot!(*a);
                    for ((dst, &src), &o) in d.iter_mut().zip(g.data()).zip(bv) {
                        *dst += src * o;
                    }
                }
                if needs(*b) {
                    let av = val(*a);
                    let d = slot!(*b);
                    for ((dst, &src), &o) in d.iter_mut().zip(g.data()).zip(av) {
                        *dst += src * o;
                    }
                }
            }
            Op::Scale(a, c) => {
                if needs(*a) {
                    let d = slot!(*a);
                    for (dst, &src) in d.iter_mut().zip(g.data()) {
                        *dst += src * c;
                    }
                }
            }
            Op::AddRow(a, r) => {
                if needs(*a) {
                    let d = slot!(*a);
                    for (dst, &src) in d.iter_mut().zip(g.data()) {
                        *dst += src;
                    }
                }
                if needs(*r) {
                    let (m, n) = (shape_of(*a)[0], shape_of(*a)[1]);
                    let d = slot!(*r);
                    for (j, dst) in d.iter_mut().enumerate() {
                        let mut acc = 0.0f64;
                        for i2 in 0..m {
                            acc += g.data()[i2 * n + j] as f64;
                        }
                        *dst += acc as f32;
                    }
                }
            }
            Op::MulRow(a, r) => {
                let (m, n) = (shape_of(*a)[0], shape_of(*a)[1]);
                if needs(*a) {
                    let rv = val(*r);
                    let d = slot!(*a);
                    for (i2, (dst, &src)) in d.iter_mut().zip(g.data()).enumerate() {
                        *dst += src * rv[i2 % n];
                    }
                }
                if needs(*r) {
                    let av = val(*a);
                    let d = slot!(*r);
                    for (j, dst) in d.iter_mut().enumerate() {
                        let mut acc = 0.0f64;
                        for i2 in 0..m {
                            acc += (g.data()[i2 * n + j] * av[i2 * n + j]) as f64;
                        }
                        *dst += acc as f32;
                    }
                }
            }
            Op::Gelu(a) => {
                if needs(*a) {
                    let av = val(*a);
                    let d = slot!(*a);
                    for ((dst, &src), &x) in d.iter_mut().zip(g.data()).zip(av) {
                        *dst += src * gelu_deriv(x);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if needs(*a) {
                    let yv = self.nodes[i].value.tensor().data();
                    let d = slot!(*a);
                    for ((dst, &src), &y) in d.iter_mut().zip(g.data()).zip(yv) {
                        *dst += src * y * (1.0 - y);
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                if needs(*a) {
                    let yv = self.nodes[i].value.tensor().data();
                    let (m, n) = (shape_of(*a)[0], shape_of(*a)[1]);
                    let d = slot!(*a);
                    for i2 in 0..m {
                        let y = &yv[i2 * n..(i2 + 1) * n];
                        let gy = &g.data()[i2 * n..(i2 + 1) * n];
                        let dot: f64 = y
                            .iter()
                            .zip(gy)
                            .map(|(&yj, &gj)| yj as f64 * gj as f64)
                            .sum();
                        for j in 0..n {
                            d[i2 * n + j] += y[j] * (gy[j] - dot as f32);
                        }
                    }
                }
            }
            Op::LayerNormRows(a, eps) => {
                if needs(*a) {
                    let xv = val(*a);
                    let (m, n) = (shape_of(*a)[0], shape_of(*a)[1]);
                    let d = slot!(*a);
                    for i2 in 0..m {
                        let x = &xv[i2 * n..(i2 + 1) * n];
                        let gy = &g.data()[i2 * n..(i2 + 1) * n];
                        let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
                        let var = x
                            .iter()
                            .map(|&v| {
                                let c = v as f64 - mean;
                                c * c
                            })
                            .sum::<f64>()
                            / n as f64;
                        let inv = 1.0 / (var + *eps as f64).sqrt();
                        let mut m1 = 0.0f64;
                        let mut m2 = 0.0f64;
                        for j in 0..n {
                            let xh = (x[j] as f64 - mean) * inv;
                            m1 += gy[j] as f64;
                            m2 += gy[j] as f64 * xh;
                        }
                        m1 /= n as f64;
                        m2 /= n as f64;
                        for j in 0..n {
                            let xh = (x[j] as f64 - mean) * inv;
                            d[i2 * n + j] += (inv * (gy[j] as f64 - m1 - xh * m2)) as f32;
                        }
                    }
                }
            }
            Op::MeanAll(a) => {
                if needs(*a) {
                    let numel = shape_of(*a).iter().product::<usize>();
                    let c = g.data()[0] / numel as f32;
                    let d = slot!(*a);
                    for dst in d.iter_mut() {
                        *dst += c;
                    }
                }
            }
            Op::SumAll(a) => {
                if needs(*a) {
                    let c = g.data()[0];
                    let d = slot!(*a);
                    for dst in d.iter_mut() {
                        *dst += c;
                    }
                }
            }
            Op::MeanPoolRows(a, grp) => {
                if needs(*a) {
                    let n = shape_of(*a)[1];
                    let inv = 1.0 / *grp as f32;
                    let d = slot!(*a);
                    for (i2, dst) in d.chunks_mut(n).enumerate() {
                        let gr = &g.data()[(i2 / grp) * n..(i2 / grp + 1) * n];
                        for (v, &s) in dst.iter_mut().zip(gr) {
                            *v += s * inv;
                        }
                    }
                }
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for id in xs {
                    let (m, n) = (shape_of(*id)[0], shape_of(*id)[1]);
                    if needs(*id) {
                        let d = slot!(*id);
                        let src = &g.data()[off * n..(off + m) * n];
                        for (dst, &s) in d.iter_mut().zip(src) {
                            *dst += s;
                        }
                    }
                    off += m;
                }
            }
            Op::SliceRows(a, start, len) => {
                if needs(*a) {
                    let n = shape_of(*a)[1];
                    let d = slot!(*a);
                    let dst = &mut d[start * n..(start + len) * n];
                    for (v, &s) in dst.iter_mut().zip(g.data()) {
                        *v += s;
                    }
                }
            }
            Op::ConcatCols(xs) => {
                let m = self.nodes[i].shape[0];
                let total = self.nodes[i].shape[1];
                let mut off = 0;
                for id in xs {
                    let w = shape_of(*id)[1];
                    if needs(*id) {
                        let d = slot!(*id);
                        for r in 0..m {
                            for j in 0..w {
                                d[r * w + j] += g.data()[r * total + off + j];
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::SliceCols(a, start, len) => {
                if needs(*a) {
                    let (m, n) = (shape_of(*a)[0], shape_of(*a)[1]);
                    let d = slot!(*a);
                    for r in 0..m {
                        for j in 0..*len {
                            d[r * n + start + j] += g.data()[r * len + j];
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                if needs(*a) {
                    let (m, n) = (shape_of(*a)[0], shape_of(*a)[1]);
                    let d = slot!(*a);
                    for r in 0..m {
                        for j in 0..n {
                            d[r * n + j] += g.data()[j * m + r];
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if needs(*a) {
                    let d = slot!(*a);
                    for (dst, &s) in d.iter_mut().zip(g.data()) {
                        *dst += s;
                    }
                }
            }
            Op::Gather(a, idx) => {
                if needs(*a) {
                    let d = slot!(*a);
                    for (pos, &src_idx) in idx.iter().enumerate() {
                        d[src_idx as usize] += g.data()[pos];
                    }
                }
            }
        }
    }

    /// Gradients of the bound parameters by name; parameters untouched by the
    /// loss (or frozen) are absent.
    pub fn collect_grads(&self, params: &ParamNodes) -> Gradients {
        let mut out = Gradients::new();
        for (name, id) in &params.nodes {
            if let Some(g) = self.grad(*id) {
                out.insert(name.clone(), g.clone());
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = a.dims2();
        let (_, n) = b.dims2();
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0f32;
                for p in 0..k {
                    acc += a.at(i, p) * b.at(p, j);
                }
                out.data_mut()[i * n + j] = acc;
            }
        }
        out
    }

    #[test]
    fn matmul_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(m, k, n) in &[(1, 1, 1), (2, 3, 4), (7, 5, 9), (16, 16, 16)] {
            let a = Tensor::randn(&[m, k], 1.0, &mut rng);
            let b = Tensor::randn(&[k, n], 1.0, &mut rng);
            let mut g = Graph::new();
            let an = g.constant_ref(&a);
            let bn = g.constant_ref(&b);
            let c = g.matmul(an, bn).unwrap();
            let want = naive_matmul(&a, &b);
            for (x, y) in g.value(c).data().iter().zip(want.data()) {
                assert!((x - y).abs() <= 1e-5 * y.abs().max(1.0), "{x} vs {y}");
            }
        }
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[4, 2]));
        assert!(matches!(g.matmul(a, b), Err(NnError::Shape { .. })));
    }

    #[test]
    fn softmax_rows_sum_to_one_and_order_preserved() {
        let mut g = Graph::new();
        let a = g.constant(
            Tensor::new(vec![2, 3], vec![0.1, 2.0, -1.0, 5.0, 5.0, 5.0]).unwrap(),
        );
        let s = g.softmax_rows(a).unwrap();
        let v = g.value(s);
        for r in 0..2 {
            let sum: f32 = (0..3).map(|c| v.at(r, c)).sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
        assert!(v.at(0, 1) > v.at(0, 0) && v.at(0, 0) > v.at(0, 2));
        assert!((v.at(1, 0) - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_rows_whitens_each_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::randn(&[3, 16], 2.5, &mut rng);
        let mut g = Graph::new();
        let a = g.constant_ref(&x);
        let y = g.layer_norm_rows(a, 1e-5).unwrap();
        let v = g.value(y);
        for r in 0..3 {
            let mean: f32 = (0..16).map(|c| v.at(r, c)).sum::<f32>() / 16.0;
            let var: f32 = (0..16).map(|c| (v.at(r, c) - mean).powi(2)).sum::<f32>() / 16.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn slice_concat_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[6, 4], 1.0, &mut rng);
        let mut g = Graph::new();
        let a = g.constant_ref(&x);
        let top = g.slice_rows(a, 0, 2).unwrap();
        let rest = g.slice_rows(a, 2, 4).unwrap();
        let back = g.concat_rows(&[top, rest]).unwrap();
        assert_eq!(g.value(back).data(), x.data());

        let left = g.slice_cols(a, 0, 1).unwrap();
        let right = g.slice_cols(a, 1, 3).unwrap();
        let back2 = g.concat_cols(&[left, right]).unwrap();
        assert_eq!(g.value(back2).data(), x.data());
    }

    #[test]
    fn transpose_twice_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::randn(&[3, 5], 1.0, &mut rng);
        let mut g = Graph::new();
        let a = g.constant_ref(&x);
        let t = g.transpose(a).unwrap();
        let tt = g.transpose(t).unwrap();
        assert_eq!(g.shape(t), &[5, 3]);
        assert_eq!(g.value(tt).data(), x.data());
    }

    #[test]
    fn gather_reads_flat_indices_and_scatters_back() {
        let x = Tensor::new(vec![2, 3], vec![10.0, 11.0, 12.0, 13.0, 14.0, 15.0]).unwrap();
        let mut g = Graph::new();
        let a = g.var(x);
        let idx = Arc::new(vec![5u32, 0, 0, 3]);
        let out = g.gather(a, idx, &[2, 2]).unwrap();
        assert_eq!(g.value(out).data(), &[15.0, 10.0, 10.0, 13.0]);
        let s = g.sum_all(out).unwrap();
        g.backward(s).unwrap();
        // index 0 referenced twice, so its gradient accumulates to 2
        assert_eq!(g.grad(a).unwrap().data(), &[2.0, 0.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn gather_rejects_out_of_range() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 2]));
        assert!(g.gather(a, Arc::new(vec![4u32]), &[1]).is_err());
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::from_vec(vec![1.0, 2.0]));
        let v = g.var(Tensor::from_vec(vec![3.0, 4.0]));
        let y = g.mul(c, v).unwrap();
        let l = g.sum_all(y).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(v).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn backward_twice_is_stable() {
        let mut g = Graph::new();
        let v = g.var(Tensor::from_vec(vec![2.0, -1.0]));
        let y = g.mul(v, v).unwrap();
        let l = g.sum_all(y).unwrap();
        g.backward(l).unwrap();
        let first = g.grad(v).unwrap().clone();
        g.backward(l).unwrap();
        assert_eq!(g.grad(v).unwrap().data(), first.data());
        assert_eq!(first.data(), &[4.0, -2.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let v = g.var(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(g.backward(v), Err(NnError::Graph(_))));
    }

    #[test]
    fn forward_is_deterministic_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Tensor::randn(&[8, 8], 1.0, &mut rng);
        let w = Tensor::randn(&[8, 8], 0.3, &mut rng);
        let run = || {
            let mut g = Graph::new();
            let xn = g.constant_ref(&x);
            let wn = g.constant_ref(&w);
            let h = g.matmul(xn, wn).unwrap();
            let h = g.gelu(h).unwrap();
            let h = g.softmax_rows(h).unwrap();
            let l = g.mean_all(h).unwrap();
            g.value(l).data()[0].to_bits()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn eval_f64_matches_f32_forward_closely() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = Tensor::randn(&[4, 6], 1.0, &mut rng);
        let w = Tensor::randn(&[6, 3], 0.5, &mut rng);
        let mut g = Graph::new();
        let xn = g.var(x);
        let wn = g.constant_ref(&w);
        let h = g.matmul(xn, wn).unwrap();
        let h = g.layer_norm_rows(h, 1e-5).unwrap();
        let h = g.gelu(h).unwrap();
        let l = g.mean_all(h).unwrap();
        let f32_val = g.value(l).data()[0] as f64;
        let f64_val = g.eval_f64(l, &[]).unwrap()[0];
        assert!((f32_val - f64_val).abs() < 1e-5, "{f32_val} vs {f64_val}");
    }

    #[test]
    fn mean_pool_rows_groups() {
        let x = Tensor::new(vec![4, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let mut g = Graph::new();
        let a = g.var(x);
        let p = g.mean_pool_rows(a, 2).unwrap();
        assert_eq!(g.value(p).data(), &[2.0, 3.0, 6.0, 7.0]);
        let l = g.sum_all(p).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(a).unwrap().data().iter().all(|&v| v == 0.5));
    }
}
