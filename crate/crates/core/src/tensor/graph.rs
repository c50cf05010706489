use std::rc::Rc;

use super::kernels::{gemm_nn, gemm_nt};
use super::{numel, permute_index, strides, Real, Tensor};
use crate::error::TensorError;

/// Index sentinel meaning "produce zero" in [`Graph::gather`] (used for padding).
pub const GATHER_ZERO: u32 = u32::MAX;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Sigmoid,
    /// Exact erf form.
    Gelu,
    Relu,
    Exp,
    Ln,
    Recip,
    Square,
    Sqrt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
}

/// Broadcast layout of a binary op: per-axis element strides of both operands
/// against the output shape (0 on broadcast axes).
#[derive(Clone, Debug)]
pub(crate) struct Broadcast {
    pub out_shape: Vec<usize>,
    pub a_strides: Vec<usize>,
    pub b_strides: Vec<usize>,
}

pub(crate) enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        b_shared: bool,
        trans_b: bool,
    },
    Binary {
        a: Var,
        b: Var,
        kind: BinaryKind,
        bcast: Option<Broadcast>,
    },
    Scale {
        a: Var,
        s: T,
    },
    AddScalar {
        a: Var,
    },
    Unary {
        a: Var,
        kind: UnaryKind,
    },
    Softmax {
        a: Var,
    },
    LogSoftmax {
        a: Var,
    },
    /// Normalization over the leading rows of a `[rows, C]` view.
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        invstd: Vec<T>,
        train: bool,
    },
    /// Normalization over the trailing channel axis.
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        invstd: Vec<T>,
    },
    Sum {
        a: Var,
        outer: usize,
        axis: usize,
        inner: usize,
    },
    Max {
        a: Var,
        outer: usize,
        axis: usize,
        inner: usize,
        argmax: Vec<u32>,
    },
    Gather {
        a: Var,
        index: Rc<[u32]>,
    },
    Reshape {
        a: Var,
    },
    Concat {
        parts: Vec<Var>,
        outer: usize,
        widths: Vec<usize>,
    },
    Narrow {
        a: Var,
        outer: usize,
        width: usize,
        start: usize,
        len: usize,
    },
}

/// Primitive kind, reported in diagnostics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    Unary(UnaryKind),
    Softmax,
    LogSoftmax,
    BatchNorm,
    LayerNorm,
    Sum,
    Max,
    Gather,
    Reshape,
    Concat,
    Narrow,
}

impl<T> Op<T> {
    pub(crate) fn kind(&self) -> NodeKind {
        match self {
            Op::Leaf => NodeKind::Leaf,
            Op::MatMul { .. } => NodeKind::MatMul,
            Op::Binary { kind, .. } => match kind {
                BinaryKind::Add => NodeKind::Add,
                BinaryKind::Sub => NodeKind::Sub,
                BinaryKind::Mul => NodeKind::Mul,
            },
            Op::Scale { .. } => NodeKind::Scale,
            Op::AddScalar { .. } => NodeKind::AddScalar,
            Op::Unary { kind, .. } => NodeKind::Unary(*kind),
            Op::Softmax { .. } => NodeKind::Softmax,
            Op::LogSoftmax { .. } => NodeKind::LogSoftmax,
            Op::BatchNorm { .. } => NodeKind::BatchNorm,
            Op::LayerNorm { .. } => NodeKind::LayerNorm,
            Op::Sum { .. } => NodeKind::Sum,
            Op::Max { .. } => NodeKind::Max,
            Op::Gather { .. } => NodeKind::Gather,
            Op::Reshape { .. } => NodeKind::Reshape,
            Op::Concat { .. } => NodeKind::Concat,
            Op::Narrow { .. } => NodeKind::Narrow,
        }
    }
}

fn op_name(kind: NodeKind) -> &'static str {
    match kind {
        NodeKind::Leaf => "leaf",
        NodeKind::MatMul => "matmul",
        NodeKind::Add => "add",
        NodeKind::Sub => "sub",
        NodeKind::Mul => "mul",
        NodeKind::Scale => "scale",
        NodeKind::AddScalar => "add_scalar",
        NodeKind::Unary(UnaryKind::Sigmoid) => "sigmoid",
        NodeKind::Unary(UnaryKind::Gelu) => "gelu",
        NodeKind::Unary(UnaryKind::Relu) => "relu",
        NodeKind::Unary(UnaryKind::Exp) => "exp",
        NodeKind::Unary(UnaryKind::Ln) => "ln",
        NodeKind::Unary(UnaryKind::Recip) => "recip",
        NodeKind::Unary(UnaryKind::Square) => "square",
        NodeKind::Unary(UnaryKind::Sqrt) => "sqrt",
        NodeKind::Softmax => "softmax",
        NodeKind::LogSoftmax => "log_softmax",
        NodeKind::BatchNorm => "batch_norm",
        NodeKind::LayerNorm => "layer_norm",
        NodeKind::Sum => "sum",
        NodeKind::Max => "max",
        NodeKind::Gather => "gather",
        NodeKind::Reshape => "reshape",
        NodeKind::Concat => "concat",
        NodeKind::Narrow => "narrow",
    }
}

pub(crate) struct Node<T> {
    pub value: Tensor<T>,
    pub op: Op<T>,
    pub requires_grad: bool,
}

/// Append-only tape. Node order is a topological order by construction.
pub struct Graph<T> {
    pub(crate) nodes: Vec<Node<T>>,
    pub(crate) fault: Option<NodeKind>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::Shape { op, detail }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), fault: None }
    }

    /// Test fixture: perturbs the backward rule of every node of `kind` by a
    /// relative 1e-3, so gradient audits have a known-bad case to reject.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, kind: NodeKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn kind(&self, v: Var) -> NodeKind {
        self.nodes[v.0].op.kind()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf node. Leaves are not checked for finiteness beyond construction.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var, TensorError> {
        let node = self.nodes.len();
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name(op.kind()), node });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(node))
    }

    // ---- linear algebra -------------------------------------------------

    /// `[.., m, k] · [.., k, n]`; `b` may also be a plain `[k, n]` shared
    /// across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_impl(a, b, false)
    }

    /// `[.., m, k] · [.., n, k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, TensorError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if trans_b { (sb[sb.len() - 1], sb[sb.len() - 2]) } else { (sb[sb.len() - 2], sb[sb.len() - 1]) };
        let batch_dims = &sa[..sa.len() - 2];
        let b_shared = sb.len() == 2 && !batch_dims.is_empty();
        if k != kb || (!b_shared && &sb[..sb.len() - 2] != batch_dims) {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?} (trans_b={trans_b})")));
        }
        let batch = numel(batch_dims);
        let mut out = vec![T::zero(); batch * m * n];
        {
            let ad = self.data(a);
            let bd = self.data(b);
            for bi in 0..batch {
                let a_blk = &ad[bi * m * k..(bi + 1) * m * k];
                let b_blk = if b_shared { bd } else { &bd[bi * k * n..(bi + 1) * k * n] };
                let c_blk = &mut out[bi * m * n..(bi + 1) * m * n];
                if trans_b {
                    gemm_nt(m, k, n, a_blk, b_blk, c_blk);
                } else {
                    gemm_nn(m, k, n, a_blk, b_blk, c_blk);
                }
            }
        }
        let mut shape = batch_dims.to_vec();
        shape.extend([m, n]);
        self.push(Tensor { shape, data: out }, Op::MatMul { a, b, batch, m, k, n, b_shared, trans_b }, &[a, b])
    }

    // ---- elementwise ------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, BinaryKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, BinaryKind::Mul)
    }

    fn binary(&mut self, a: Var, b: Var, kind: BinaryKind) -> Result<Var, TensorError> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let f = |x: T, y: T| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
        };
        if sa == sb {
            let data: Vec<T> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
            let shape = sa.to_vec();
            return self.push(Tensor { shape, data }, Op::Binary { a, b, kind, bcast: None }, &[a, b]);
        }
        let bc = broadcast_layout(sa, sb).ok_or_else(|| {
            shape_err(
                op_name(match kind {
                    BinaryKind::Add => NodeKind::Add,
                    BinaryKind::Sub => NodeKind::Sub,
                    BinaryKind::Mul => NodeKind::Mul,
                }),
                format!("cannot broadcast {sa:?} with {sb:?}"),
            )
        })?;
        let ad = self.data(a);
        let bd = self.data(b);
        let mut data = Vec::with_capacity(numel(&bc.out_shape));
        for_each_broadcast(&bc, |_, ia, ib| data.push(f(ad[ia], bd[ib])));
        let shape = bc.out_shape.clone();
        self.push(Tensor { shape, data }, Op::Binary { a, b, kind, bcast: Some(bc) }, &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var, TensorError> {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| x * s).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor { shape, data }, Op::Scale { a, s }, &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Result<Var, TensorError> {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| x + s).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor { shape, data }, Op::AddScalar { a }, &[a])
    }

    pub fn unary(&mut self, a: Var, kind: UnaryKind) -> Result<Var, TensorError> {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| unary_fwd(kind, x)).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor { shape, data }, Op::Unary { a, kind }, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, UnaryKind::Sigmoid)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, UnaryKind::Gelu)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, UnaryKind::Relu)
    }

    // ---- normalizations -----------------------------------------------------

    pub fn softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.value(a);
        let n = *t.shape().last().unwrap();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(n) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            let inv = T::one() / s;
            for v in row.iter_mut() {
                *v *= inv;
            }
        }
        let shape = t.shape().to_vec();
        self.push(Tensor { shape, data }, Op::Softmax { a }, &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.value(a);
        let n = *t.shape().last().unwrap();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(n) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let s: T = row.iter().map(|&v| (v - mx).exp()).sum();
            let lse = mx + s.ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let shape = t.shape().to_vec();
        self.push(Tensor { shape, data }, Op::LogSoftmax { a }, &[a])
    }

    /// Training-mode batch norm over every leading position of a channel-last
    /// tensor. Returns the output and the batch mean and (biased) variance.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, Vec<T>, Vec<T>), TensorError> {
        let c = self.check_affine("batch_norm", x, gamma, beta)?;
        let xd = self.data(x);
        let rows = xd.len() / c;
        let inv_rows = T::one() / T::of(rows as f64);
        let mut mean = vec![T::zero(); c];
        for row in xd.chunks(c) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m *= inv_rows);
        let mut var = vec![T::zero(); c];
        for row in xd.chunks(c) {
            for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                let d = v - m;
                *s += d * d;
            }
        }
        var.iter_mut().for_each(|s| *s *= inv_rows);
        let invstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (xhat, data) = self.affine_normalize(x, gamma, beta, &mean, &invstd, c);
        let shape = self.shape(x).to_vec();
        let out = self.push(
            Tensor { shape, data },
            Op::BatchNorm { x, gamma, beta, xhat, invstd, train: true },
            &[x, gamma, beta],
        )?;
        Ok((out, mean, var))
    }

    /// Inference-mode batch norm with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: T,
    ) -> Result<Var, TensorError> {
        let c = self.check_affine("batch_norm", x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(shape_err("batch_norm", "running statistics width".into()));
        }
        let invstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (xhat, data) = self.affine_normalize(x, gamma, beta, mean, &invstd, c);
        let shape = self.shape(x).to_vec();
        self.push(
            Tensor { shape, data },
            Op::BatchNorm { x, gamma, beta, xhat, invstd, train: false },
            &[x, gamma, beta],
        )
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var, TensorError> {
        let c = self.check_affine("layer_norm", x, gamma, beta)?;
        let xd = self.data(x);
        let gd = self.data(gamma);
        let bd = self.data(beta);
        let inv_c = T::one() / T::of(c as f64);
        let rows = xd.len() / c;
        let mut xhat = Vec::with_capacity(xd.len());
        let mut invstd = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(xd.len());
        for row in xd.chunks(c) {
            let m: T = row.iter().copied().sum::<T>() * inv_c;
            let v: T = row.iter().map(|&x| (x - m) * (x - m)).sum::<T>() * inv_c;
            let is = T::one() / (v + eps).sqrt();
            invstd.push(is);
            for ((&x, &g), &b) in row.iter().zip(gd).zip(bd) {
                let h = (x - m) * is;
                xhat.push(h);
                data.push(g * h + b);
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(Tensor { shape, data }, Op::LayerNorm { x, gamma, beta, xhat, invstd }, &[x, gamma, beta])
    }

    fn check_affine(&self, op: &'static str, x: Var, gamma: Var, beta: Var) -> Result<usize, TensorError> {
        let c = *self.shape(x).last().unwrap();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err(
                op,
                format!("x {:?}, gamma {:?}, beta {:?}", self.shape(x), self.shape(gamma), self.shape(beta)),
            ));
        }
        Ok(c)
    }

    fn affine_normalize(&self, x: Var, gamma: Var, beta: Var, mean: &[T], invstd: &[T], c: usize) -> (Vec<T>, Vec<T>) {
        let xd = self.data(x);
        let gd = self.data(gamma);
        let bd = self.data(beta);
        let mut xhat = Vec::with_capacity(xd.len());
        let mut data = Vec::with_capacity(xd.len());
        for row in xd.chunks(c) {
            for j in 0..c {
                let h = (row[j] - mean[j]) * invstd[j];
                xhat.push(h);
                data.push(gd[j] * h + bd[j]);
            }
        }
        (xhat, data)
    }

    // ---- reductions ---------------------------------------------------------

    /// Sum along `axis`, keeping it as a size-1 dimension.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let (outer, len, inner, shape) = self.axis_split("sum", a, axis)?;
        let ad = self.data(a);
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut data[o * inner..(o + 1) * inner];
            for l in 0..len {
                let src = &ad[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        self.push(Tensor { shape, data }, Op::Sum { a, outer, axis: len, inner }, &[a])
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let len = *self.shape(a).get(axis).ok_or_else(|| shape_err("mean", format!("axis {axis}")))?;
        let s = self.sum_axis(a, axis)?;
        self.scale(s, T::one() / T::of(len as f64))
    }

    /// Max along `axis`, keeping it as a size-1 dimension. Ties resolve to the
    /// first index.
    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let (outer, len, inner, shape) = self.axis_split("max", a, axis)?;
        let ad = self.data(a);
        let mut data = vec![T::neg_infinity(); outer * inner];
        let mut argmax = vec![0u32; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    let v = ad[(o * len + l) * inner + i];
                    let d = o * inner + i;
                    if v > data[d] {
                        data[d] = v;
                        argmax[d] = l as u32;
                    }
                }
            }
        }
        self.push(Tensor { shape, data }, Op::Max { a, outer, axis: len, inner, argmax }, &[a])
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum_all(&mut self, a: Var) -> Result<Var, TensorError> {
        let n = self.value(a).len();
        let r = self.reshape(a, &[n])?;
        self.sum_axis(r, 0)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var, TensorError> {
        let n = self.value(a).len();
        let s = self.sum_all(a)?;
        self.scale(s, T::one() / T::of(n as f64))
    }

    fn axis_split(
        &self,
        op: &'static str,
        a: Var,
        axis: usize,
    ) -> Result<(usize, usize, usize, Vec<usize>), TensorError> {
        let s = self.shape(a);
        if axis >= s.len() {
            return Err(shape_err(op, format!("axis {axis} for shape {s:?}")));
        }
        let outer = numel(&s[..axis]);
        let inner = numel(&s[axis + 1..]);
        let mut shape = s.to_vec();
        shape[axis] = 1;
        Ok((outer, s[axis], inner, shape))
    }

    // ---- layout ---------------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(a);
        if numel(shape) != t.len() || shape.contains(&0) {
            return Err(shape_err("reshape", format!("{:?} -> {shape:?}", t.shape())));
        }
        let value = Tensor { shape: shape.to_vec(), data: t.data().to_vec() };
        self.push(value, Op::Reshape { a }, &[a])
    }

    /// `out[i] = a[index[i]]`, or zero where `index[i] == GATHER_ZERO`.
    pub fn gather(&mut self, a: Var, index: Rc<[u32]>, shape: &[usize]) -> Result<Var, TensorError> {
        let ad = self.data(a);
        if numel(shape) != index.len() {
            return Err(shape_err("gather", format!("{} indices for shape {shape:?}", index.len())));
        }
        let n = ad.len();
        let mut data = Vec::with_capacity(index.len());
        for &i in index.iter() {
            if i == GATHER_ZERO {
                data.push(T::zero());
            } else if (i as usize) < n {
                data.push(ad[i as usize]);
            } else {
                return Err(shape_err("gather", format!("index {i} out of bounds for {n}")));
            }
        }
        self.push(Tensor { shape: shape.to_vec(), data }, Op::Gather { a, index }, &[a])
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var, TensorError> {
        let s = self.shape(a).to_vec();
        let idx = permute_index(&s, perm)?;
        let shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
        self.gather(a, idx.into(), &shape)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = self.shape(*parts.first().ok_or_else(|| shape_err("concat", "no inputs".into()))?).to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", format!("axis {axis} for {first:?}")));
        }
        let outer = numel(&first[..axis]);
        let inner = numel(&first[axis + 1..]);
        let mut widths = Vec::with_capacity(parts.len());
        let mut total_axis = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return Err(shape_err("concat", format!("{first:?} vs {s:?} on axis {axis}")));
            }
            total_axis += s[axis];
            widths.push(s[axis] * inner);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.data(p)[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first;
        shape[axis] = total_axis;
        self.push(Tensor { shape, data }, Op::Concat { parts: parts.to_vec(), outer, widths }, parts)
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, TensorError> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(shape_err("narrow", format!("[{start}, {}) on axis {axis} of {s:?}", start + len)));
        }
        let outer = numel(&s[..axis]);
        let inner = numel(&s[axis + 1..]);
        let width = s[axis] * inner;
        let ad = self.data(a);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * width + start * inner;
            data.extend_from_slice(&ad[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        self.push(Tensor { shape, data }, Op::Narrow { a, outer, width, start: start * inner, len: len * inner }, &[a])
    }

    /// Splits along `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, a: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>, TensorError> {
        let total = *self.shape(a).get(axis).ok_or_else(|| shape_err("split", format!("axis {axis}")))?;
        if sizes.iter().sum::<usize>() != total {
            return Err(shape_err("split", format!("sizes {sizes:?} do not sum to {total}")));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.narrow(a, axis, start, s)?);
            start += s;
        }
        Ok(out)
    }
}

pub(crate) fn unary_fwd<T: Real>(kind: UnaryKind, x: T) -> T {
    match kind {
        UnaryKind::Sigmoid => {
            if x >= T::zero() {
                T::one() / (T::one() + (-x).exp())
            } else {
                let e = x.exp();
                e / (T::one() + e)
            }
        }
        UnaryKind::Gelu => T::of(0.5) * x * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf()),
        UnaryKind::Relu => x.max(T::zero()),
        UnaryKind::Exp => x.exp(),
        UnaryKind::Ln => x.ln(),
        UnaryKind::Recip => T::one() / x,
        UnaryKind::Square => x * x,
        UnaryKind::Sqrt => x.sqrt(),
    }
}

/// Numpy-style broadcast of two shapes (shorter shape is left-padded with 1s).
pub(crate) fn broadcast_layout(sa: &[usize], sb: &[usize]) -> Option<Broadcast> {
    let rank = sa.len().max(sb.len());
    let pad = |s: &[usize]| {
        let mut v = vec![1; rank - s.len()];
        v.extend_from_slice(s);
        v
    };
    let pa = pad(sa);
    let pb = pad(sb);
    let mut out = Vec::with_capacity(rank);
    for (&x, &y) in pa.iter().zip(&pb) {
        if x == y || y == 1 {
            out.push(x);
        } else if x == 1 {
            out.push(y);
        } else {
            return None;
        }
    }
    let stride_of = |p: &[usize]| {
        let st = strides(p);
        p.iter().zip(st).zip(&out).map(|((&d, s), &o)| if d == 1 && o != 1 { 0 } else { s }).collect::<Vec<_>>()
    };
    Some(Broadcast { a_strides: stride_of(&pa), b_strides: stride_of(&pb), out_shape: out })
}

/// Visits every output element in row-major order with the matching operand
/// offsets.
pub(crate) fn for_each_broadcast(bc: &Broadcast, mut f: impl FnMut(usize, usize, usize)) {
    let rank = bc.out_shape.len();
    let last = bc.out_shape[rank - 1];
    let (sa_last, sb_last) = (bc.a_strides[rank - 1], bc.b_strides[rank - 1]);
    let rows = numel(&bc.out_shape[..rank - 1]);
    let mut counter = vec![0usize; rank.saturating_sub(1)];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut o = 0;
    for _ in 0..rows {
        for j in 0..last {
            f(o, oa + j * sa_last, ob + j * sb_last);
            o += 1;
        }
        for ax in (0..rank - 1).rev() {
            counter[ax] += 1;
            oa += bc.a_strides[ax];
            ob += bc.b_strides[ax];
            if counter[ax] < bc.out_shape[ax] {
                break;
            }
            oa -= bc.a_strides[ax] * bc.out_shape[ax];
            ob -= bc.b_strides[ax] * bc.out_shape[ax];
            counter[ax] = 0;
        }
    }
}
