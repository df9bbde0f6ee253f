//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Nodes are appended in execution order, so the tape is already a
//! topological order; `backward` walks it once in reverse.

use std::sync::Arc;

use crate::numerics::attention::{
    attention_backward, attention_forward, AttentionCache, AttentionMask,
};
use crate::numerics::kernels::{
    self, apply_rope, matmul_acc, matmul_at_acc, matmul_bt_acc, rms_norm_row,
    rope_table, silu, silu_grad,
};
use crate::numerics::{NumericsError, Tensor};
use crate::scalar::Scalar;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulScalar(Var, Var),
    AddScalar(Var, Var),
    Scale(Var, T),
    Sum(Var),
    MinZero(Var),
    Silu(Var),
    Reshape(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<T>,
    },
    Rope {
        x: Var,
        heads: usize,
        cos: Vec<T>,
        sin: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    SoftmaxRows(Var),
    ConcatRows(Vec<Var>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Arc<AttentionMask>,
        intensities: Option<Var>,
        cache: AttentionCache<T>,
    },
    /// Scalar-valued op whose local Jacobian was computed during forward.
    Fused(Vec<(Var, Tensor<T>)>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> NumericsError {
    NumericsError::Shape {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf; no gradient is accumulated for it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (av, bv) = (self.value(a), self.value(b));
        let out = matmul(av, bv)?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), NumericsError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (av, bv) = (self.value(a), self.value(b));
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(av.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// `x[r, :] + row` for every row.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var, NumericsError> {
        let (xv, rv) = (self.value(x), self.value(row));
        if rv.len() != xv.cols() {
            return Err(shape_err("add_row", xv.shape(), rv.shape()));
        }
        let mut out = xv.clone();
        let cols = xv.cols();
        for r in 0..xv.rows() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        debug_assert_eq!(out.cols(), cols);
        Ok(self.push(out, Op::AddRow(x, row), &[x, row]))
    }

    fn check_scalar(&self, op: &'static str, s: Var) -> Result<T, NumericsError> {
        let sv = self.value(s);
        if sv.len() != 1 {
            return Err(shape_err(op, sv.shape(), &[1]));
        }
        Ok(sv.item())
    }

    /// Elementwise product with a one-element tensor.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var, NumericsError> {
        let sv = self.check_scalar("mul_scalar", s)?;
        let out = self.value(x).map(|v| v * sv);
        Ok(self.push(out, Op::MulScalar(x, s), &[x, s]))
    }

    /// Elementwise sum with a one-element tensor.
    pub fn add_scalar(&mut self, x: Var, s: Var) -> Result<Var, NumericsError> {
        let sv = self.check_scalar("add_scalar", s)?;
        let out = self.value(x).map(|v| v + sv);
        Ok(self.push(out, Op::AddScalar(x, s), &[x, s]))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let out = self.value(x).map(|v| v * factor);
        self.push(out, Op::Scale(x, factor), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total: f64 = self.value(x).data().iter().map(|v| v.as_f64()).sum();
        self.push(Tensor::scalar(T::from_f64_lossy(total)), Op::Sum(x), &[x])
    }

    /// `min(0, x)` elementwise; the subgradient at 0 is 0.
    pub fn min_zero(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.min(T::zero()));
        self.push(out, Op::MinZero(x), &[x])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(silu);
        self.push(out, Op::Silu(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, NumericsError> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var, NumericsError> {
        let (xv, gv) = (self.value(x), self.value(gain));
        if gv.len() != xv.cols() {
            return Err(shape_err("rms_norm", xv.shape(), gv.shape()));
        }
        let mut out = Tensor::zeros(xv.shape());
        let eps = T::from_f64_lossy(eps);
        let mut inv_rms = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            inv_rms.push(rms_norm_row(xv.row(r), gv.data(), eps, out.row_mut(r)));
        }
        Ok(self.push(out, Op::RmsNorm { x, gain, inv_rms }, &[x, gain]))
    }

    /// Rotary position encoding over `heads` heads for rows at positions
    /// `offset..offset + rows`.
    pub fn rope(
        &mut self,
        x: Var,
        heads: usize,
        offset: usize,
        base: f64,
    ) -> Result<Var, NumericsError> {
        let xv = self.value(x);
        let (rows, width) = (xv.rows(), xv.cols());
        if width % heads != 0 || (width / heads) % 2 != 0 {
            return Err(shape_err("rope", xv.shape(), &[heads]));
        }
        let dh = width / heads;
        let (cos, sin) = rope_table::<T>(offset..offset + rows, dh, base);
        let mut out = Tensor::zeros(xv.shape());
        apply_rope(
            xv.data(),
            out.data_mut(),
            rows,
            heads,
            dh,
            &cos,
            &sin,
            false,
        );
        Ok(self.push(
            out,
            Op::Rope {
                x,
                heads,
                cos,
                sin,
            },
            &[x],
        ))
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumericsError> {
        let tv = self.value(table);
        let d = tv.cols();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= tv.rows() {
                return Err(NumericsError::Index {
                    index: id,
                    bound: tv.rows(),
                });
            }
            data.extend_from_slice(tv.row(id));
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var, NumericsError> {
        let xv = self.value(x);
        let d = xv.cols();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= xv.rows() {
                return Err(NumericsError::Index {
                    index: r,
                    bound: xv.rows(),
                });
            }
            data.extend_from_slice(xv.row(r));
        }
        let out = Tensor::new(vec![rows.len(), d], data)?;
        Ok(self.push(
            out,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            &[x],
        ))
    }

    /// Stacks rank-2 tensors with equal column counts along rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let cols = parts.first().map_or(0, |&p| self.value(p).cols());
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != cols {
                return Err(shape_err("concat_rows", &[rows, cols], pv.shape()));
            }
            rows += pv.rows();
            data.extend_from_slice(pv.data());
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Post-softmax probabilities saved by an attention node
    /// (`heads × len × len`).
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { cache, .. } => Some(&cache.probs),
            _ => None,
        }
    }

    /// Row softmax with an optional constant additive bias.
    pub fn softmax_rows(
        &mut self,
        x: Var,
        bias: Option<&Tensor<T>>,
    ) -> Result<Var, NumericsError> {
        let out = softmax_rows(self.value(x), bias)?;
        Ok(self.push(out, Op::SoftmaxRows(x), &[x]))
    }

    /// Causal multi-head attention; `intensities` (one per mask span, all
    /// `≤ 0`) are added to the scaled scores of biased cells.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Arc<AttentionMask>,
        intensities: Option<Var>,
    ) -> Result<Var, NumericsError> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.shape() != kv.shape() || qv.shape() != vv.shape() || qv.rank() != 2 {
            return Err(shape_err("attention", qv.shape(), kv.shape()));
        }
        if qv.cols() % heads != 0 {
            return Err(shape_err("attention heads", qv.shape(), &[heads]));
        }
        let len = qv.rows();
        let int = intensities.map(|i| self.value(i).data().to_vec());
        let (out, cache) = attention_forward(
            qv.data(),
            kv.data(),
            vv.data(),
            len,
            heads,
            &mask,
            int.as_deref(),
        )?;
        let out = Tensor::new(qv.shape().to_vec(), out)?;
        let mut parents = vec![q, k, v];
        parents.extend(intensities);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                mask,
                intensities,
                cache,
            },
            &parents,
        ))
    }

    /// Mean negative log-likelihood over the rows selected by `mask`.
    /// Accumulated in `f64`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<Var, NumericsError> {
        let lv = self.value(logits);
        let (value, grad) = cross_entropy_with_grad(lv, targets, mask)?;
        Ok(self.push(
            Tensor::scalar(T::from_f64_lossy(value)),
            Op::Fused(vec![(logits, grad)]),
            &[logits],
        ))
    }

    /// Scalar op with precomputed local gradients; building block for the
    /// filter losses.
    pub fn fused_scalar(&mut self, value: f64, locals: Vec<(Var, Tensor<T>)>) -> Var {
        let parents: Vec<Var> = locals.iter().map(|(v, _)| *v).collect();
        self.push(
            Tensor::scalar(T::from_f64_lossy(value)),
            Op::Fused(locals),
            &parents,
        )
    }

    /// Reverse sweep from a one-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>, NumericsError> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(shape_err("backward root", rv.shape(), &[1]));
        }
        if !rv.all_finite() {
            return Err(NumericsError::NonFinite("backward root"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(rv.shape(), T::one()));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            } else {
                self.backward_node(node, &g, &mut grads);
            }
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, delta: Tensor<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if needs(*a) {
                    let mut da = Tensor::zeros(av.shape());
                    matmul_bt_acc(g.data(), bv.data(), da.data_mut(), m, n, k);
                    acc(*a, da);
                }
                if needs(*b) {
                    let mut db = Tensor::zeros(bv.shape());
                    matmul_at_acc(av.data(), g.data(), db.data_mut(), m, k, n);
                    acc(*b, db);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if needs(*a) {
                    acc(*a, elementwise(g, bv, |x, y| x * y));
                }
                if needs(*b) {
                    acc(*b, elementwise(g, av, |x, y| x * y));
                }
            }
            Op::AddRow(x, row) => {
                acc(*x, g.clone());
                if needs(*row) {
                    let rv = self.value(*row);
                    let mut dr = Tensor::zeros(rv.shape());
                    for r in 0..g.rows() {
                        for (d, &v) in dr.data_mut().iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    acc(*row, dr);
                }
            }
            Op::MulScalar(x, s) => {
                let sv = self.value(*s).item();
                if needs(*x) {
                    acc(*x, g.map(|v| v * sv));
                }
                if needs(*s) {
                    let xv = self.value(*x);
                    let d: T = g.data().iter().zip(xv.data()).map(|(&a, &b)| a * b).sum();
                    acc(*s, Tensor::full(self.shape(*s), d));
                }
            }
            Op::AddScalar(x, s) => {
                acc(*x, g.clone());
                if needs(*s) {
                    let d: T = g.data().iter().copied().sum();
                    acc(*s, Tensor::full(self.shape(*s), d));
                }
            }
            Op::Scale(x, f) => acc(*x, g.map(|v| v * *f)),
            Op::Sum(x) => {
                let gv = g.item();
                acc(*x, Tensor::full(self.shape(*x), gv));
            }
            Op::MinZero(x) => {
                let xv = self.value(*x);
                acc(
                    *x,
                    elementwise(g, xv, |gv, x| if x < T::zero() { gv } else { T::zero() }),
                );
            }
            Op::Silu(x) => {
                let xv = self.value(*x);
                acc(*x, elementwise(g, xv, |gv, x| gv * silu_grad(x)));
            }
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                acc(*x, g.clone().reshape(shape).expect("reshape back"));
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (xv, gv) = (self.value(*x), self.value(*gain));
                let d = xv.cols();
                let dn = T::from_usize_lossy(d);
                let mut dx = Tensor::zeros(xv.shape());
                let mut dgain = Tensor::zeros(gv.shape());
                for r in 0..xv.rows() {
                    let (xr, gr) = (xv.row(r), g.row(r));
                    let inv = inv_rms[r];
                    // y = x·inv·γ ; dx = inv·(gγ) − x·inv³·⟨gγ, x⟩/d
                    let mut proj = T::zero();
                    for j in 0..d {
                        proj += gr[j] * gv.data()[j] * xr[j];
                        dgain.data_mut()[j] += gr[j] * xr[j] * inv;
                    }
                    let coef = inv * inv * inv * proj / dn;
                    let dxr = dx.row_mut(r);
                    for j in 0..d {
                        dxr[j] = inv * gr[j] * gv.data()[j] - xr[j] * coef;
                    }
                }
                acc(*x, dx);
                acc(*gain, dgain);
            }
            Op::Rope {
                x,
                heads,
                cos,
                sin,
            } => {
                let (rows, width) = (g.rows(), g.cols());
                let mut dx = Tensor::zeros(g.shape());
                apply_rope(
                    g.data(),
                    dx.data_mut(),
                    rows,
                    *heads,
                    width / heads,
                    cos,
                    sin,
                    true,
                );
                acc(*x, dx);
            }
            Op::Embedding { table, ids } => {
                let tv = self.value(*table);
                let mut dt = Tensor::zeros(tv.shape());
                for (r, &id) in ids.iter().enumerate() {
                    kernels::axpy(T::one(), g.row(r), dt.row_mut(id));
                }
                acc(*table, dt);
            }
            Op::SelectRows { x, rows } => {
                let mut dx = Tensor::zeros(self.shape(*x));
                for (i, &r) in rows.iter().enumerate() {
                    kernels::axpy(T::one(), g.row(i), dx.row_mut(r));
                }
                acc(*x, dx);
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let mut dx = Tensor::zeros(y.shape());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let inner = kernels::dot(yr, gr);
                    for (d, (&yv, &gv)) in dx.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                        *d = yv * (gv - inner);
                    }
                }
                acc(*x, dx);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    let piece = Tensor::new(self.shape(p).to_vec(), g.data()[start..start + n].to_vec())
                        .expect("concat piece");
                    acc(p, piece);
                    start += n;
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                mask,
                intensities,
                cache,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let soft = intensities.map(needs).unwrap_or(false);
                let grads_att = attention_backward(
                    qv.data(),
                    kv.data(),
                    vv.data(),
                    g.data(),
                    qv.rows(),
                    *heads,
                    mask,
                    soft,
                    cache,
                );
                let shape = qv.shape().to_vec();
                acc(*q, Tensor::new(shape.clone(), grads_att.dq).expect("dq"));
                acc(*k, Tensor::new(shape.clone(), grads_att.dk).expect("dk"));
                acc(*v, Tensor::new(shape, grads_att.dv).expect("dv"));
                if let (Some(i), Some(di)) = (intensities, grads_att.dintensities) {
                    acc(*i, Tensor::new(self.shape(*i).to_vec(), di).expect("dI"));
                }
            }
            Op::Fused(locals) => {
                let gv = g.item();
                for (v, local) in locals {
                    if needs(*v) {
                        acc(*v, local.map(|x| x * gv));
                    }
                }
            }
        }
    }
}

fn elementwise<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

/// Gradients of one backward sweep, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Standard matrix product of two rank-2 tensors.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, NumericsError> {
    if a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows() {
        return Err(shape_err("matmul", a.shape(), b.shape()));
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = Tensor::zeros(&[m, n]);
    matmul_acc(a.data(), b.data(), out.data_mut(), m, k, n);
    Ok(out)
}

/// Row-wise softmax of `x + bias`. `-inf` bias entries map to exactly zero.
pub fn softmax_rows<T: Scalar>(
    x: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>, NumericsError> {
    let mut out = x.clone();
    if let Some(b) = bias {
        let broadcast_row = b.len() == x.cols();
        if b.shape() != x.shape() && !broadcast_row {
            return Err(shape_err("softmax_rows bias", x.shape(), b.shape()));
        }
        for r in 0..x.rows() {
            let br = if broadcast_row { b.data() } else { b.row(r) };
            for (o, &bv) in out.row_mut(r).iter_mut().zip(br) {
                *o += bv;
            }
        }
    }
    for r in 0..x.rows() {
        if !kernels::softmax_in_place(out.row_mut(r)) {
            return Err(NumericsError::EmptyRow { row: r });
        }
    }
    Ok(out)
}

fn cross_entropy_with_grad<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[usize],
    mask: &[bool],
) -> Result<(f64, Tensor<T>), NumericsError> {
    let rows = logits.rows();
    if targets.len() != rows || mask.len() != rows {
        return Err(shape_err(
            "cross_entropy",
            logits.shape(),
            &[targets.len(), mask.len()],
        ));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(NumericsError::EmptyMask);
    }
    let v = logits.cols();
    let mut grad = Tensor::zeros(logits.shape());
    let mut total = 0.0f64;
    for r in (0..rows).filter(|&r| mask[r]) {
        let t = targets[r];
        if t >= v {
            return Err(NumericsError::Index { index: t, bound: v });
        }
        let row = logits.row(r);
        let max = row.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|x| (x.as_f64() - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - row[t].as_f64();
        let gr = grad.row_mut(r);
        for (j, gj) in gr.iter_mut().enumerate() {
            let p = (row[j].as_f64() - lse).exp();
            let onehot = if j == t { 1.0 } else { 0.0 };
            *gj = T::from_f64_lossy((p - onehot) / count as f64);
        }
    }
    Ok((total / count as f64, grad))
}

/// Mean negative log-likelihood (no graph).
pub fn cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[usize],
    mask: &[bool],
) -> Result<f64, NumericsError> {
    cross_entropy_with_grad(logits, targets, mask).map(|(v, _)| v)
}
