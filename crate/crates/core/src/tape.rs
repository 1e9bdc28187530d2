//! Reverse-mode differentiation tape.
//!
//! Every forward op appends a node holding its output value and enough
//! saved state to run its adjoint. `backward` walks the nodes in exact
//! reverse append order. A tape is built fresh for every training step.

use crate::error::{Result, TensorError};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{dot, gemm_nn, gemm_nt, gemm_tn, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn node_id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Bmm(Var, Var),
    BmmNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Concat(Vec<Var>),
    SliceLast(Var, usize),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    GatherRows(Var, Vec<usize>),
    RepeatRows(Var, usize),
    Pick(Var, Vec<usize>),
    Reshape(Var),
    Huber(Var, T),
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Gradients produced by [`Tape::backward`], keyed by parameter.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    params: Vec<Option<Tensor<T>>>,
    nodes: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for a parameter; `None` if it was never bound or unreachable.
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(id.0).and_then(Option::as_ref)
    }

    /// One gradient tensor per parameter in `store`; unreachable ones are zero.
    pub fn for_store(&self, store: &ParamStore<T>) -> Vec<Tensor<T>> {
        store
            .ids()
            .map(|id| match self.param(id) {
                Some(g) => g.clone(),
                None => Tensor::zeros(store.get(id).shape()),
            })
            .collect()
    }

    /// Gradient with respect to a leaf input created with [`Tape::input`].
    pub fn wrt(&self, var: Var) -> Option<&[T]> {
        self.nodes.get(var.0).and_then(|g| g.as_deref())
    }
}

#[derive(Debug, Clone)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    bindings: Vec<Option<Var>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

fn is_suffix(full: &[usize], suffix: &[usize]) -> bool {
    suffix.len() <= full.len() && full[full.len() - suffix.len()..] == *suffix
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bindings: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop all nodes so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.bindings.clear();
        self.backward_done = false;
    }

    /// Drop every node appended after the first `len`. Lets a tape keep a
    /// shared prefix (for example prepared retrieval keys) while repeated
    /// forward-only queries are evaluated on top of it.
    pub fn truncate(&mut self, len: usize) {
        if len >= self.nodes.len() {
            return;
        }
        self.nodes.truncate(len);
        for b in self.bindings.iter_mut() {
            if matches!(b, Some(v) if v.0 >= len) {
                *b = None;
            }
        }
        self.backward_done = false;
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; never a differentiation target.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Free-standing differentiable input (not tied to a parameter store).
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Bind a stored parameter. Repeated binds of the same id on one tape
    /// return the same node, so gradients accumulate in one place.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(Some(v)) = self.bindings.get(id.0) {
            return *v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, true);
        self.nodes[v.0].param = Some(id);
        if self.bindings.len() <= id.0 {
            self.bindings.resize(id.0 + 1, None);
        }
        self.bindings[id.0] = Some(v);
        v
    }

    /// Copy of `v`'s value cut off from the graph.
    pub fn stop_gradient(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.push(value, Op::Leaf, false)
    }

    // ---- linear algebra -------------------------------------------------

    /// `a[*, k] · b[k, n] -> [*, n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.value(a).numel() / k.max(1);
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = n;
        let mut out = vec![T::zero(); m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_vec(shape, out)?, Op::MatMul(a, b), rg))
    }

    /// `a[*, k] · b[n, k]ᵀ -> [*, n]`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[1] {
            return Err(mismatch("matmul_nt", sa, sb));
        }
        let k = sb[1];
        let n = sb[0];
        let m = self.value(a).numel() / k.max(1);
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = n;
        let mut out = vec![T::zero(); m * n];
        gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_vec(shape, out)?, Op::MatMulNT(a, b), rg))
    }

    /// Batched `a[B, m, k] · b[B, k, n] -> [B, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(mismatch("bmm", sa, sb));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![T::zero(); bs * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..bs {
            gemm_nn(
                &da[i * m * k..(i + 1) * m * k],
                &db[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_vec(vec![bs, m, n], out)?, Op::Bmm(a, b), rg))
    }

    /// Batched `a[B, m, k] · b[B, n, k]ᵀ -> [B, m, n]`.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
            return Err(mismatch("bmm_nt", sa, sb));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[1]);
        let mut out = vec![T::zero(); bs * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..bs {
            gemm_nt(
                &da[i * m * k..(i + 1) * m * k],
                &db[i * n * k..(i + 1) * n * k],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_vec(vec![bs, m, n], out)?, Op::BmmNT(a, b), rg))
    }

    // ---- elementwise ------------------------------------------------------

    fn broadcast_binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !is_suffix(sa, sb) {
            return Err(mismatch(name, sa, sb));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let nb = db.len();
        let out: Vec<T> = if nb == da.len() {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            da.chunks(nb)
                .flat_map(|chunk| chunk.iter().zip(db).map(|(&x, &y)| f(x, y)))
                .collect()
        };
        let shape = sa.to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_vec(shape, out)?, op, rg))
    }

    /// `a + b`, with `b` broadcast when its shape is a suffix of `a`'s.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(out, Op::AddScalar(a), rg)
    }

    /// `1 - a`
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -T::one());
        self.add_scalar(neg, T::one())
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(out, op, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, T::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, T::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, T::ln, Op::Log(a))
    }

    // ---- shape ops --------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Concatenate along the last axis; leading dims must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(TensorError::EmptyAxis { op: "concat" })?;
        let lead = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        let rows = self.value(first).rows();
        let mut width = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(mismatch("concat", self.shape(first), s));
            }
            width += s[s.len() - 1];
        }
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = lead;
        shape.push(width);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::from_vec(shape, out)?, Op::Concat(parts.to_vec()), rg))
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let d = *s.last().ok_or(TensorError::EmptyAxis { op: "slice_last" })?;
        if start + len > d {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_last",
                index: start + len,
                len: d,
            });
        }
        let v = self.value(a);
        let mut out = Vec::with_capacity(v.rows() * len);
        for r in 0..v.rows() {
            out.extend_from_slice(&v.row(r)[start..start + len]);
        }
        let mut shape = s;
        *shape.last_mut().unwrap() = len;
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_vec(shape, out)?, Op::SliceLast(a, start), rg))
    }

    /// Stack 2-D blocks `[r_i, d]` along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or(TensorError::EmptyAxis { op: "concat_rows" })?;
        let d = self.value(first).last_dim();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1] != d {
                return Err(mismatch("concat_rows", self.shape(first), s));
            }
            rows += s[0];
            out.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::from_vec(vec![rows, d], out)?,
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    /// Rows `start..start+len` of a 2-D tensor.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(mismatch("slice_rows", s, &[start, len]));
        }
        if start + len > s[0] {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_rows",
                index: start + len,
                len: s[0],
            });
        }
        let d = s[1];
        let out = self.value(a).data()[start * d..(start + len) * d].to_vec();
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::from_vec(vec![len, d], out)?,
            Op::SliceRows(a, start),
            rg,
        ))
    }

    /// Rows of a `[n, d]` tensor picked by index. Indices carry no gradient.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let v = self.value(a);
        let n = v.rows();
        let d = v.last_dim();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= n {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    len: n,
                });
            }
            out.extend_from_slice(v.row(i));
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::from_vec(vec![idx.len(), d], out)?,
            Op::GatherRows(a, idx.to_vec()),
            rg,
        ))
    }

    /// Each row of `[n, d]` repeated `times` consecutively: `[n*times, d]`.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Result<Var> {
        let v = self.value(a);
        let d = v.last_dim();
        let n = v.rows();
        let mut out = Vec::with_capacity(n * times * d);
        for r in 0..n {
            for _ in 0..times {
                out.extend_from_slice(v.row(r));
            }
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::from_vec(vec![n * times, d], out)?,
            Op::RepeatRows(a, times),
            rg,
        ))
    }

    /// `out[r] = a[r, idx[r]]` for a `[n, c]` tensor.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let v = self.value(a);
        let c = v.last_dim();
        if v.rows() != idx.len() {
            return Err(mismatch("pick", v.shape(), &[idx.len()]));
        }
        let mut out = Vec::with_capacity(idx.len());
        for (r, &i) in idx.iter().enumerate() {
            if i >= c {
                return Err(TensorError::IndexOutOfRange {
                    op: "pick",
                    index: i,
                    len: c,
                });
            }
            out.push(v.row(r)[i]);
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::from_vec(vec![idx.len()], out)?,
            Op::Pick(a, idx.to_vec()),
            rg,
        ))
    }

    // ---- normalisation / reductions --------------------------------------

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let d = v.last_dim();
        if d == 0 || v.numel() == 0 {
            return Err(TensorError::EmptyAxis { op: "softmax" });
        }
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(d) {
            softmax_in_place(row);
        }
        let shape = v.shape().to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_vec(shape, out)?, Op::Softmax(a), rg))
    }

    /// Softmax over the last axis restricted to entries where `mask` is
    /// true; masked-out entries are exactly zero and receive no gradient.
    /// `mask` has one flag per element of `a`.
    pub fn masked_softmax(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let v = self.value(a);
        let d = v.last_dim();
        if mask.len() != v.numel() {
            return Err(mismatch("masked_softmax", v.shape(), &[mask.len()]));
        }
        if d == 0 || v.numel() == 0 {
            return Err(TensorError::EmptyAxis {
                op: "masked_softmax",
            });
        }
        let mut out = vec![T::zero(); v.numel()];
        for ((row, m), o) in v
            .data()
            .chunks(d)
            .zip(mask.chunks(d))
            .zip(out.chunks_mut(d))
        {
            let mut max = T::neg_infinity();
            for (&x, &keep) in row.iter().zip(m) {
                if keep && x > max {
                    max = x;
                }
            }
            if max == T::neg_infinity() {
                return Err(TensorError::EmptyAxis {
                    op: "masked_softmax",
                });
            }
            let mut total = T::zero();
            for ((&x, &keep), y) in row.iter().zip(m).zip(o.iter_mut()) {
                if keep {
                    *y = (x - max).exp();
                    total += *y;
                }
            }
            for y in o.iter_mut() {
                *y /= total;
            }
        }
        let shape = v.shape().to_vec();
        let rg = self.rg(a);
        // Same adjoint as softmax: zero outputs contribute nothing.
        Ok(self.push(Tensor::from_vec(shape, out)?, Op::Softmax(a), rg))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let d = v.last_dim();
        if d == 0 || v.numel() == 0 {
            return Err(TensorError::EmptyAxis { op: "log_softmax" });
        }
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(d) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&x| (x - max).exp()).fold(T::zero(), |a, b| a + b).ln() + max;
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let shape = v.shape().to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_vec(shape, out)?, Op::LogSoftmax(a), rg))
    }

    /// Layer normalisation over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(mismatch("layer_norm", self.shape(x), self.shape(gain)));
        }
        if d == 0 {
            return Err(TensorError::EmptyAxis { op: "layer_norm" });
        }
        let v = self.value(x);
        let rows = v.rows();
        let dn = T::from_usize(d).unwrap();
        let mut xhat = vec![T::zero(); v.numel()];
        let mut inv_std = vec![T::zero(); rows];
        for r in 0..rows {
            let row = v.row(r);
            let mean = row.iter().fold(T::zero(), |a, &b| a + b) / dn;
            let var = row
                .iter()
                .map(|&z| (z - mean) * (z - mean))
                .fold(T::zero(), |a, b| a + b)
                / dn;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for (o, &z) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (z - mean) * is;
            }
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let out: Vec<T> = xhat
            .chunks(d)
            .flat_map(|row| row.iter().zip(g).zip(b).map(|((&h, &gg), &bb)| h * gg + bb))
            .collect();
        let shape = v.shape().to_vec();
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor::from_vec(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().fold(T::zero(), |acc, &x| acc + x);
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.numel() == 0 {
            return Err(TensorError::EmptyAxis { op: "mean" });
        }
        let s = v.data().iter().fold(T::zero(), |acc, &x| acc + x)
            / T::from_usize(v.numel()).unwrap();
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(s), Op::Mean(a), rg))
    }

    /// Sum over the last axis: `[*, d] -> [*]`.
    pub fn sum_last(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let d = v.last_dim();
        let out: Vec<T> = if d == 0 {
            vec![T::zero(); v.rows()]
        } else {
            v.data()
                .chunks(d)
                .map(|row| row.iter().fold(T::zero(), |acc, &x| acc + x))
                .collect()
        };
        let mut shape = v.shape().to_vec();
        shape.pop();
        let rg = self.rg(a);
        self.push(Tensor::from_vec(shape, out).expect("sum_last shape"), Op::SumLast(a), rg)
    }

    /// Elementwise Huber penalty of a residual with threshold `delta`.
    pub fn huber(&mut self, residual: Var, delta: T) -> Result<Var> {
        if !(delta > T::zero()) {
            return Err(TensorError::Invalid(format!("huber delta must be > 0, got {delta}")));
        }
        let half = T::lit(0.5);
        let out = self.value(residual).map(|r| {
            let a = r.abs();
            if a <= delta {
                half * r * r
            } else {
                delta * (a - half * delta)
            }
        });
        let rg = self.rg(residual);
        Ok(self.push(out, Op::Huber(residual, delta), rg))
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Every bound parameter receives a
    /// gradient of its own shape (zero when unreachable).
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let ls = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(ls.to_vec()));
        }
        self.backward_done = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.node_backward(idx, &g, &mut grads);
        }
        let mut params = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(pid) = node.param {
                if params.len() <= pid.0 {
                    params.resize(pid.0 + 1, None);
                }
                let g = grads[i]
                    .clone()
                    .unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
                params[pid.0] = Some(Tensor::from_vec(node.value.shape().to_vec(), g)?);
            }
        }
        Ok(Gradients {
            params,
            nodes: grads,
        })
    }

    fn node_backward(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let k = vb.shape()[0];
                let n = vb.shape()[1];
                let m = va.numel() / k.max(1);
                if self.rg(*a) {
                    let ga = acc_buf(grads, *a, va.numel());
                    gemm_nt(g, vb.data(), ga, m, n, k);
                }
                if self.rg(*b) {
                    let gb = acc_buf(grads, *b, vb.numel());
                    gemm_tn(va.data(), g, gb, m, k, n);
                }
            }
            Op::MatMulNT(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let n = vb.shape()[0];
                let k = vb.shape()[1];
                let m = va.numel() / k.max(1);
                if self.rg(*a) {
                    let ga = acc_buf(grads, *a, va.numel());
                    gemm_nn(g, vb.data(), ga, m, n, k);
                }
                if self.rg(*b) {
                    let gb = acc_buf(grads, *b, vb.numel());
                    gemm_tn(g, va.data(), gb, m, n, k);
                }
            }
            Op::Bmm(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (bs, m, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
                let n = vb.shape()[2];
                if self.rg(*a) {
                    let ga = acc_buf(grads, *a, va.numel());
                    for i in 0..bs {
                        gemm_nt(
                            &g[i * m * n..(i + 1) * m * n],
                            &vb.data()[i * k * n..(i + 1) * k * n],
                            &mut ga[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                }
                if self.rg(*b) {
                    let gb = acc_buf(grads, *b, vb.numel());
                    for i in 0..bs {
                        gemm_tn(
                            &va.data()[i * m * k..(i + 1) * m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            &mut gb[i * k * n..(i + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
            }
            Op::BmmNT(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (bs, m, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
                let n = vb.shape()[1];
                if self.rg(*a) {
                    let ga = acc_buf(grads, *a, va.numel());
                    for i in 0..bs {
                        gemm_nn(
                            &g[i * m * n..(i + 1) * m * n],
                            &vb.data()[i * n * k..(i + 1) * n * k],
                            &mut ga[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                }
                if self.rg(*b) {
                    let gb = acc_buf(grads, *b, vb.numel());
                    for i in 0..bs {
                        gemm_tn(
                            &g[i * m * n..(i + 1) * m * n],
                            &va.data()[i * m * k..(i + 1) * m * k],
                            &mut gb[i * n * k..(i + 1) * n * k],
                            m,
                            n,
                            k,
                        );
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -T::one()
                } else {
                    T::one()
                };
                if self.rg(*a) {
                    let ga = acc_buf(grads, *a, g.len());
                    for (x, &y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                }
                if self.rg(*b) {
                    let nb = self.value(*b).numel();
                    let gb = acc_buf(grads, *b, nb);
                    for chunk in g.chunks(nb) {
                        for (x, &y) in gb.iter_mut().zip(chunk) {
                            *x += sign * y;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let nb = vb.len();
                if self.rg(*a) {
                    let ga = acc_buf(grads, *a, g.len());
                    for (i, x) in ga.iter_mut().enumerate() {
                        *x += g[i] * vb[i % nb];
                    }
                }
                if self.rg(*b) {
                    let gb = acc_buf(grads, *b, nb);
                    for (i, (&gi, &ai)) in g.iter().zip(va).enumerate() {
                        gb[i % nb] += gi * ai;
                    }
                }
            }
            Op::Scale(a, c) => {
                let ga = acc_buf(grads, *a, g.len());
                for (x, &y) in ga.iter_mut().zip(g) {
                    *x += y * *c;
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                let ga = acc_buf(grads, *a, g.len());
                for (x, &y) in ga.iter_mut().zip(g) {
                    *x += y;
                }
            }
            Op::Concat(parts) => {
                let rows = node.value.rows();
                let width = node.value.last_dim();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    if self.rg(p) {
                        let gp = acc_buf(grads, p, rows * w);
                        for r in 0..rows {
                            let src = &g[r * width + offset..r * width + offset + w];
                            for (x, &y) in gp[r * w..(r + 1) * w].iter_mut().zip(src) {
                                *x += y;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceLast(a, start) => {
                let va = self.value(*a);
                let d = va.last_dim();
                let len = node.value.last_dim();
                let ga = acc_buf(grads, *a, va.numel());
                for r in 0..va.rows() {
                    for (x, &y) in ga[r * d + start..r * d + start + len]
                        .iter_mut()
                        .zip(&g[r * len..(r + 1) * len])
                    {
                        *x += y;
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if self.rg(p) {
                        let gp = acc_buf(grads, p, n);
                        for (x, &y) in gp.iter_mut().zip(&g[offset..offset + n]) {
                            *x += y;
                        }
                    }
                    offset += n;
                }
            }
            Op::SliceRows(a, start) => {
                let d = node.value.last_dim();
                let va = self.value(*a);
                let ga = acc_buf(grads, *a, va.numel());
                for (x, &y) in ga[start * d..start * d + g.len()].iter_mut().zip(g) {
                    *x += y;
                }
            }
            Op::Tanh(a) => {
                let ga = acc_buf(grads, *a, g.len());
                for ((x, &y), &o) in ga.iter_mut().zip(g).zip(out) {
                    *x += y * (T::one() - o * o);
                }
            }
            Op::Sigmoid(a) => {
                let ga = acc_buf(grads, *a, g.len());
                for ((x, &y), &o) in ga.iter_mut().zip(g).zip(out) {
                    *x += y * o * (T::one() - o);
                }
            }
            Op::Relu(a) => {
                let input = self.value(*a).data();
                let ga = acc_buf(grads, *a, g.len());
                for ((x, &y), &i) in ga.iter_mut().zip(g).zip(input) {
                    if i > T::zero() {
                        *x += y;
                    }
                }
            }
            Op::Exp(a) => {
                let ga = acc_buf(grads, *a, g.len());
                for ((x, &y), &o) in ga.iter_mut().zip(g).zip(out) {
                    *x += y * o;
                }
            }
            Op::Log(a) => {
                let input = self.value(*a).data();
                let ga = acc_buf(grads, *a, g.len());
                for ((x, &y), &i) in ga.iter_mut().zip(g).zip(input) {
                    *x += y / i;
                }
            }
            Op::Softmax(a) => {
                let d = node.value.last_dim();
                let ga = acc_buf(grads, *a, g.len());
                for ((gx, gy), y) in ga.chunks_mut(d).zip(g.chunks(d)).zip(out.chunks(d)) {
                    let s = dot(gy, y);
                    for ((x, &gi), &yi) in gx.iter_mut().zip(gy).zip(y) {
                        *x += yi * (gi - s);
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let d = node.value.last_dim();
                let ga = acc_buf(grads, *a, g.len());
                for ((gx, gy), y) in ga.chunks_mut(d).zip(g.chunks(d)).zip(out.chunks(d)) {
                    let s = gy.iter().fold(T::zero(), |acc, &v| acc + v);
                    for ((x, &gi), &yi) in gx.iter_mut().zip(gy).zip(y) {
                        *x += gi - yi.exp() * s;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = node.value.last_dim();
                let dn = T::from_usize(d).unwrap();
                let gv = self.value(*gain).data();
                if self.rg(*gain) {
                    let gg = acc_buf(grads, *gain, d);
                    for (gy, h) in g.chunks(d).zip(xhat.chunks(d)) {
                        for ((x, &a), &b) in gg.iter_mut().zip(gy).zip(h) {
                            *x += a * b;
                        }
                    }
                }
                if self.rg(*bias) {
                    let gb = acc_buf(grads, *bias, d);
                    for gy in g.chunks(d) {
                        for (x, &a) in gb.iter_mut().zip(gy) {
                            *x += a;
                        }
                    }
                }
                if self.rg(*x) {
                    let gx = acc_buf(grads, *x, g.len());
                    let mut dxhat = vec![T::zero(); d];
                    for (r, ((gxr, gy), h)) in gx
                        .chunks_mut(d)
                        .zip(g.chunks(d))
                        .zip(xhat.chunks(d))
                        .enumerate()
                    {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..d {
                            dxhat[j] = gy[j] * gv[j];
                            s1 += dxhat[j];
                            s2 += dxhat[j] * h[j];
                        }
                        let c = inv_std[r] / dn;
                        for j in 0..d {
                            gxr[j] += c * (dn * dxhat[j] - s1 - h[j] * s2);
                        }
                    }
                }
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                let ga = acc_buf(grads, *a, n);
                for x in ga.iter_mut() {
                    *x += g[0];
                }
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                let c = g[0] / T::from_usize(n).unwrap();
                let ga = acc_buf(grads, *a, n);
                for x in ga.iter_mut() {
                    *x += c;
                }
            }
            Op::SumLast(a) => {
                let va = self.value(*a);
                let d = va.last_dim();
                let ga = acc_buf(grads, *a, va.numel());
                if d > 0 {
                    for (row, &gi) in ga.chunks_mut(d).zip(g) {
                        for x in row.iter_mut() {
                            *x += gi;
                        }
                    }
                }
            }
            Op::GatherRows(a, idx) => {
                let va = self.value(*a);
                let d = va.last_dim();
                let ga = acc_buf(grads, *a, va.numel());
                for (r, &i) in idx.iter().enumerate() {
                    for (x, &y) in ga[i * d..(i + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                        *x += y;
                    }
                }
            }
            Op::RepeatRows(a, times) => {
                let va = self.value(*a);
                let d = va.last_dim();
                let ga = acc_buf(grads, *a, va.numel());
                for (r, block) in g.chunks(d * times).enumerate() {
                    for rep in block.chunks(d) {
                        for (x, &y) in ga[r * d..(r + 1) * d].iter_mut().zip(rep) {
                            *x += y;
                        }
                    }
                }
            }
            Op::Pick(a, idx) => {
                let va = self.value(*a);
                let c = va.last_dim();
                let ga = acc_buf(grads, *a, va.numel());
                for (r, &i) in idx.iter().enumerate() {
                    ga[r * c + i] += g[r];
                }
            }
            Op::Huber(a, delta) => {
                let input = self.value(*a).data();
                let ga = acc_buf(grads, *a, g.len());
                for ((x, &y), &r) in ga.iter_mut().zip(g).zip(input) {
                    let d = if r.abs() <= *delta {
                        r
                    } else {
                        *delta * r.signum()
                    };
                    *x += y * d;
                }
            }
        }
    }
}

fn acc_buf<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, n: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}
