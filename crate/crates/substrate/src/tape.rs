//! Reverse-mode differentiation by operation recording.
//!
//! Every operation appends a node holding its forward value and enough
//! saved state to run its vector-Jacobian product. `backward` walks the
//! nodes in reverse and accumulates gradients into every node that
//! transitively depends on a gradient-requiring leaf.

use std::sync::Arc;

use crate::error::{Result, SubstrateError};
use crate::kernels::{self, AttnLayout, AttnMask};
use crate::real::{gemm, Real};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Differentiable operation defined outside this crate.
///
/// `backward` receives the upstream gradient, the forward inputs and output,
/// and a flag per input saying whether its gradient is wanted. It returns
/// one entry per input (`None` where not wanted).
pub trait Function<R: Real> {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        grad: &Tensor<R>,
        inputs: &[&Tensor<R>],
        output: &Tensor<R>,
        wanted: &[bool],
    ) -> Vec<Option<Tensor<R>>>;
}

enum Op<R: Real> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, R),
    MatMul(Var, Var),
    Gelu(Var),
    Tanh(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<R>,
        rstd: Vec<R>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttnLayout,
        probs: Vec<R>,
    },
    Softmax(Var),
    ConcatRows(Vec<Var>),
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    Reshape(Var),
    InsertCls {
        cls: Var,
        tokens: Var,
        groups: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<R>,
    },
    KlToTarget {
        logits: Var,
        target: Vec<R>,
        probs: Vec<R>,
    },
    Mse(Var, Var),
    Sum(Var),
    Mean(Var),
    Custom {
        inputs: Vec<Var>,
        function: Box<dyn Function<R>>,
    },
}

struct Node<R: Real> {
    value: Arc<Tensor<R>>,
    op: Op<R>,
    requires_grad: bool,
}

/// Recording of one forward computation.
pub struct Tape<R: Real> {
    nodes: Vec<Node<R>>,
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape<R: Real>(op: &'static str, a: &Tensor<R>, b: &Tensor<R>) {
    assert_eq!(a.shape(), b.shape(), "{op}: shape mismatch");
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<R>, op: Op<R>, requires_grad: bool) -> Var {
        self.push_shared(Arc::new(value), op, requires_grad)
    }

    fn push_shared(&mut self, value: Arc<Tensor<R>>, op: Op<R>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    pub fn shared_value(&self, v: Var) -> Arc<Tensor<R>> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor<R>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf without gradient.
    pub fn constant(&mut self, value: Tensor<R>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf sharing storage with the caller (parameters, cached inputs).
    pub fn leaf_shared(&mut self, value: Arc<Tensor<R>>, requires_grad: bool) -> Var {
        self.push_shared(value, Op::Leaf, requires_grad)
    }

    /// Same forward value, no gradient path back through it.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.shared_value(v);
        self.push_shared(value, Op::Leaf, false)
    }

    /// True when every recorded value is finite.
    pub fn all_finite(&self) -> bool {
        self.nodes.iter().all(|n| n.value.is_finite())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("add", x, y);
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let out = Tensor::new(x.shape().to_vec(), data).expect("add");
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("sub", x, y);
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p - q).collect();
        let out = Tensor::new(x.shape().to_vec(), data).expect("sub");
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("mul", x, y);
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let out = Tensor::new(x.shape().to_vec(), data).expect("mul");
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    /// Adds a `[n]` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (x, r) = (self.value(a), self.value(row));
        let n = x.last_dim();
        assert_eq!(r.len(), n, "add_row: row length");
        let mut out = x.clone();
        for chunk in out.data_mut().chunks_mut(n) {
            for (o, &b) in chunk.iter_mut().zip(r.data()) {
                *o += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(out, Op::AddRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, s: R) -> Var {
        let out = self.value(a).map(|v| v * s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert!(x.ndim() == 2 && y.ndim() == 2, "matmul: operands must be 2-D");
        let (m, k, n) = (x.shape()[0], x.shape()[1], y.shape()[1]);
        assert_eq!(y.shape()[0], k, "matmul: inner extent");
        let mut out = Tensor::zeros(&[m, n]);
        gemm(m, k, n, R::one(), x.data(), false, y.data(), false, R::zero(), out.data_mut());
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(kernels::gelu);
        let rg = self.rg(a);
        self.push(out, Op::Gelu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.tanh());
        let rg = self.rg(a);
        self.push(out, Op::Tanh(a), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let d = xv.last_dim();
        assert!(d >= 2, "layer_norm: extent {d} < 2");
        assert_eq!(self.value(gain).len(), d, "layer_norm: gain length");
        assert_eq!(self.value(bias).len(), d, "layer_norm: bias length");
        let (out, cache) = kernels::layer_norm_fwd(xv, self.value(gain).data(), self.value(bias).data());
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat: cache.xhat,
                rstd: cache.rstd,
            },
            rg,
        )
    }

    /// Multi-head attention over `groups` independent row blocks of
    /// `q`, `k`, `v` (each `[groups * len, dim]`).
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        groups: usize,
        mask: AttnMask<R>,
    ) -> Result<Var> {
        let qv = self.value(q);
        assert!(qv.ndim() == 2, "attention: q must be 2-D");
        same_shape("attention", qv, self.value(k));
        same_shape("attention", qv, self.value(v));
        let (rows, dim) = (qv.shape()[0], qv.shape()[1]);
        if heads == 0 || dim % heads != 0 || groups == 0 || rows % groups != 0 {
            return Err(SubstrateError::InvalidArgument {
                op: "attention",
                reason: format!("rows {rows}, dim {dim}, heads {heads}, groups {groups}"),
            });
        }
        let layout = AttnLayout {
            groups,
            len: rows / groups,
            heads,
            dim,
        };
        if let AttnMask::Additive(m) = &mask {
            if m.shape() != [layout.len, layout.len] {
                return Err(SubstrateError::ShapeMismatch {
                    op: "attention",
                    lhs: vec![layout.len, layout.len],
                    rhs: m.shape().to_vec(),
                });
            }
        }
        let (out, probs) = kernels::attention_fwd(
            qv.data(),
            self.value(k).data(),
            self.value(v).data(),
            layout,
            &mask,
        )?;
        let out = Tensor::new(vec![rows, dim], out)?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            },
            rg,
        ))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = kernels::softmax_rows(self.value(a))?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Softmax(a), rg))
    }

    /// Stacks the rows of each input (1-D inputs count as one row).
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows: no inputs");
        let n = self.value(parts[0]).last_dim();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.last_dim(), n, "concat_rows: width mismatch");
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(vec![rows, n], data).expect("concat_rows");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let t = self.value(x);
        let n = t.last_dim();
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            data.extend_from_slice(t.row(r));
        }
        let out = Tensor::new(vec![rows.len(), n], data).expect("select_rows");
        let rg = self.rg(x);
        self.push(
            out,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        )
    }

    pub fn row(&mut self, x: Var, r: usize) -> Var {
        self.select_rows(x, &[r])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).reshape(shape).expect("reshape: element count");
        let rg = self.rg(x);
        self.push(out, Op::Reshape(x), rg)
    }

    /// Prepends the `[d]` class token to each of the `groups` blocks of
    /// `tokens` (`[groups * n, d]`), giving `[groups * (n + 1), d]`.
    pub fn insert_cls(&mut self, cls: Var, tokens: Var, groups: usize) -> Var {
        let (c, t) = (self.value(cls), self.value(tokens));
        let d = t.last_dim();
        assert_eq!(c.len(), d, "insert_cls: token width");
        assert_eq!(t.rows() % groups, 0, "insert_cls: groups");
        let n = t.rows() / groups;
        let mut data = Vec::with_capacity((t.rows() + groups) * d);
        for g in 0..groups {
            data.extend_from_slice(c.data());
            data.extend_from_slice(&t.data()[g * n * d..(g + 1) * n * d]);
        }
        let out = Tensor::new(vec![groups * (n + 1), d], data).expect("insert_cls");
        let rg = self.rg(cls) || self.rg(tokens);
        self.push(out, Op::InsertCls { cls, tokens, groups }, rg)
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let l = self.value(logits);
        let k = l.last_dim();
        if labels.len() != l.rows() {
            return Err(SubstrateError::InvalidArgument {
                op: "cross_entropy",
                reason: format!("{} labels for {} rows", labels.len(), l.rows()),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(SubstrateError::InvalidArgument {
                op: "cross_entropy",
                reason: format!("label {bad} outside 0..{k}"),
            });
        }
        let logp = kernels::log_softmax_rows(l)?;
        let rows = l.rows();
        let loss = labels
            .iter()
            .enumerate()
            .map(|(r, &y)| -logp.data()[r * k + y])
            .sum::<R>()
            / R::lit(rows as f64);
        let probs = logp.data().iter().map(|v| v.exp()).collect();
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean over rows of `KL(softmax(target) || softmax(logits))`; the
    /// target is a constant.
    pub fn kl_to_target(&mut self, logits: Var, target_logits: &Tensor<R>) -> Result<Var> {
        let l = self.value(logits);
        if l.shape() != target_logits.shape() {
            return Err(SubstrateError::ShapeMismatch {
                op: "kl_to_target",
                lhs: l.shape().to_vec(),
                rhs: target_logits.shape().to_vec(),
            });
        }
        let logq = kernels::log_softmax_rows(l)?;
        let logp = kernels::log_softmax_rows(target_logits)?;
        let rows = l.rows();
        let mut total = R::zero();
        for (&lp, &lq) in logp.data().iter().zip(logq.data()) {
            let p = lp.exp();
            if p > R::zero() {
                total += p * (lp - lq);
            }
        }
        let loss = total / R::lit(rows as f64);
        let target = logp.data().iter().map(|v| v.exp()).collect();
        let probs = logq.data().iter().map(|v| v.exp()).collect();
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::KlToTarget {
                logits,
                target,
                probs,
            },
            rg,
        ))
    }

    /// Mean of squared differences over all coordinates.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(SubstrateError::ShapeMismatch {
                op: "mse",
                lhs: x.shape().to_vec(),
                rhs: y.shape().to_vec(),
            });
        }
        let n = R::lit(x.len() as f64);
        let loss = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &q)| (p - q) * (p - q))
            .sum::<R>()
            / n;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(loss), Op::Mse(a, b), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.sum() / R::lit(t.len() as f64);
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Records an externally defined operation whose forward value has
    /// already been computed.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor<R>, function: Box<dyn Function<R>>) -> Var {
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                function,
            },
            rg,
        )
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<R>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(SubstrateError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<R>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), R::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let (before, rest) = grads.split_at_mut(i);
            let Some(g) = rest[0].as_ref() else { continue };
            self.backward_node(node, g, before);
        }
        Ok(Gradients { grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Tensor<R>>], v: Var) -> &'g mut Tensor<R> {
        grads[v.0].get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()))
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<R>>], v: Var, t: Tensor<R>) {
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        }
    }

    fn accumulate_with(&self, grads: &mut [Option<Tensor<R>>], v: Var, f: impl Fn(usize, R) -> R, g: &Tensor<R>) {
        let dst = self.slot(grads, v);
        for (i, (d, &gi)) in dst.data_mut().iter_mut().zip(g.data()).enumerate() {
            *d += f(i, gi);
        }
    }

    fn backward_node(&self, node: &Node<R>, g: &Tensor<R>, grads: &mut [Option<Tensor<R>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.rg(v) {
                        self.accumulate_with(grads, v, |_, gi| gi, g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    self.accumulate_with(grads, *a, |_, gi| gi, g);
                }
                if self.rg(*b) {
                    self.accumulate_with(grads, *b, |_, gi| -gi, g);
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let other = self.value(*b).data();
                    self.accumulate_with(grads, *a, |i, gi| gi * other[i], g);
                }
                if self.rg(*b) {
                    let other = self.value(*a).data();
                    self.accumulate_with(grads, *b, |i, gi| gi * other[i], g);
                }
            }
            Op::AddRow(a, row) => {
                if self.rg(*a) {
                    self.accumulate_with(grads, *a, |_, gi| gi, g);
                }
                if self.rg(*row) {
                    let n = g.last_dim();
                    let dst = self.slot(grads, *row);
                    for chunk in g.data().chunks(n) {
                        for (d, &gi) in dst.data_mut().iter_mut().zip(chunk) {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Scale(a, s) => {
                if self.rg(*a) {
                    let s = *s;
                    self.accumulate_with(grads, *a, |_, gi| gi * s, g);
                }
            }
            Op::MatMul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                let (m, k, n) = (x.shape()[0], x.shape()[1], y.shape()[1]);
                if self.rg(*a) {
                    let dst = self.slot(grads, *a);
                    gemm(m, n, k, R::one(), g.data(), false, y.data(), true, R::one(), dst.data_mut());
                }
                if self.rg(*b) {
                    let dst = self.slot(grads, *b);
                    gemm(k, m, n, R::one(), x.data(), true, g.data(), false, R::one(), dst.data_mut());
                }
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                self.accumulate_with(grads, *a, |i, gi| gi * kernels::gelu_grad(x[i]), g);
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                self.accumulate_with(grads, *a, |i, gi| gi * (R::one() - y[i] * y[i]), g);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => self.layer_norm_backward(g, *x, *gain, *bias, xhat, rstd, grads),
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            } => self.attention_backward(g, *q, *k, *v, *layout, probs, grads),
            Op::Softmax(a) => {
                let y = node.value.data();
                let n = node.value.last_dim();
                let mut out = Tensor::zeros(g.shape());
                for ((gr, yr), or) in g.data().chunks(n).zip(y.chunks(n)).zip(out.data_mut().chunks_mut(n)) {
                    let dot: R = gr.iter().zip(yr).map(|(&p, &q)| p * q).sum();
                    for c in 0..n {
                        or[c] = yr[c] * (gr[c] - dot);
                    }
                }
                self.accumulate(grads, *a, out);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.rg(p) {
                        let chunk = &g.data()[offset..offset + len];
                        let dst = self.slot(grads, p);
                        for (d, &gi) in dst.data_mut().iter_mut().zip(chunk) {
                            *d += gi;
                        }
                    }
                    offset += len;
                }
            }
            Op::SelectRows { x, rows } => {
                let n = g.last_dim();
                let dst = self.slot(grads, *x);
                for (i, &r) in rows.iter().enumerate() {
                    let src = &g.data()[i * n..(i + 1) * n];
                    for (d, &gi) in dst.data_mut()[r * n..(r + 1) * n].iter_mut().zip(src) {
                        *d += gi;
                    }
                }
            }
            Op::Reshape(x) => {
                self.accumulate_with(grads, *x, |_, gi| gi, g);
            }
            Op::InsertCls { cls, tokens, groups } => {
                let d = g.last_dim();
                let n = g.rows() / groups - 1;
                if self.rg(*cls) {
                    let dst = self.slot(grads, *cls);
                    for grp in 0..*groups {
                        let src = &g.data()[grp * (n + 1) * d..grp * (n + 1) * d + d];
                        for (dd, &gi) in dst.data_mut().iter_mut().zip(src) {
                            *dd += gi;
                        }
                    }
                }
                if self.rg(*tokens) {
                    let dst = self.slot(grads, *tokens);
                    for grp in 0..*groups {
                        let src = &g.data()[(grp * (n + 1) + 1) * d..(grp + 1) * (n + 1) * d];
                        let out = &mut dst.data_mut()[grp * n * d..(grp + 1) * n * d];
                        for (dd, &gi) in out.iter_mut().zip(src) {
                            *dd += gi;
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = self.value(*logits).last_dim();
                let scale = g.item() / R::lit(labels.len() as f64);
                let dst = self.slot(grads, *logits);
                for (r, &y) in labels.iter().enumerate() {
                    for c in 0..k {
                        let onehot = if c == y { R::one() } else { R::zero() };
                        dst.data_mut()[r * k + c] += scale * (probs[r * k + c] - onehot);
                    }
                }
            }
            Op::KlToTarget { logits, target, probs } => {
                let rows = self.value(*logits).rows();
                let scale = g.item() / R::lit(rows as f64);
                let dst = self.slot(grads, *logits);
                for (i, d) in dst.data_mut().iter_mut().enumerate() {
                    *d += scale * (probs[i] - target[i]);
                }
            }
            Op::Mse(a, b) => {
                let (x, y) = (self.value(*a).data(), self.value(*b).data());
                let scale = g.item() * R::lit(2.0) / R::lit(x.len() as f64);
                if self.rg(*a) {
                    let dst = self.slot(grads, *a);
                    for (i, d) in dst.data_mut().iter_mut().enumerate() {
                        *d += scale * (x[i] - y[i]);
                    }
                }
                if self.rg(*b) {
                    let dst = self.slot(grads, *b);
                    for (i, d) in dst.data_mut().iter_mut().enumerate() {
                        *d -= scale * (x[i] - y[i]);
                    }
                }
            }
            Op::Sum(a) => {
                let gi = g.item();
                let dst = self.slot(grads, *a);
                for d in dst.data_mut() {
                    *d += gi;
                }
            }
            Op::Mean(a) => {
                let dst = self.slot(grads, *a);
                let gi = g.item() / R::lit(dst.len() as f64);
                for d in dst.data_mut() {
                    *d += gi;
                }
            }
            Op::Custom { inputs, function } => {
                let values: Vec<&Tensor<R>> = inputs.iter().map(|&v| self.value(v)).collect();
                let wanted: Vec<bool> = inputs.iter().map(|&v| self.rg(v)).collect();
                let outs = function.backward(g, &values, &node.value, &wanted);
                assert_eq!(outs.len(), inputs.len(), "{}: gradient count", function.name());
                for ((&v, out), want) in inputs.iter().zip(outs).zip(wanted) {
                    if let (Some(t), true) = (out, want) {
                        assert_eq!(t.shape(), self.value(v).shape(), "{}: gradient shape", function.name());
                        self.accumulate(grads, v, t);
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn layer_norm_backward(
        &self,
        g: &Tensor<R>,
        x: Var,
        gain: Var,
        bias: Var,
        xhat: &[R],
        rstd: &[R],
        grads: &mut [Option<Tensor<R>>],
    ) {
        let d = g.last_dim();
        let rows = g.rows();
        let gain_v = self.value(gain).data();
        if self.rg(bias) {
            let dst = self.slot(grads, bias);
            for chunk in g.data().chunks(d) {
                for (dd, &gi) in dst.data_mut().iter_mut().zip(chunk) {
                    *dd += gi;
                }
            }
        }
        if self.rg(gain) {
            let dst = self.slot(grads, gain);
            for r in 0..rows {
                for c in 0..d {
                    dst.data_mut()[c] += g.data()[r * d + c] * xhat[r * d + c];
                }
            }
        }
        if self.rg(x) {
            let inv_d = R::one() / R::lit(d as f64);
            let dst = self.slot(grads, x);
            let mut dxhat = vec![R::zero(); d];
            for r in 0..rows {
                let gr = &g.data()[r * d..(r + 1) * d];
                let xh = &xhat[r * d..(r + 1) * d];
                let mut mean_dx = R::zero();
                let mut mean_dxx = R::zero();
                for c in 0..d {
                    dxhat[c] = gr[c] * gain_v[c];
                    mean_dx += dxhat[c];
                    mean_dxx += dxhat[c] * xh[c];
                }
                mean_dx *= inv_d;
                mean_dxx *= inv_d;
                let out = &mut dst.data_mut()[r * d..(r + 1) * d];
                for c in 0..d {
                    out[c] += rstd[r] * (dxhat[c] - mean_dx - xh[c] * mean_dxx);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &Tensor<R>,
        q: Var,
        k: Var,
        v: Var,
        layout: AttnLayout,
        probs: &[R],
        grads: &mut [Option<Tensor<R>>],
    ) {
        let AttnLayout { groups, len, heads, dim } = layout;
        let dh = layout.head_dim();
        let scale = R::one() / R::lit(dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let go = g.data();
        let mut dq = vec![R::zero(); qv.len()];
        let mut dk = vec![R::zero(); kv.len()];
        let mut dv = vec![R::zero(); vv.len()];
        let mut dp = vec![R::zero(); len];
        for grp in 0..groups {
            for h in 0..heads {
                let col = h * dh;
                let pbase = (grp * heads + h) * len * len;
                for i in 0..len {
                    let ri = (grp * len + i) * dim + col;
                    let prow = &probs[pbase + i * len..pbase + (i + 1) * len];
                    let mut rowdot = R::zero();
                    for j in 0..len {
                        if prow[j] == R::zero() {
                            dp[j] = R::zero();
                            continue;
                        }
                        let rj = (grp * len + j) * dim + col;
                        let mut s = R::zero();
                        for c in 0..dh {
                            s += go[ri + c] * vv[rj + c];
                        }
                        dp[j] = s;
                        rowdot += prow[j] * s;
                    }
                    for j in 0..len {
                        let p = prow[j];
                        if p == R::zero() {
                            continue;
                        }
                        let rj = (grp * len + j) * dim + col;
                        let ds = p * (dp[j] - rowdot) * scale;
                        for c in 0..dh {
                            dq[ri + c] += ds * kv[rj + c];
                            dk[rj + c] += ds * qv[ri + c];
                            dv[rj + c] += p * go[ri + c];
                        }
                    }
                }
            }
        }
        let shape = self.value(q).shape().to_vec();
        for (var, data) in [(q, dq), (k, dk), (v, dv)] {
            if self.rg(var) {
                self.accumulate(grads, var, Tensor::new(shape.clone(), data).expect("attention grad"));
            }
        }
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<R> {
    grads: Vec<Option<Tensor<R>>>,
}

impl<R: Real> Gradients<R> {
    /// Gradient of the loss with respect to `v`; `None` when no path exists.
    pub fn get(&self, v: Var) -> Option<&Tensor<R>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<R>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detached_values_carry_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.variable(Tensor::from_vec(vec![1.0, 2.0]));
        let y = tape.detach(x);
        let z = tape.mul(x, y);
        let s = tape.sum(z);
        let grads = tape.backward(s).unwrap();
        // d/dx sum(x * stop(x)) = stop(x)
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 2.0]);
        assert!(grads.get(y).is_none());
    }

    #[test]
    fn gradients_accumulate_over_reuse() {
        let mut tape = Tape::<f64>::new();
        let x = tape.variable(Tensor::from_vec(vec![3.0]));
        let y = tape.add(x, x);
        let z = tape.mul(y, x);
        let s = tape.sum(z);
        let grads = tape.backward(s).unwrap();
        // z = 2x^2
        assert_eq!(grads.get(x).unwrap().data(), &[12.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.variable(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(SubstrateError::NonScalarLoss(_))));
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut tape = Tape::<f32>::new();
        let x = tape.variable(Tensor::zeros(&[2, 3]));
        assert!(tape.cross_entropy(x, &[0, 3]).is_err());
        assert!(tape.cross_entropy(x, &[0]).is_err());
    }
}
