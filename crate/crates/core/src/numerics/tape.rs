//! Reverse-mode differentiation over a linear record of tensor operations.
//!
//! A [`Tape`] is built fresh for every forward pass. Backward walks the
//! records in exact reverse order and may be run once per tape.

use std::fmt;

use crate::error::{shape_err, ApexError, Result};

use super::kernels::{self, Activation};
use super::{gemm, MatMut, MatRef, Real, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation defined outside this module.
///
/// Receives the input values, the forward output and the output gradient,
/// and returns one optional gradient per input (in input order).
pub trait CustomBackward<T: Real>: Send + Sync {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>>;
}

enum Op<T: Real> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Activate(Var, Activation),
    RmsNorm { x: Var, gain: Var, inv: Vec<T> },
    Embed { table: Var, ids: Vec<usize> },
    Attention { q: Var, k: Var, v: Var, heads: usize, seq_len: usize, probs: Vec<T> },
    Softmax(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    GroupSqNorms { x: Var, rows_per_sample: usize, width: usize },
    ColMeanStd { x: Var, means: Vec<T> },
    SumAll(Var),
    Custom { inputs: Vec<Var>, rule: Box<dyn CustomBackward<T>> },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Operation record for one forward pass.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Real> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).field("consumed", &self.consumed).finish()
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    /// Record a leaf; it receives a gradient iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let ng = t.requires_grad();
        self.push(t, Op::Leaf, ng)
    }

    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.with_grad(true))
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.with_grad(false))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = kernels::matmul(self.value(a), self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|x| x * c);
        let ng = self.ng(&[a]);
        self.push(value, Op::Scale(a, c), ng)
    }

    pub fn activate(&mut self, a: Var, act: Activation) -> Var {
        let value = self.value(a).map(|x| act.apply(x));
        let ng = self.ng(&[a]);
        self.push(value, Op::Activate(a, act), ng)
    }

    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: T) -> Result<Var> {
        let (value, inv) = kernels::rms_norm_with_stats(self.value(x), self.value(gain), eps)?;
        let ng = self.ng(&[x, gain]);
        Ok(self.push(value, Op::RmsNorm { x, gain, inv }, ng))
    }

    /// Gather rows of `table` (`[n x d]`) by `ids`, giving `[ids.len() x d]`.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (n, _) = t.shape2()?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
            return Err(ApexError::Index(format!("embedding id {bad} outside table of {n} rows")));
        }
        let value = t.gather_rows(ids)?;
        let ng = self.ng(&[table]);
        Ok(self.push(value, Op::Embed { table, ids: ids.to_vec() }, ng))
    }

    /// Multi-head attention; output is the concatenation of head outputs.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, seq_len: usize, causal: bool) -> Result<Var> {
        let (rows, dm) = self.value(q).shape2()?;
        for other in [k, v] {
            if self.value(other).dims() != [rows, dm] {
                return Err(shape_err!("attention q/k/v shapes differ"));
            }
        }
        let (out, probs) = kernels::attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            dm,
            heads,
            seq_len,
            causal,
        )?;
        let ng = self.ng(&[q, k, v]);
        let value = Tensor::from_parts(vec![rows, dm], out);
        // Causal masking is baked into the stored probabilities.
        Ok(self.push(value, Op::Attention { q, k, v, heads, seq_len, probs }, ng))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let value = kernels::softmax_rows(self.value(x))?;
        let ng = self.ng(&[x]);
        Ok(self.push(value, Op::Softmax(x), ng))
    }

    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (loss, probs) = kernels::cross_entropy_with_probs(self.value(logits), targets)?;
        let ng = self.ng(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            ng,
        ))
    }

    /// Per-sample squared Frobenius norms of column groups of width `width`.
    pub fn group_sq_norms(&mut self, x: Var, rows_per_sample: usize, width: usize) -> Result<Var> {
        let value = kernels::group_sq_norms(self.value(x), rows_per_sample, width)?;
        let ng = self.ng(&[x]);
        Ok(self.push(value, Op::GroupSqNorms { x, rows_per_sample, width }, ng))
    }

    /// Population std across columns of the column means of `x` (`[samples x n]`).
    pub fn col_mean_std(&mut self, x: Var) -> Result<Var> {
        let (std, means) = kernels::col_mean_std(self.value(x))?;
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::scalar(std), Op::ColMeanStd { x, means }, ng))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let ng = self.ng(&[x]);
        self.push(value, Op::SumAll(x), ng)
    }

    /// Record an externally computed value with its own backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<T>, rule: Box<dyn CustomBackward<T>>) -> Var {
        let ng = self.ng(inputs);
        self.push(value, Op::Custom { inputs: inputs.to_vec(), rule }, ng)
    }

    /// Reverse sweep from the scalar `loss`. A tape can be swept only once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(ApexError::State("backward already ran on this tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(shape_err!("backward needs a scalar, got {:?}", self.value(loss).dims()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).dims(), T::one()));
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let contributions = self.node_backward(id, &g)?;
            grads[id] = Some(g);
            for (var, contrib) in contributions {
                if !self.nodes[var.0].needs_grad {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn node_backward(&self, id: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[id];
        let dims = |v: Var| self.value(v).dims().to_vec();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).shape2()?;
                let n = self.value(*b).shape2()?.1;
                let gr = MatRef::new(g.data(), m, n);
                if self.nodes[a.0].needs_grad {
                    let mut da = vec![T::zero(); m * k];
                    let bt = MatRef::new(self.value(*b).data(), k, n).t();
                    gemm(T::one(), gr, bt, T::zero(), &mut MatMut::new(&mut da, m, k))?;
                    out.push((*a, Tensor::from_parts(vec![m, k], da)));
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![T::zero(); k * n];
                    let at = MatRef::new(self.value(*a).data(), m, k).t();
                    gemm(T::one(), at, gr, T::zero(), &mut MatMut::new(&mut db, k, n))?;
                    out.push((*b, Tensor::from_parts(vec![k, n], db)));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Mul(a, b) => {
                out.push((*a, g.zip_map(self.value(*b), |x, y| x * y)?));
                out.push((*b, g.zip_map(self.value(*a), |x, y| x * y)?));
            }
            Op::Scale(a, c) => out.push((*a, g.map(|x| x * *c))),
            Op::Activate(a, act) => {
                out.push((*a, g.zip_map(self.value(*a), |dy, x| dy * act.derivative(x))?));
            }
            Op::RmsNorm { x, gain, inv } => {
                let (dx, dg) = kernels::rms_norm_backward(
                    self.value(*x).data(),
                    self.value(*gain).data(),
                    inv,
                    g.data(),
                );
                out.push((*x, Tensor::from_parts(dims(*x), dx)));
                out.push((*gain, Tensor::from_parts(dims(*gain), dg)));
            }
            Op::Embed { table, ids } => {
                let mut dt = Tensor::zeros(self.value(*table).dims());
                let d = dt.last_dim();
                let buf = dt.data_mut();
                for (row, &i) in g.data().chunks(d).zip(ids) {
                    for (acc, &v) in buf[i * d..(i + 1) * d].iter_mut().zip(row) {
                        *acc = *acc + v;
                    }
                }
                out.push((*table, dt));
            }
            Op::Attention { q, k, v, heads, seq_len, probs } => {
                let dm = self.value(*q).last_dim();
                let (dq, dk, dv) = kernels::attention_backward(
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    probs,
                    g.data(),
                    dm,
                    *heads,
                    *seq_len,
                )?;
                out.push((*q, Tensor::from_parts(dims(*q), dq)));
                out.push((*k, Tensor::from_parts(dims(*k), dk)));
                out.push((*v, Tensor::from_parts(dims(*v), dv)));
            }
            Op::Softmax(x) => {
                let n = node.value.last_dim();
                let dx = kernels::softmax_rows_backward(node.value.data(), g.data(), n);
                out.push((*x, Tensor::from_parts(dims(*x), dx)));
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let v = self.value(*logits).last_dim();
                let scale = g.data()[0] / T::lit(targets.len() as f64);
                let mut d = probs.clone();
                for (row, &t) in d.chunks_mut(v).zip(targets) {
                    row[t] = row[t] - T::one();
                    row.iter_mut().for_each(|x| *x = *x * scale);
                }
                out.push((*logits, Tensor::from_parts(dims(*logits), d)));
            }
            Op::GroupSqNorms { x, rows_per_sample, width } => {
                let xv = self.value(*x);
                let cols = xv.last_dim();
                let groups = cols / width;
                let two = T::lit(2.0);
                let mut dx = vec![T::zero(); xv.len()];
                for (r, (xr, dr)) in xv.data().chunks(cols).zip(dx.chunks_mut(cols)).enumerate() {
                    let gr = &g.data()[(r / rows_per_sample) * groups..];
                    for (c, (d, &xval)) in dr.iter_mut().zip(xr).enumerate() {
                        *d = two * xval * gr[c / width];
                    }
                }
                out.push((*x, Tensor::from_parts(dims(*x), dx)));
            }
            Op::ColMeanStd { x, means } => {
                let (rows, cols) = self.value(*x).shape2()?;
                let std = node.value.data()[0];
                let mut dx = vec![T::zero(); rows * cols];
                if std > T::zero() {
                    let ct = T::lit(cols as f64);
                    let mu = means.iter().fold(T::zero(), |a, &m| a + m) / ct;
                    let coef = g.data()[0] / (ct * std * T::lit(rows as f64));
                    for row in dx.chunks_mut(cols) {
                        for (d, &m) in row.iter_mut().zip(means) {
                            *d = (m - mu) * coef;
                        }
                    }
                }
                out.push((*x, Tensor::from_parts(vec![rows, cols], dx)));
            }
            Op::SumAll(x) => out.push((*x, Tensor::full(self.value(*x).dims(), g.data()[0]))),
            Op::Custom { inputs, rule } => {
                let vals: Vec<&Tensor<T>> = inputs.iter().map(|v| self.value(*v)).collect();
                let grads = rule.backward(&vals, &node.value, g)?;
                for (v, gi) in inputs.iter().zip(grads) {
                    if let Some(gi) = gi {
                        out.push((*v, gi));
                    }
                }
            }
        }
        Ok(out)
    }
}
