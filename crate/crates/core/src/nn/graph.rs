//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Graph`] records every operation with its output value. Calling
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients
//! for every node that (transitively) depends on a leaf requiring gradients.
//! Gradients never flow into leaves created by [`Graph::stop_gradient`],
//! constants, or anything recorded while gradients are disabled.
//!
//! The graph also counts multiply-accumulates of dense matmul work
//! (linear layers, matmuls, attention scores and weighted sums). That counter
//! backs the instrumented side of the FLOPs accounting.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::mask::AttnMask;
use super::params::ParamSet;
use super::rope::RopeTable;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, T),
    AddRow(Var, Var),
    MulRow(Var, Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu {
        x: Var,
        /// `tanh` of the inner polynomial, reused by the backward pass.
        t: Vec<T>,
    },
    Rope {
        x: Var,
        table: Arc<RopeTable<T>>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Arc<AttnMask>,
        probs: Vec<T>,
        offsets: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    SmoothL1 {
        pred: Var,
        target: Var,
        beta: T,
    },
    Mse {
        pred: Var,
        target: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Sum(Var),
    NonDiff {
        name: &'static str,
        x: Var,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Parameters of a [`ParamSet`] placed on a tape.
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Grads<T> {
    by_node: Vec<Option<Tensor<T>>>,
    named: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Grads<T> {
    /// Gradient of an arbitrary node, `None` if nothing flowed into it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.by_node.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every trainable bound parameter (zeros when unused).
    pub fn named(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.named
    }

    pub fn into_named(self) -> BTreeMap<String, Tensor<T>> {
        self.named
    }
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    macs: u64,
    params: Vec<(String, Var)>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            macs: 0,
            params: Vec::new(),
        }
    }

    /// A graph whose leaves never require gradients: parameters are bound
    /// as detached values and no backward pass is possible through them.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Multiply-accumulates of dense matmul work recorded so far.
    pub fn macs(&self) -> u64 {
        self.macs
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ---- leaves -------------------------------------------------------

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that requires gradients when the graph has them enabled.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        let rg = self.grad_enabled;
        self.push(value, Op::Leaf, rg)
    }

    /// A named parameter leaf; its gradient is reported by name.
    pub fn param(&mut self, name: &str, value: Tensor<T>, trainable: bool) -> Var {
        let rg = trainable && self.grad_enabled;
        let v = self.push(value, Op::Leaf, rg);
        if rg {
            self.params.push((name.to_string(), v));
        }
        v
    }

    pub fn bind(&mut self, params: &ParamSet<T>) -> Bound {
        let mut vars = BTreeMap::new();
        for (name, p) in params.iter() {
            let v = self.param(name, p.value.clone(), p.trainable);
            vars.insert(name.to_string(), v);
        }
        Bound { vars }
    }

    /// Copy of `x` that gradients do not flow through.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.clone();
        self.push(value, Op::Leaf, false)
    }

    // ---- dense algebra --------------------------------------------------

    /// `x · w (+ b)` with `x: [n, i]`, `w: [i, o]`, `b: [1, o]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.value(x).shape(), self.value(w).shape());
        if xs[1] != ws[0] {
            return Err(shape_err(format!("linear: x {xs:?} vs w {ws:?}")));
        }
        if let Some(b) = b {
            let bs = self.value(b).shape();
            if bs != [1, ws[1]] {
                return Err(shape_err(format!("linear: bias {bs:?} for out {}", ws[1])));
            }
        }
        let (n, i, o) = (xs[0], xs[1], ws[1]);
        let mut out = Tensor::zeros(n, o);
        if let Some(b) = b {
            let bias = self.value(b).data().to_vec();
            for r in 0..n {
                out.row_mut(r).copy_from_slice(&bias);
            }
        }
        T::gemm(
            n,
            i,
            o,
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            out.data_mut(),
            b.is_some(),
        );
        self.macs += (n * i * o) as u64;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.any_grad(&deps);
        Ok(self.push(out, Op::Linear { x, w, b }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (as_, bs) = (self.value(a).shape(), self.value(b).shape());
        if as_[1] != bs[0] {
            return Err(shape_err(format!("matmul: {as_:?} x {bs:?}")));
        }
        let out = self.value(a).matmul(self.value(b));
        self.macs += (as_[0] * as_[1] * bs[1]) as u64;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let bv = self.value(b).clone();
        let mut out = self.value(a).clone();
        for (o, &y) in out.data_mut().iter_mut().zip(bv.data()) {
            *o -= y;
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|v| v * s);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    fn row_vec_check(&self, x: Var, v: Var, what: &str) -> Result<()> {
        let (xs, vs) = (self.value(x).shape(), self.value(v).shape());
        if vs != [1, xs[1]] {
            return Err(shape_err(format!("{what}: x {xs:?} vs row {vs:?}")));
        }
        Ok(())
    }

    /// `x + v` with `v: [1, d]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, v: Var) -> Result<Var> {
        self.row_vec_check(x, v, "add_row")?;
        let row = self.value(v).data().to_vec();
        let mut out = self.value(x).clone();
        let cols = out.cols();
        for r in out.data_mut().chunks_mut(cols) {
            for (o, &b) in r.iter_mut().zip(&row) {
                *o += b;
            }
        }
        let rg = self.any_grad(&[x, v]);
        Ok(self.push(out, Op::AddRow(x, v), rg))
    }

    /// `x * v` with `v: [1, d]` broadcast over rows (Layer Scale).
    pub fn mul_row(&mut self, x: Var, v: Var) -> Result<Var> {
        self.row_vec_check(x, v, "mul_row")?;
        let row = self.value(v).data().to_vec();
        let mut out = self.value(x).clone();
        let cols = out.cols();
        for r in out.data_mut().chunks_mut(cols) {
            for (o, &g) in r.iter_mut().zip(&row) {
                *o *= g;
            }
        }
        let rg = self.any_grad(&[x, v]);
        Ok(self.push(out, Op::MulRow(x, v), rg))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        self.row_vec_check(x, gamma, "layer_norm gamma")?;
        self.row_vec_check(x, beta, "layer_norm beta")?;
        let eps = T::from_f64_lossy(1e-6);
        let xv = self.value(x);
        let (n, d) = (xv.rows(), xv.cols());
        let dn = T::from_usize(d).unwrap();
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let mut xhat = vec![T::zero(); n * d];
        let mut rstd = vec![T::zero(); n];
        let mut out = Tensor::zeros(n, d);
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            let o = out.row_mut(r);
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                o[c] = h * g[c] + b[c];
            }
        }
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let t: Vec<T> = xv.data().iter().map(|&v| gelu_tanh(v)).collect();
        let half = T::from_f64_lossy(0.5);
        let data = xv.data().iter().zip(&t).map(|(&v, &t)| half * v * (T::one() + t)).collect();
        let out = Tensor::from_vec(xv.rows(), xv.cols(), data);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Gelu { x, t }, rg)
    }

    /// Apply per-token rotary rotations to every head of `x`.
    pub fn rope(&mut self, x: Var, table: &Arc<RopeTable<T>>) -> Result<Var> {
        let xs = self.value(x).shape();
        if xs[0] != table.n_tokens() || xs[1] % table.head_dim() != 0 {
            return Err(shape_err(format!(
                "rope: x {xs:?} vs table tokens {} head_dim {}",
                table.n_tokens(),
                table.head_dim()
            )));
        }
        let mut out = self.value(x).clone();
        table.apply(out.data_mut(), xs[1], false);
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            out,
            Op::Rope {
                x,
                table: Arc::clone(table),
            },
            rg,
        ))
    }

    /// Multi-head scaled dot-product self-attention under a sparse mask.
    /// A row with no allowed keys produces a zero output row.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: &Arc<AttnMask>,
    ) -> Result<Var> {
        let (qs, ks, vs) = (
            self.value(q).shape(),
            self.value(k).shape(),
            self.value(v).shape(),
        );
        if qs != ks || ks != vs {
            return Err(shape_err(format!("attention: q {qs:?} k {ks:?} v {vs:?}")));
        }
        let (n, d) = (qs[0], qs[1]);
        if heads == 0 || d % heads != 0 {
            return Err(shape_err(format!("attention: dim {d} not divisible by {heads} heads")));
        }
        if mask.len() != n || mask.max_key().is_some_and(|m| m as usize >= n) {
            return Err(shape_err(format!(
                "attention: mask has {} rows for {n} tokens",
                mask.len()
            )));
        }
        let hd = d / heads;
        let scale = T::one() / T::from_usize(hd).unwrap().sqrt();
        let (qh, kh, vh) = (
            split_heads(self.value(q), heads),
            split_heads(self.value(k), heads),
            split_heads(self.value(v), heads),
        );
        let mut oh = vec![T::zero(); n * d];
        let mut offsets = Vec::with_capacity(n);
        let mut probs = Vec::with_capacity(mask.pair_count() as usize * heads);
        for i in 0..n {
            offsets.push(probs.len());
            let keys = mask.row(i);
            if keys.is_empty() {
                continue;
            }
            for h in 0..heads {
                let base = h * n * hd;
                let qi = &qh[base + i * hd..base + (i + 1) * hd];
                let start = probs.len();
                let mut max = T::neg_infinity();
                for &j in keys {
                    let j = j as usize;
                    let s = dot(qi, &kh[base + j * hd..base + (j + 1) * hd]) * scale;
                    if s > max {
                        max = s;
                    }
                    probs.push(s);
                }
                let mut total = T::zero();
                for s in probs[start..].iter_mut() {
                    *s = (*s - max).exp();
                    total += *s;
                }
                let inv = T::one() / total;
                let o = &mut oh[base + i * hd..base + (i + 1) * hd];
                for (p, &j) in probs[start..].iter_mut().zip(keys) {
                    *p *= inv;
                    let j = j as usize;
                    axpy(o, *p, &vh[base + j * hd..base + (j + 1) * hd]);
                }
            }
        }
        let out = merge_heads(&oh, n, heads, hd);
        self.macs += 2 * mask.pair_count() * d as u64;
        let rg = self.any_grad(&[q, k, v]);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                mask: Arc::clone(mask),
                probs,
                offsets,
            },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        if let Some(first) = refs.first() {
            if refs.iter().any(|t| t.cols() != first.cols()) {
                return Err(shape_err("concat_rows: column mismatch"));
            }
        }
        let out = Tensor::vstack(&refs);
        let rg = self.any_grad(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= xv.rows()) {
            return Err(shape_err(format!("gather_rows: row {bad} of {}", xv.rows())));
        }
        let cols = xv.cols();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(xv.row(i));
        }
        let out = Tensor::from_vec(idx.len(), cols, data);
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            out,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    // ---- reductions and losses -----------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Mean elementwise smooth-L1: `0.5 d²/β` if `|d| < β`, else `|d| - β/2`.
    pub fn smooth_l1(&mut self, pred: Var, target: Var, beta: T) -> Result<Var> {
        self.same_shape(pred, target, "smooth_l1")?;
        let loss = smooth_l1_value(self.value(pred).data(), self.value(target).data(), beta);
        let rg = self.any_grad(&[pred, target]);
        Ok(self.push(Tensor::scalar(loss), Op::SmoothL1 { pred, target, beta }, rg))
    }

    /// Mean squared error over all entries.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape(pred, target, "mse")?;
        let loss = mse_value(self.value(pred).data(), self.value(target).data());
        let rg = self.any_grad(&[pred, target]);
        Ok(self.push(Tensor::scalar(loss), Op::Mse { pred, target }, rg))
    }

    /// Mean softmax cross-entropy of `logits: [n, C]` against class ids.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (n, c) = (lv.rows(), lv.cols());
        if labels.len() != n || labels.iter().any(|&l| l >= c) {
            return Err(shape_err("cross_entropy: labels do not match logits"));
        }
        let mut probs = vec![T::zero(); n * c];
        let mut loss = T::zero();
        for r in 0..n {
            let row = lv.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[r * c + j] = e;
                total += e;
            }
            for j in 0..c {
                probs[r * c + j] = probs[r * c + j] / total;
            }
            loss -= probs[r * c + labels[r]].ln();
        }
        let loss = loss / T::from_usize(n.max(1)).unwrap();
        let rg = self.any_grad(&[logits]);
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

    /// Row-wise one-hot argmax. Has no gradient: a backward pass that needs
    /// to differentiate through it fails with [`Error::UnsupportedOp`].
    pub fn argmax_onehot(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = Tensor::zeros(xv.rows(), xv.cols());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            out.set(r, best, T::one());
        }
        let rg = self.any_grad(&[x]);
        self.push(
            out,
            Op::NonDiff {
                name: "argmax_onehot",
                x,
            },
            rg,
        )
    }

    // ---- backward -------------------------------------------------------

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.value(loss).shape() != [1, 1] {
            return Err(shape_err("backward: loss must be a scalar"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::scalar(T::one()));
        }
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            self.backprop_node(node, &gout, &mut grads)?;
            grads[i] = Some(gout);
        }
        let mut named = BTreeMap::new();
        for (name, v) in &self.params {
            let g = grads[v.0]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(self.value(*v).rows(), self.value(*v).cols()));
            match named.get_mut(name) {
                Some(acc) => Tensor::add_assign(acc, &g),
                None => {
                    named.insert(name.clone(), g);
                }
            }
        }
        Ok(Grads {
            by_node: grads,
            named,
        })
    }

    fn accum(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(
        &self,
        node: &Node<T>,
        gout: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, i, o) = (xv.rows(), xv.cols(), wv.cols());
                if self.wants(*x) {
                    let mut dx = Tensor::zeros(n, i);
                    T::gemm(n, o, i, gout.data(), false, wv.data(), true, dx.data_mut(), false);
                    self.accum(grads, *x, dx);
                }
                if self.wants(*w) {
                    let mut dw = Tensor::zeros(i, o);
                    T::gemm(i, n, o, xv.data(), true, gout.data(), false, dw.data_mut(), false);
                    self.accum(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        self.accum(grads, *b, col_sum(gout));
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.wants(*a) {
                    let mut da = Tensor::zeros(m, k);
                    T::gemm(m, n, k, gout.data(), false, bv.data(), true, da.data_mut(), false);
                    self.accum(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = Tensor::zeros(k, n);
                    T::gemm(k, m, n, av.data(), true, gout.data(), false, db.data_mut(), false);
                    self.accum(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.accum(grads, *a, gout.clone());
                self.accum(grads, *b, gout.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, gout.clone());
                self.accum(grads, *b, gout.map(|v| -v));
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accum(grads, *a, gout.map(|v| v * s));
            }
            Op::AddRow(x, v) => {
                self.accum(grads, *x, gout.clone());
                if self.wants(*v) {
                    self.accum(grads, *v, col_sum(gout));
                }
            }
            Op::MulRow(x, v) => {
                let row = self.value(*v).data();
                let cols = gout.cols();
                if self.wants(*x) {
                    let mut dx = gout.clone();
                    for r in dx.data_mut().chunks_mut(cols) {
                        for (o, &g) in r.iter_mut().zip(row) {
                            *o *= g;
                        }
                    }
                    self.accum(grads, *x, dx);
                }
                if self.wants(*v) {
                    let xv = self.value(*x);
                    let mut dv = Tensor::zeros(1, cols);
                    for r in 0..gout.rows() {
                        let (g, xr) = (gout.row(r), xv.row(r));
                        let d = dv.data_mut();
                        for c in 0..cols {
                            d[c] += g[c] * xr[c];
                        }
                    }
                    self.accum(grads, *v, dv);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (n, d) = (gout.rows(), gout.cols());
                let g = self.value(*gamma).data();
                if self.wants(*x) {
                    let dn = T::from_usize(d).unwrap();
                    let mut dx = Tensor::zeros(n, d);
                    for r in 0..n {
                        let go = gout.row(r);
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut mean_dxh = T::zero();
                        let mut mean_dxh_xh = T::zero();
                        for c in 0..d {
                            let dxh = go[c] * g[c];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xh[c];
                        }
                        mean_dxh = mean_dxh / dn;
                        mean_dxh_xh = mean_dxh_xh / dn;
                        let out = dx.row_mut(r);
                        for c in 0..d {
                            out[c] = rstd[r] * (go[c] * g[c] - mean_dxh - xh[c] * mean_dxh_xh);
                        }
                    }
                    self.accum(grads, *x, dx);
                }
                if self.wants(*gamma) {
                    let mut dg = Tensor::zeros(1, d);
                    for r in 0..n {
                        let go = gout.row(r);
                        let dgm = dg.data_mut();
                        for c in 0..d {
                            dgm[c] += go[c] * xhat[r * d + c];
                        }
                    }
                    self.accum(grads, *gamma, dg);
                }
                if self.wants(*beta) {
                    self.accum(grads, *beta, col_sum(gout));
                }
            }
            Op::Gelu { x, t } => {
                let xv = self.value(*x);
                let mut dx = gout.clone();
                for ((o, &xi), &ti) in dx.data_mut().iter_mut().zip(xv.data()).zip(t) {
                    *o *= gelu_grad(xi, ti);
                }
                self.accum(grads, *x, dx);
            }
            Op::Rope { x, table } => {
                let mut dx = gout.clone();
                table.apply(dx.data_mut(), gout.cols(), true);
                self.accum(grads, *x, dx);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                mask,
                probs,
                offsets,
            } => self.attention_backward(
                (*q, *k, *v),
                *heads,
                mask,
                probs,
                offsets,
                gout,
                grads,
            ),
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if self.wants(p) {
                        self.accum(grads, p, gout.slice_rows(start, start + rows));
                    }
                    start += rows;
                }
            }
            Op::GatherRows { x, idx } => {
                if self.wants(*x) {
                    let xv = self.value(*x);
                    let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                    for (r, &i) in idx.iter().enumerate() {
                        let src = gout.row(r).to_vec();
                        for (o, g) in dx.row_mut(i).iter_mut().zip(src) {
                            *o += g;
                        }
                    }
                    self.accum(grads, *x, dx);
                }
            }
            Op::Sum(x) => {
                let xv = self.value(*x);
                let g = gout.item();
                self.accum(grads, *x, Tensor::full(xv.rows(), xv.cols(), g));
            }
            Op::SmoothL1 { pred, target, beta } => {
                let (pv, tv) = (self.value(*pred), self.value(*target));
                let scale = gout.item() / T::from_usize(pv.len().max(1)).unwrap();
                let beta = *beta;
                let dp = Tensor::from_vec(
                    pv.rows(),
                    pv.cols(),
                    pv.data()
                        .iter()
                        .zip(tv.data())
                        .map(|(&p, &t)| {
                            let d = p - t;
                            let g = if d.abs() < beta { d / beta } else { d.signum() };
                            g * scale
                        })
                        .collect(),
                );
                if self.wants(*target) {
                    self.accum(grads, *target, dp.map(|v| -v));
                }
                self.accum(grads, *pred, dp);
            }
            Op::Mse { pred, target } => {
                let (pv, tv) = (self.value(*pred), self.value(*target));
                let scale = T::from_f64_lossy(2.0) * gout.item()
                    / T::from_usize(pv.len().max(1)).unwrap();
                let dp = Tensor::from_vec(
                    pv.rows(),
                    pv.cols(),
                    pv.data()
                        .iter()
                        .zip(tv.data())
                        .map(|(&p, &t)| (p - t) * scale)
                        .collect(),
                );
                if self.wants(*target) {
                    self.accum(grads, *target, dp.map(|v| -v));
                }
                self.accum(grads, *pred, dp);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let lv = self.value(*logits);
                let (n, c) = (lv.rows(), lv.cols());
                let scale = gout.item() / T::from_usize(n.max(1)).unwrap();
                let mut dl = Tensor::from_vec(n, c, probs.clone());
                for (r, &l) in labels.iter().enumerate() {
                    let v = dl.get(r, l);
                    dl.set(r, l, v - T::one());
                }
                dl.scale_assign(scale);
                self.accum(grads, *logits, dl);
            }
            Op::NonDiff { name, x } => {
                if self.wants(*x) {
                    return Err(Error::UnsupportedOp(name));
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        (q, k, v): (Var, Var, Var),
        heads: usize,
        mask: &AttnMask,
        probs: &[T],
        offsets: &[usize],
        gout: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (n, d) = self.value(q).shape().into();
        let hd = d / heads;
        let scale = T::one() / T::from_usize(hd).unwrap().sqrt();
        let (qh, kh, vh) = (
            split_heads(self.value(q), heads),
            split_heads(self.value(k), heads),
            split_heads(self.value(v), heads),
        );
        let goh = split_heads(gout, heads);
        let mut dqh = vec![T::zero(); n * d];
        let mut dkh = vec![T::zero(); n * d];
        let mut dvh = vec![T::zero(); n * d];
        let mut dp = Vec::new();
        for i in 0..n {
            let keys = mask.row(i);
            if keys.is_empty() {
                continue;
            }
            let len = keys.len();
            for h in 0..heads {
                let base = h * n * hd;
                let row = |r: usize| base + r * hd..base + (r + 1) * hd;
                let p = &probs[offsets[i] + h * len..offsets[i] + (h + 1) * len];
                let go = &goh[row(i)];
                dp.clear();
                let mut sum_pdp = T::zero();
                for (&pj, &j) in p.iter().zip(keys) {
                    let j = j as usize;
                    let acc = dot(go, &vh[row(j)]);
                    dp.push(acc);
                    sum_pdp += pj * acc;
                    axpy(&mut dvh[row(j)], pj, go);
                }
                let qi = &qh[row(i)];
                for ((&pj, &dpj), &j) in p.iter().zip(&dp).zip(keys) {
                    let j = j as usize;
                    let ds = pj * (dpj - sum_pdp) * scale;
                    axpy(&mut dqh[row(i)], ds, &kh[row(j)]);
                    axpy(&mut dkh[row(j)], ds, qi);
                }
            }
        }
        let (dq, dk, dv) = (
            merge_heads(&dqh, n, heads, hd),
            merge_heads(&dkh, n, heads, hd),
            merge_heads(&dvh, n, heads, hd),
        );
        self.accum(grads, q, dq);
        self.accum(grads, k, dk);
        self.accum(grads, v, dv);
    }
}

/// `[n, heads * hd]` to a head-major `[heads][n][hd]` buffer.
fn split_heads<T: Real>(x: &Tensor<T>, heads: usize) -> Vec<T> {
    let (n, d) = (x.rows(), x.cols());
    let hd = d / heads;
    let mut out = vec![T::zero(); n * d];
    for r in 0..n {
        for (h, chunk) in x.row(r).chunks_exact(hd).enumerate() {
            out[h * n * hd + r * hd..h * n * hd + (r + 1) * hd].copy_from_slice(chunk);
        }
    }
    out
}

fn merge_heads<T: Real>(buf: &[T], n: usize, heads: usize, hd: usize) -> Tensor<T> {
    let mut out = Tensor::zeros(n, heads * hd);
    for r in 0..n {
        for (h, chunk) in out.row_mut(r).chunks_exact_mut(hd).enumerate() {
            chunk.copy_from_slice(&buf[h * n * hd + r * hd..h * n * hd + (r + 1) * hd]);
        }
    }
    out
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

#[inline]
fn axpy<T: Real>(y: &mut [T], alpha: T, x: &[T]) {
    for (o, &v) in y.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

fn col_sum<T: Real>(g: &Tensor<T>) -> Tensor<T> {
    let mut out = Tensor::zeros(1, g.cols());
    for r in 0..g.rows() {
        let row = g.row(r);
        let o = out.data_mut();
        for c in 0..row.len() {
            o[c] += row[c];
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `tanh(c (x + a x^3))` written through `exp`, which is markedly cheaper
/// than libm's `tanh`.
fn gelu_tanh<T: Real>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let two = T::from_f64_lossy(2.0);
    let u = c * (x + a * x * x * x);
    T::one() - two / ((two * u).exp() + T::one())
}

fn gelu_grad<T: Real>(x: T, t: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

/// Mean elementwise smooth-L1 between two equally sized slices.
pub fn smooth_l1_value<T: Real>(pred: &[T], target: &[T], beta: T) -> T {
    let half = T::from_f64_lossy(0.5);
    let mut acc = T::zero();
    for (&p, &t) in pred.iter().zip(target) {
        let d = (p - t).abs();
        acc += if d < beta { half * d * d / beta } else { d - half * beta };
    }
    acc / T::from_usize(pred.len().max(1)).unwrap()
}

/// Mean squared error between two equally sized slices.
pub fn mse_value<T: Real>(pred: &[T], target: &[T]) -> T {
    let mut acc = T::zero();
    for (&p, &t) in pred.iter().zip(target) {
        acc += (p - t) * (p - t);
    }
    acc / T::from_usize(pred.len().max(1)).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::<f64>::new();
        let w = g.param("w", Tensor::from_fn(3, 4, |r, c| (r * 4 + c) as f64), true);
        let s = g.sum(w);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.named()["w"], Tensor::ones(3, 4));
    }

    #[test]
    fn stop_gradient_blocks_flow() {
        let mut g = Graph::<f64>::new();
        let w = g.param("w", Tensor::ones(2, 2), true);
        let d = g.stop_gradient(w);
        let y = g.add(w, d).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.named()["w"], Tensor::ones(2, 2));
        assert!(grads.get(d).is_none());

        // a loss depending only on the detached copy gives exactly zero
        let mut g = Graph::<f64>::new();
        let w = g.param("w", Tensor::ones(2, 2), true);
        let d = g.stop_gradient(w);
        let s = g.sum(d);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.named()["w"], Tensor::zeros(2, 2));
    }

    #[test]
    fn nondifferentiable_op_is_reported() {
        let mut g = Graph::<f64>::new();
        let w = g.param("w", Tensor::from_vec(1, 3, vec![0.1, 0.5, 0.2]), true);
        let h = g.argmax_onehot(w);
        let s = g.sum(h);
        assert!(matches!(g.backward(s), Err(Error::UnsupportedOp("argmax_onehot"))));

        // fine when nothing upstream needs a gradient
        let mut g = Graph::<f64>::new();
        let c = g.constant(Tensor::from_vec(1, 3, vec![0.1, 0.5, 0.2]));
        let h = g.argmax_onehot(c);
        assert_eq!(g.value(h).data(), &[0.0, 1.0, 0.0]);
        let w = g.param("w", Tensor::ones(1, 3), true);
        let y = g.add(h, w).unwrap();
        let s = g.sum(y);
        assert!(g.backward(s).is_ok());
    }

    #[test]
    fn fully_masked_row_is_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_fn(3, 4, |r, c| (r + c) as f64 * 0.3));
        let mask = Arc::new(AttnMask::from_rows(vec![vec![], vec![0, 1], vec![2]]));
        let a = g.attention(x, x, x, 2, &mask).unwrap();
        assert_eq!(g.value(a).row(0), &[0.0; 4]);
        // single allowed key: softmax weight 1 on it
        assert_eq!(g.value(a).row(2), g.value(x).row(2));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(2, 3));
        let b = g.constant(Tensor::zeros(2, 3));
        assert!(matches!(g.matmul(a, b), Err(Error::Shape(_))));
        let mask = Arc::new(AttnMask::full(3));
        assert!(matches!(g.attention(a, a, a, 1, &mask), Err(Error::Shape(_))));
    }

    #[test]
    fn smooth_l1_branches() {
        assert_eq!(smooth_l1_value(&[0.0f64], &[0.0], 0.1), 0.0);
        assert!((smooth_l1_value(&[0.05f64], &[0.0], 0.1) - 0.0125).abs() < 1e-15);
        assert!((smooth_l1_value(&[1.0f64], &[0.0], 0.1) - 0.95).abs() < 1e-15);
        assert!((smooth_l1_value(&[0.0f64, 0.0], &[-1.0, 0.05], 0.1) - (0.95 + 0.0125) / 2.0).abs() < 1e-15);
    }
}
