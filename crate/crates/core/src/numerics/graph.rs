//! Reverse-mode tape over dense tensor ops.
//!
//! A [`Graph`] borrows a [`ParamStore`] and records every op applied to it.
//! Each op owns a hand-written backward rule; `backward` walks the tape once
//! in reverse and returns the parameter gradients. An inference graph skips
//! the caches and cannot be differentiated.

use super::tensor::{axpy, dot};
use super::{Gradients, NumericsError, ParamStore, Scalar, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<F> {
    Constant,
    Param(usize),
    Linear { x: Var, w: Var, b: Var },
    Add(Var, Var),
    Scale { x: Var, alpha: Var },
    ScaleConst { x: Var, c: F },
    RmsNorm { x: Var, gain: Var, inv: Vec<F> },
    Relu(Var),
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<F> },
    ConcatCols(Var, Var),
    GatherRows { x: Var, idx: Vec<usize> },
    AddMarkers { x: Var, start: Var, end: Var },
    Transpose(Var),
    CrossEntropy { logits: Var, target: usize, probs: Vec<F> },
    Sum(Vec<Var>),
}

struct Node<F> {
    op: Op<F>,
    value: Option<Tensor<F>>,
    needs_grad: bool,
}

pub struct Graph<'p, F: Scalar> {
    params: &'p ParamStore<F>,
    nodes: Vec<Node<F>>,
    record: bool,
    frozen: Vec<bool>,
    param_vars: Vec<Option<Var>>,
}

impl<'p, F: Scalar> Graph<'p, F> {
    /// Recording graph; every parameter is trainable.
    pub fn new(params: &'p ParamStore<F>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            record: true,
            frozen: vec![false; params.len()],
            param_vars: vec![None; params.len()],
        }
    }

    /// Forward-only graph.
    pub fn inference(params: &'p ParamStore<F>) -> Self {
        Self {
            record: false,
            ..Self::new(params)
        }
    }

    /// Marks every parameter for which `trainable(name)` is false as a
    /// constant. Must be called before the parameters are used.
    pub fn with_trainable(mut self, trainable: impl Fn(&str) -> bool) -> Self {
        for (id, name) in self.params.names().iter().enumerate() {
            self.frozen[id] = !trainable(name);
        }
        self
    }

    pub fn params(&self) -> &'p ParamStore<F> {
        self.params
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        let node = &self.nodes[v.0];
        match (&node.op, &node.value) {
            (Op::Param(id), _) => self.params.value(*id),
            (_, Some(t)) => t,
            _ => unreachable!("non-param node without value"),
        }
    }

    /// Sign of every ReLU input on the tape, in tape order.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(x),
                _ => None,
            })
            .flat_map(|x| self.value(x).data().iter().map(|&v| v > F::zero()))
            .collect()
    }

    /// Whether gradients flow into `v`.
    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, op: Op<F>, value: Tensor<F>, inputs: &[Var]) -> Var {
        let needs_grad = self.record && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            op,
            value: Some(value),
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.nodes.push(Node {
            op: Op::Constant,
            value: Some(t),
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, name: &str) -> Result<Var, NumericsError> {
        let id = self.params.id(name)?;
        if let Some(v) = self.param_vars[id] {
            return Ok(v);
        }
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
            needs_grad: self.record && !self.frozen[id],
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id] = Some(v);
        Ok(v)
    }

    /// `x · Wᵀ + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NumericsError> {
        let y = super::tensor::linear(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(Op::Linear { x, w, b }, y, &[x, w, b]))
    }

    /// Convenience: `linear` with parameters `{prefix}.w` and `{prefix}.b`.
    pub fn dense(&mut self, x: Var, prefix: &str) -> Result<Var, NumericsError> {
        let w = self.param(&format!("{prefix}.w"))?;
        let b = self.param(&format!("{prefix}.b"))?;
        self.linear(x, w, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(NumericsError::Shape(format!(
                "add: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let y = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(Op::Add(a, b), y, &[a, b]))
    }

    /// Multiplies `x` by the single-element tensor `alpha`.
    pub fn scale(&mut self, x: Var, alpha: Var) -> Result<Var, NumericsError> {
        let a = self.value(alpha);
        if a.numel() != 1 {
            return Err(NumericsError::Shape("scale factor must have one element".into()));
        }
        let a = a.data()[0];
        let tx = self.value(x);
        let y = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|&v| a * v).collect())?;
        Ok(self.push(Op::Scale { x, alpha }, y, &[x, alpha]))
    }

    pub fn scale_const(&mut self, x: Var, c: F) -> Result<Var, NumericsError> {
        let tx = self.value(x);
        let y = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|&v| c * v).collect())?;
        Ok(self.push(Op::ScaleConst { x, c }, y, &[x]))
    }

    pub fn rmsnorm(&mut self, x: Var, gain: Var, eps: F) -> Result<Var, NumericsError> {
        let (y, inv) = super::tensor::rmsnorm(self.value(x), self.value(gain), eps)?;
        let inv = if self.record { inv } else { Vec::new() };
        Ok(self.push(Op::RmsNorm { x, gain, inv }, y, &[x, gain]))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, NumericsError> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| v.max(F::zero())).collect();
        let y = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(Op::Relu(x), y, &[x]))
    }

    /// Full (unmasked) scaled dot-product attention over already projected
    /// queries, keys and values, `heads` heads over contiguous column blocks.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var, NumericsError> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = (tq.rows(), tq.cols());
        if tk.shape() != tq.shape() || tv.shape() != tq.shape() {
            return Err(NumericsError::Shape("attention: q, k, v shapes differ".into()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(NumericsError::Config(format!(
                "embedding dim {d} not divisible by {heads} heads"
            )));
        }
        let dh = d / heads;
        let scale = F::one() / F::of(dh as f64).sqrt();
        let mut out = vec![F::zero(); n * d];
        let mut probs = if self.record {
            vec![F::zero(); heads * n * n]
        } else {
            Vec::new()
        };
        let mut row = vec![F::zero(); n];
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..n {
                let qi = &tq.row(i)[cols.clone()];
                let mut max = F::neg_infinity();
                for (j, r) in row.iter_mut().enumerate() {
                    *r = dot(qi, &tk.row(j)[cols.clone()]) * scale;
                    max = max.max(*r);
                }
                let mut sum = F::zero();
                for r in row.iter_mut() {
                    *r = (*r - max).exp();
                    sum = sum + *r;
                }
                let oi = &mut out[i * d + h * dh..i * d + (h + 1) * dh];
                for (j, r) in row.iter_mut().enumerate() {
                    *r = *r / sum;
                    axpy(*r, &tv.row(j)[cols.clone()], oi);
                }
                if self.record {
                    probs[(h * n + i) * n..(h * n + i + 1) * n].copy_from_slice(&row);
                }
            }
        }
        let y = Tensor::matrix(n, d, out);
        Ok(self.push(Op::Attention { q, k, v, heads, probs }, y, &[q, k, v]))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows() != tb.rows() {
            return Err(NumericsError::Shape("concat: row counts differ".into()));
        }
        let (n, p, q) = (ta.rows(), ta.cols(), tb.cols());
        let mut data = Vec::with_capacity(n * (p + q));
        for i in 0..n {
            data.extend_from_slice(ta.row(i));
            data.extend_from_slice(tb.row(i));
        }
        let y = Tensor::matrix(n, p + q, data);
        Ok(self.push(Op::ConcatCols(a, b), y, &[a, b]))
    }

    /// Row `r` of the output is row `idx[r]` of `x`.
    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var, NumericsError> {
        let tx = self.value(x);
        let c = tx.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            if i >= tx.rows() {
                return Err(NumericsError::Shape(format!(
                    "gather row {i} of {}",
                    tx.rows()
                )));
            }
            data.extend_from_slice(tx.row(i));
        }
        let y = Tensor::matrix(idx.len(), c, data);
        Ok(self.push(Op::GatherRows { x, idx }, y, &[x]))
    }

    /// Adds `start` to row 0 and `end` to the last row (both to row 0 when
    /// there is a single row).
    pub fn add_markers(&mut self, x: Var, start: Var, end: Var) -> Result<Var, NumericsError> {
        let tx = self.value(x);
        let (n, c) = (tx.rows(), tx.cols());
        let (ts, te) = (self.value(start), self.value(end));
        if n == 0 || ts.numel() != c || te.numel() != c {
            return Err(NumericsError::Shape("markers: width mismatch".into()));
        }
        let mut data = tx.data().to_vec();
        axpy(F::one(), ts.data(), &mut data[..c]);
        axpy(F::one(), te.data(), &mut data[(n - 1) * c..]);
        let y = Tensor::matrix(n, c, data);
        Ok(self.push(Op::AddMarkers { x, start, end }, y, &[x, start, end]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, NumericsError> {
        let tx = self.value(x);
        let (n, c) = (tx.rows(), tx.cols());
        let mut data = vec![F::zero(); n * c];
        for i in 0..n {
            for j in 0..c {
                data[j * n + i] = tx.data()[i * c + j];
            }
        }
        let y = Tensor::matrix(c, n, data);
        Ok(self.push(Op::Transpose(x), y, &[x]))
    }

    /// Masked cross-entropy of the flattened `logits` against `target`.
    pub fn cross_entropy(&mut self, logits: Var, mask: &[bool], target: usize) -> Result<Var, NumericsError> {
        let tl = self.value(logits);
        let loss = super::tensor::cross_entropy(tl.data(), mask, target)?;
        let probs = if self.record {
            super::tensor::masked_softmax(tl.data(), mask)?
        } else {
            Vec::new()
        };
        Ok(self.push(
            Op::CrossEntropy { logits, target, probs },
            Tensor::scalar(loss),
            &[logits],
        ))
    }

    /// Sum of single-element tensors.
    pub fn sum(&mut self, xs: &[Var]) -> Result<Var, NumericsError> {
        let mut s = F::zero();
        for &x in xs {
            let t = self.value(x);
            if t.numel() != 1 {
                return Err(NumericsError::Shape("sum expects scalars".into()));
            }
            s = s + t.data()[0];
        }
        Ok(self.push(Op::Sum(xs.to_vec()), Tensor::scalar(s), xs))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>, NumericsError> {
        if !self.record {
            return Err(NumericsError::Contract("backward on an inference graph".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(NumericsError::Shape("loss must be a scalar".into()));
        }
        let lv = self.value(loss).data()[0];
        if !lv.is_finite() {
            return Err(NumericsError::NonFinite(format!("loss = {lv:?}")));
        }
        let mut out = Gradients::empty(self.params.len());
        let mut grads: Vec<Option<Vec<F>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => out.add_into(*id, self.params.value(*id).shape(), &dy),
                Op::Linear { x, w, b } => {
                    let (tx, tw) = (self.value(*x), self.value(*w));
                    let (n, a, m) = (tx.rows(), tx.cols(), tw.rows());
                    if self.needs_grad(*x) {
                        let mut dx = vec![F::zero(); n * a];
                        for i in 0..n {
                            let dxi = &mut dx[i * a..(i + 1) * a];
                            for j in 0..m {
                                axpy(dy[i * m + j], tw.row(j), dxi);
                            }
                        }
                        self.acc(&mut grads, *x, dx);
                    }
                    if self.needs_grad(*w) {
                        let mut dw = vec![F::zero(); m * a];
                        for i in 0..n {
                            for j in 0..m {
                                axpy(dy[i * m + j], tx.row(i), &mut dw[j * a..(j + 1) * a]);
                            }
                        }
                        self.acc(&mut grads, *w, dw);
                    }
                    if self.needs_grad(*b) {
                        let mut db = vec![F::zero(); m];
                        for i in 0..n {
                            axpy(F::one(), &dy[i * m..(i + 1) * m], &mut db);
                        }
                        self.acc(&mut grads, *b, db);
                    }
                }
                Op::Add(a, b) => {
                    self.acc(&mut grads, *a, dy.clone());
                    self.acc(&mut grads, *b, dy);
                }
                Op::Scale { x, alpha } => {
                    let a = self.value(*alpha).data()[0];
                    if self.needs_grad(*alpha) {
                        let da = dot(&dy, self.value(*x).data());
                        self.acc(&mut grads, *alpha, vec![da]);
                    }
                    self.acc(&mut grads, *x, dy.iter().map(|&g| a * g).collect());
                }
                Op::ScaleConst { x, c } => {
                    self.acc(&mut grads, *x, dy.iter().map(|&g| *c * g).collect());
                }
                Op::RmsNorm { x, gain, inv } => {
                    let (tx, tg) = (self.value(*x), self.value(*gain));
                    let (n, d) = (tx.rows(), tx.cols());
                    let g = tg.data();
                    let df = F::of(d as f64);
                    if self.needs_grad(*gain) {
                        let mut dg = vec![F::zero(); d];
                        for i in 0..n {
                            let xi = tx.row(i);
                            for k in 0..d {
                                dg[k] = dg[k] + dy[i * d + k] * xi[k] * inv[i];
                            }
                        }
                        self.acc(&mut grads, *gain, dg);
                    }
                    if self.needs_grad(*x) {
                        let mut dx = vec![F::zero(); n * d];
                        for i in 0..n {
                            let xi = tx.row(i);
                            let r = inv[i];
                            let dyi = &dy[i * d..(i + 1) * d];
                            let mut s = F::zero();
                            for k in 0..d {
                                s = s + g[k] * dyi[k] * xi[k];
                            }
                            let c = r * r * r * s / df;
                            for k in 0..d {
                                dx[i * d + k] = r * g[k] * dyi[k] - xi[k] * c;
                            }
                        }
                        self.acc(&mut grads, *x, dx);
                    }
                }
                Op::Relu(x) => {
                    let ty = node.value.as_ref().expect("relu value");
                    let dx = dy
                        .iter()
                        .zip(ty.data())
                        .map(|(&g, &y)| if y > F::zero() { g } else { F::zero() })
                        .collect();
                    self.acc(&mut grads, *x, dx);
                }
                Op::Attention { q, k, v, heads, probs } => {
                    let (tq, tk, tv) = (self.value(*q), self.value(*k), self.value(*v));
                    let (n, d) = (tq.rows(), tq.cols());
                    let dh = d / heads;
                    let scale = F::one() / F::of(dh as f64).sqrt();
                    let mut dq = vec![F::zero(); n * d];
                    let mut dk = vec![F::zero(); n * d];
                    let mut dv = vec![F::zero(); n * d];
                    let mut dp = vec![F::zero(); n];
                    for h in 0..*heads {
                        let c0 = h * dh;
                        for i in 0..n {
                            let p = &probs[(h * n + i) * n..(h * n + i + 1) * n];
                            let doi = &dy[i * d + c0..i * d + c0 + dh];
                            let mut s = F::zero();
                            for j in 0..n {
                                dp[j] = dot(doi, &tv.row(j)[c0..c0 + dh]);
                                s = s + p[j] * dp[j];
                                axpy(p[j], doi, &mut dv[j * d + c0..j * d + c0 + dh]);
                            }
                            let qi = &tq.row(i)[c0..c0 + dh];
                            for j in 0..n {
                                let ds = p[j] * (dp[j] - s) * scale;
                                if ds == F::zero() {
                                    continue;
                                }
                                axpy(ds, &tk.row(j)[c0..c0 + dh], &mut dq[i * d + c0..i * d + c0 + dh]);
                                axpy(ds, qi, &mut dk[j * d + c0..j * d + c0 + dh]);
                            }
                        }
                    }
                    self.acc(&mut grads, *q, dq);
                    self.acc(&mut grads, *k, dk);
                    self.acc(&mut grads, *v, dv);
                }
                Op::ConcatCols(a, b) => {
                    let (n, p) = (self.value(*a).rows(), self.value(*a).cols());
                    let q = self.value(*b).cols();
                    let mut da = Vec::with_capacity(n * p);
                    let mut db = Vec::with_capacity(n * q);
                    for i in 0..n {
                        let r = &dy[i * (p + q)..(i + 1) * (p + q)];
                        da.extend_from_slice(&r[..p]);
                        db.extend_from_slice(&r[p..]);
                    }
                    self.acc(&mut grads, *a, da);
                    self.acc(&mut grads, *b, db);
                }
                Op::GatherRows { x, idx: rows } => {
                    let tx = self.value(*x);
                    let c = tx.cols();
                    let mut dx = vec![F::zero(); tx.numel()];
                    for (r, &i) in rows.iter().enumerate() {
                        axpy(F::one(), &dy[r * c..(r + 1) * c], &mut dx[i * c..(i + 1) * c]);
                    }
                    self.acc(&mut grads, *x, dx);
                }
                Op::AddMarkers { x, start, end } => {
                    let tx = self.value(*x);
                    let (n, c) = (tx.rows(), tx.cols());
                    self.acc(&mut grads, *start, dy[..c].to_vec());
                    self.acc(&mut grads, *end, dy[(n - 1) * c..].to_vec());
                    self.acc(&mut grads, *x, dy);
                }
                Op::Transpose(x) => {
                    let tx = self.value(*x);
                    let (n, c) = (tx.rows(), tx.cols());
                    let mut dx = vec![F::zero(); n * c];
                    for i in 0..n {
                        for j in 0..c {
                            dx[i * c + j] = dy[j * n + i];
                        }
                    }
                    self.acc(&mut grads, *x, dx);
                }
                Op::CrossEntropy { logits, target, probs } => {
                    let g = dy[0];
                    let mut dl: Vec<F> = probs.iter().map(|&p| g * p).collect();
                    dl[*target] = dl[*target] - g;
                    self.acc(&mut grads, *logits, dl);
                }
                Op::Sum(xs) => {
                    for &x in xs {
                        self.acc(&mut grads, x, dy.clone());
                    }
                }
            }
        }
        Ok(out)
    }

    fn acc(&self, grads: &mut [Option<Vec<F>>], v: Var, g: Vec<F>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => axpy(F::one(), &g, existing),
            slot @ None => *slot = Some(g),
        }
    }
}
