//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is a tape: every operation appends a node whose parents are
//! strictly earlier nodes, so node order is already a topological order and
//! the backward sweep is a single reverse scan. The graph is rebuilt for each
//! forward pass and is not shared across threads.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Vec<f64>,
        rstd: Vec<f64>,
    },
    ConcatLast(Var, Var),
    SliceLast {
        x: Var,
        start: usize,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Transpose(Var),
    Reshape(Var),
    MaskedFill {
        x: Var,
        mask: Vec<bool>,
    },
    Mean(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Bce {
        p: Var,
        y: Vec<f64>,
        clamped: Vec<bool>,
    },
}

/// Binary cross-entropy probability clamp.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Default)]
pub struct Graph {
    values: Vec<Tensor>,
    grads: Vec<Option<Vec<f64>>>,
    requires: Vec<bool>,
    ops: Vec<Op>,
    backward_done: bool,
    visits: usize,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Number of nodes processed by the last [`Graph::backward`] call.
    pub fn backward_visits(&self) -> usize {
        self.visits
    }

    fn push(&mut self, value: Tensor, op: Op, requires: bool) -> Var {
        self.values.push(value);
        self.grads.push(None);
        self.requires.push(requires);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    fn req(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.requires[v.0])
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    /// Accumulated gradient of `v`, if one reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.values[v.0].shape().to_vec(), g.clone()).expect("grad shape"))
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.shape_err("matmul", a, b));
        }
        let (m, k, p) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.values[a.0].data(), self.values[b.0].data(), m, k, p);
        let req = self.req(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, p], out)?, Op::MatMul(a, b), req))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err("add", a, b));
        }
        let out = zip_map(self.values[a.0].data(), self.values[b.0].data(), |x, y| {
            x + y
        });
        let shape = self.shape(a).to_vec();
        let req = self.req(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add(a, b), req))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err("mul", a, b));
        }
        let out = zip_map(self.values[a.0].data(), self.values[b.0].data(), |x, y| {
            x * y
        });
        let shape = self.shape(a).to_vec();
        let req = self.req(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul(a, b), req))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = &self.values[x.0];
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * c).collect())
            .expect("same shape");
        let req = self.req(&[x]);
        self.push(out, Op::Scale(x, c), req)
    }

    /// Adds a bias vector to every row of `x` (last-axis broadcast only).
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = self.values[x.0].cols();
        if self.values[bias.0].numel() != d {
            return Err(self.shape_err("add_row", x, bias));
        }
        let b = self.values[bias.0].data();
        let t = &self.values[x.0];
        let out: Vec<f64> = t
            .data()
            .chunks(d.max(1))
            .flat_map(|row| row.iter().zip(b).map(|(v, bb)| v + bb))
            .collect();
        let shape = t.shape().to_vec();
        let req = self.req(&[x, bias]);
        Ok(self.push(Tensor::new(shape, out)?, Op::AddRow(x, bias), req))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = &self.values[x.0];
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
            .expect("same shape");
        let req = self.req(&[x]);
        self.push(out, op, req)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()),
            Op::Gelu(x),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidAxis {
                axis,
                rank: shape.len(),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = self.values[x.0].data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let idx = |j: usize| base + j * inner;
                let mut max = f64::NEG_INFINITY;
                for j in 0..len {
                    max = max.max(out[idx(j)]);
                }
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (out[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[idx(j)] /= sum;
                }
            }
        }
        let req = self.req(&[x]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            req,
        ))
    }

    /// Normalises each row over the last axis, then applies `gain * x + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = self.values[x.0].cols();
        if self.values[gain.0].numel() != d {
            return Err(self.shape_err("layer_norm", x, gain));
        }
        if self.values[bias.0].numel() != d {
            return Err(self.shape_err("layer_norm", x, bias));
        }
        let t = &self.values[x.0];
        let rows = t.rows();
        let g = self.values[gain.0].data();
        let b = self.values[bias.0].data();
        let mut normed = Vec::with_capacity(t.numel());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(t.numel());
        for r in 0..rows {
            let row = t.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd.push(rs);
            for (j, v) in row.iter().enumerate() {
                let n = (v - mean) * rs;
                normed.push(n);
                out.push(n * g[j] + b[j]);
            }
        }
        let shape = t.shape().to_vec();
        let req = self.req(&[x, gain, bias]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                rstd,
            },
            req,
        ))
    }

    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(self.shape_err("concat_last", a, b));
        }
        let (p, q) = (*sa.last().unwrap(), *sb.last().unwrap());
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = p + q;
        let rows: usize = sa[..sa.len() - 1].iter().product();
        let (da, db) = (self.values[a.0].data(), self.values[b.0].data());
        let mut out = Vec::with_capacity(rows * (p + q));
        for r in 0..rows {
            out.extend_from_slice(&da[r * p..(r + 1) * p]);
            out.extend_from_slice(&db[r * q..(r + 1) * q]);
        }
        let req = self.req(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::ConcatLast(a, b), req))
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().unwrap_or(&0);
        if start + len > d {
            return Err(Error::Shape {
                op: "slice_last",
                lhs: s,
                rhs: vec![start, len],
            });
        }
        let t = &self.values[x.0];
        let mut out = Vec::with_capacity(t.rows() * len);
        for r in 0..t.rows() {
            out.extend_from_slice(&t.row(r)[start..start + len]);
        }
        let mut shape = s;
        *shape.last_mut().unwrap() = len;
        let req = self.req(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::SliceLast { x, start }, req))
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(Error::Shape {
                op: "embedding",
                lhs: s.to_vec(),
                rhs: vec![ids.len()],
            });
        }
        let (v, d) = (s[0], s[1]);
        let t = &self.values[table.0];
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::TokenOutOfRange { id, vocab: v });
            }
            out.extend_from_slice(t.row(id));
        }
        let req = self.req(&[table]);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            req,
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        let (m, n) = (s[0], s[1]);
        let out = transpose_raw(self.values[x.0].data(), m, n);
        let req = self.req(&[x]);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(x), req))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let data = self.values[x.0].data().to_vec();
        let t = Tensor::new(shape.to_vec(), data)?;
        let req = self.req(&[x]);
        Ok(self.push(t, Op::Reshape(x), req))
    }

    /// Replaces entries where `mask` is true with `value`.
    pub fn masked_fill(&mut self, x: Var, mask: &[bool], value: f64) -> Result<Var> {
        let t = &self.values[x.0];
        if mask.len() != t.numel() {
            return Err(Error::Shape {
                op: "masked_fill",
                lhs: t.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let out: Vec<f64> = t
            .data()
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { value } else { v })
            .collect();
        let shape = t.shape().to_vec();
        let req = self.req(&[x]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::MaskedFill {
                x,
                mask: mask.to_vec(),
            },
            req,
        ))
    }

    /// Sets every entry above the diagonal of a square score matrix to -inf.
    pub fn causal_mask(&mut self, scores: Var) -> Result<Var> {
        let s = self.shape(scores).to_vec();
        if s.len() != 2 || s[0] != s[1] {
            return Err(Error::Shape {
                op: "causal_mask",
                lhs: s,
                rhs: vec![],
            });
        }
        let t = s[0];
        let mask: Vec<bool> = (0..t * t).map(|k| k % t > k / t).collect();
        self.masked_fill(scores, &mask, f64::NEG_INFINITY)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = &self.values[x.0];
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        let req = self.req(&[x]);
        self.push(Tensor::scalar(m), Op::Mean(x), req)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.values[x.0].data().iter().sum::<f64>();
        let req = self.req(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), req)
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = &self.values[logits.0];
        if t.rank() != 2 || t.shape()[0] != targets.len() {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: t.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let v = t.cols();
        let mut probs = Vec::with_capacity(t.numel());
        let mut loss = 0.0;
        for (r, &target) in targets.iter().enumerate() {
            if target >= v {
                return Err(Error::TokenOutOfRange {
                    id: target,
                    vocab: v,
                });
            }
            let row = t.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + sum.ln();
            loss += lse - row[target];
            probs.extend(row.iter().map(|x| (x - lse).exp()));
        }
        loss /= targets.len() as f64;
        let req = self.req(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            req,
        ))
    }

    /// Mean of `-[y log p + (1-y) log(1-p)]` with `p` clamped to
    /// `[BCE_EPS, 1 - BCE_EPS]`. Labels are constants.
    pub fn binary_cross_entropy(&mut self, p: Var, y: &Tensor) -> Result<Var> {
        let t = &self.values[p.0];
        if t.shape() != y.shape() {
            return Err(Error::Shape {
                op: "binary_cross_entropy",
                lhs: t.shape().to_vec(),
                rhs: y.shape().to_vec(),
            });
        }
        let mut clamped = Vec::with_capacity(t.numel());
        let mut loss = 0.0;
        for (&pv, &yv) in t.data().iter().zip(y.data()) {
            let c = pv.clamp(BCE_EPS, 1.0 - BCE_EPS);
            clamped.push(c != pv);
            loss -= yv * c.ln() + (1.0 - yv) * (1.0 - c).ln();
        }
        loss /= t.numel() as f64;
        let req = self.req(&[p]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                p,
                y: y.data().to_vec(),
                clamped,
            },
            req,
        ))
    }

    /// Populates gradients of `loss` on every node that requires one.
    /// A graph supports a single backward sweep.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.values[loss.0].numel() != 1 {
            return Err(Error::NotScalar(self.shape(loss).to_vec()));
        }
        self.backward_done = true;
        self.visits = 0;
        if !self.requires[loss.0] {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.requires[i] {
                continue;
            }
            let Some(gout) = self.grads[i].take() else {
                continue;
            };
            self.visits += 1;
            self.propagate(i, &gout);
            self.grads[i] = Some(gout);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, gout: &[f64]) {
        let Graph {
            values,
            grads,
            requires,
            ops,
            ..
        } = self;
        macro_rules! acc {
            ($v:expr) => {
                grad_buf(grads, requires, values, $v)
            };
        }
        match &ops[i] {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (values[a.0].shape(), values[b.0].shape());
                let (m, k, p) = (sa[0], sa[1], sb[1]);
                let (ad, bd) = (values[a.0].data(), values[b.0].data());
                if let Some(ga) = acc!(*a) {
                    // dA = dC · Bᵀ
                    for r in 0..m {
                        let grow = &gout[r * p..(r + 1) * p];
                        for c in 0..k {
                            let brow = &bd[c * p..(c + 1) * p];
                            ga[r * k + c] += dot(grow, brow);
                        }
                    }
                }
                if let Some(gb) = acc!(*b) {
                    // dB = Aᵀ · dC
                    for r in 0..m {
                        let grow = &gout[r * p..(r + 1) * p];
                        for c in 0..k {
                            let av = ad[r * k + c];
                            if av == 0.0 {
                                continue;
                            }
                            for (g, &d) in gb[c * p..(c + 1) * p].iter_mut().zip(grow) {
                                *g += av * d;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = acc!(*a) {
                    add_into(ga, gout);
                }
                if let Some(gb) = acc!(*b) {
                    add_into(gb, gout);
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (values[a.0].data(), values[b.0].data());
                if let Some(ga) = acc!(*a) {
                    for ((g, &d), &bv) in ga.iter_mut().zip(gout).zip(bd) {
                        *g += d * bv;
                    }
                }
                if let Some(gb) = acc!(*b) {
                    for ((g, &d), &av) in gb.iter_mut().zip(gout).zip(ad) {
                        *g += d * av;
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = acc!(*x) {
                    for (g, &d) in gx.iter_mut().zip(gout) {
                        *g += c * d;
                    }
                }
            }
            Op::AddRow(x, bias) => {
                let d = values[x.0].cols();
                if let Some(gx) = acc!(*x) {
                    add_into(gx, gout);
                }
                if let Some(gb) = acc!(*bias) {
                    for row in gout.chunks(d.max(1)) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Relu(x) => {
                let xd = values[x.0].data();
                if let Some(gx) = acc!(*x) {
                    for ((g, &d), &v) in gx.iter_mut().zip(gout).zip(xd) {
                        if v > 0.0 {
                            *g += d;
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xd = values[x.0].data();
                if let Some(gx) = acc!(*x) {
                    for ((g, &d), &v) in gx.iter_mut().zip(gout).zip(xd) {
                        let th = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                        let dth = (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        *g += d * (0.5 * (1.0 + th) + 0.5 * v * dth);
                    }
                }
            }
            Op::Sigmoid(x) => {
                let yd = values[i].data();
                if let Some(gx) = acc!(*x) {
                    for ((g, &d), &y) in gx.iter_mut().zip(gout).zip(yd) {
                        *g += d * y * (1.0 - y);
                    }
                }
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let (outer, len, inner) = (*outer, *len, *inner);
                let yd = values[i].data();
                if let Some(gx) = acc!(*x) {
                    for o in 0..outer {
                        for k in 0..inner {
                            let base = o * len * inner + k;
                            let dotp: f64 = (0..len)
                                .map(|j| gout[base + j * inner] * yd[base + j * inner])
                                .sum();
                            for j in 0..len {
                                let idx = base + j * inner;
                                gx[idx] += yd[idx] * (gout[idx] - dotp);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                rstd,
            } => {
                let d = values[x.0].cols();
                let g = values[gain.0].data();
                if let Some(gx) = acc!(*x) {
                    for (r, &rs) in rstd.iter().enumerate() {
                        let row = r * d..(r + 1) * d;
                        let dn: Vec<f64> = gout[row.clone()]
                            .iter()
                            .zip(g)
                            .map(|(a, b)| a * b)
                            .collect();
                        let mean_dn = dn.iter().sum::<f64>() / d as f64;
                        let mean_dn_n = dn
                            .iter()
                            .zip(&normed[row.clone()])
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / d as f64;
                        for (j, gxv) in gx[row.clone()].iter_mut().enumerate() {
                            *gxv += rs * (dn[j] - mean_dn - normed[r * d + j] * mean_dn_n);
                        }
                    }
                }
                if let Some(gg) = acc!(*gain) {
                    for (gr, nr) in gout.chunks(d).zip(normed.chunks(d)) {
                        for ((gv, &dv), &nv) in gg.iter_mut().zip(gr).zip(nr) {
                            *gv += dv * nv;
                        }
                    }
                }
                if let Some(gb) = acc!(*bias) {
                    for gr in gout.chunks(d) {
                        add_into(gb, gr);
                    }
                }
            }
            Op::ConcatLast(a, b) => {
                let p = values[a.0].cols();
                let q = values[b.0].cols();
                if let Some(ga) = acc!(*a) {
                    for (gr, src) in ga.chunks_mut(p.max(1)).zip(gout.chunks(p + q)) {
                        add_into(gr, &src[..p]);
                    }
                }
                if q > 0 {
                    if let Some(gb) = acc!(*b) {
                        for (gr, src) in gb.chunks_mut(q).zip(gout.chunks(p + q)) {
                            add_into(gr, &src[p..]);
                        }
                    }
                }
            }
            Op::SliceLast { x, start } => {
                let d = values[x.0].cols();
                let len = values[i].cols();
                if len > 0 {
                    if let Some(gx) = acc!(*x) {
                        for (gr, src) in gx.chunks_mut(d).zip(gout.chunks(len)) {
                            add_into(&mut gr[*start..*start + len], src);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = values[table.0].cols();
                if let Some(gt) = acc!(*table) {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &gout[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::Transpose(x) => {
                let s = values[x.0].shape();
                let (m, n) = (s[0], s[1]);
                if let Some(gx) = acc!(*x) {
                    // gout is n×m
                    for r in 0..m {
                        for c in 0..n {
                            gx[r * n + c] += gout[c * m + r];
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = acc!(*x) {
                    add_into(gx, gout);
                }
            }
            Op::MaskedFill { x, mask } => {
                if let Some(gx) = acc!(*x) {
                    for ((g, &d), &m) in gx.iter_mut().zip(gout).zip(mask) {
                        if !m {
                            *g += d;
                        }
                    }
                }
            }
            Op::Mean(x) => {
                let n = values[x.0].numel() as f64;
                if let Some(gx) = acc!(*x) {
                    for g in gx.iter_mut() {
                        *g += gout[0] / n;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = acc!(*x) {
                    for g in gx.iter_mut() {
                        *g += gout[0];
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let v = values[logits.0].cols();
                let scale = gout[0] / targets.len() as f64;
                if let Some(gl) = acc!(*logits) {
                    for (r, &target) in targets.iter().enumerate() {
                        for j in 0..v {
                            let onehot = if j == target { 1.0 } else { 0.0 };
                            gl[r * v + j] += scale * (probs[r * v + j] - onehot);
                        }
                    }
                }
            }
            Op::Bce { p, y, clamped } => {
                let pd = values[p.0].data();
                let scale = gout[0] / pd.len() as f64;
                if let Some(gp) = acc!(*p) {
                    for (j, g) in gp.iter_mut().enumerate() {
                        if clamped[j] {
                            continue;
                        }
                        let (pv, yv) = (pd[j], y[j]);
                        *g += scale * (-yv / pv + (1.0 - yv) / (1.0 - pv));
                    }
                }
            }
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn grad_buf<'a>(
    grads: &'a mut [Option<Vec<f64>>],
    requires: &[bool],
    values: &[Tensor],
    v: Var,
) -> Option<&'a mut Vec<f64>> {
    if !requires[v.0] {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; values[v.0].numel()]))
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `m×k · k×p`, row-major. Zero entries of the left operand are skipped, so a
/// row of the output never reads right-operand rows paired with zeros.
fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        let orow = &mut out[i * p..(i + 1) * p];
        for r in 0..k {
            let av = a[i * k + r];
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[r * p..(r + 1) * p]) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(x: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        for c in 0..n {
            out[c * m + r] = x[r * n + c];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut g = Graph::new();
        let i2 = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = g.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = g.matmul(i2, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);

        let a = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let z = g.constant(t(&[2, 1], &[0.0, 0.0]));
        let c = g.matmul(a, z).unwrap();
        assert_eq!(g.value(c).data(), &[0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("matmul"), "{err}");
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        for v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.constant(t(&[2], &[1000.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        let d = g.value(y).data();
        assert!((d[0] - 1.0).abs() < 1e-12 && d[1].abs() < 1e-12);
        assert!(d.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_rejects_bad_axis() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(
            g.softmax(x, 2),
            Err(Error::InvalidAxis { axis: 2, rank: 2 })
        ));
    }

    #[test]
    fn softmax_axis0_columns_sum_to_one() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 3], &[1.0, -2.0, 0.5, 3.0, 0.0, 0.5]));
        let y = g.softmax(x, 0).unwrap();
        let d = g.value(y).data();
        for c in 0..3 {
            assert!((d[c] + d[3 + c] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_constant_row_maps_to_zero() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 3], &[5.0, 5.0, 5.0]));
        let gain = g.constant(Tensor::full(&[3], 1.0));
        let bias = g.constant(Tensor::zeros(&[3]));
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn layer_norm_pair() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2], &[1.0, -1.0]));
        let gain = g.constant(Tensor::full(&[2], 1.0));
        let bias = g.constant(Tensor::zeros(&[2]));
        let eps = 1e-5;
        let y = g.layer_norm(x, gain, bias, eps).unwrap();
        let f = (1.0f64 + eps).powf(-0.5);
        let d = g.value(y).data();
        assert!((d[0] - f).abs() < 1e-15 && (d[1] + f).abs() < 1e-15);
    }

    #[test]
    fn concat_and_empty_operand() {
        let mut g = Graph::new();
        let a = g.constant(t(&[1, 1], &[1.0]));
        let b = g.constant(t(&[1, 2], &[2.0, 3.0]));
        let c = g.concat_last(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0]);
        assert_eq!(g.value(c).shape(), &[1, 3]);

        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let e = g.constant(Tensor::zeros(&[2, 0]));
        let c = g.concat_last(a, e).unwrap();
        assert_eq!(g.value(c), g.value(a));

        let bad = g.constant(Tensor::zeros(&[3, 1]));
        assert!(g.concat_last(a, bad).is_err());
    }

    #[test]
    fn cross_entropy_uniform_and_confident() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::zeros(&[3, 4]));
        let ce = g.cross_entropy(l, &[0, 1, 3]).unwrap();
        assert!((g.value(ce).item().unwrap() - 4f64.ln()).abs() < 1e-14);

        let l = g.constant(t(&[1, 3], &[0.0, 1000.0, 0.0]));
        let ce = g.cross_entropy(l, &[1]).unwrap();
        assert!(g.value(ce).item().unwrap().abs() < 1e-12);

        assert!(matches!(
            g.cross_entropy(l, &[3]),
            Err(Error::TokenOutOfRange { id: 3, vocab: 3 })
        ));
    }

    #[test]
    fn bce_reference_points() {
        let mut g = Graph::new();
        let p = g.constant(t(&[1], &[0.5]));
        let l = g.binary_cross_entropy(p, &t(&[1], &[0.5])).unwrap();
        assert!((g.value(l).item().unwrap() - 2f64.ln()).abs() < 1e-15);

        let p = g.constant(t(&[2], &[1.0, 0.0]));
        let l = g.binary_cross_entropy(p, &t(&[2], &[1.0, 0.0])).unwrap();
        // clamped at 1e-7
        assert!(g.value(l).item().unwrap() < 2e-7);
    }

    #[test]
    fn masked_fill_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.param(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let m = g.causal_mask(x).unwrap();
        assert_eq!(g.value(m).data()[1], f64::NEG_INFINITY);
        let s = g.softmax(m, 1).unwrap();
        let w = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = g.mul(s, w).unwrap();
        let loss = g.sum(p);
        g.backward(loss).unwrap();
        let gx = g.grad(x).unwrap();
        assert_eq!(gx.data()[1], 0.0);
        assert!(gx.data()[2] != 0.0);
    }

    #[test]
    fn backward_twice_is_error() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::BackwardTwice)));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::NotScalar(_))));
    }

    #[test]
    fn backward_visits_each_node_once() {
        let mut g = Graph::new();
        let a = g.param(t(&[2, 2], &[0.1, 0.2, 0.3, 0.4]));
        let b = g.param(t(&[2, 2], &[0.5, -0.6, 0.7, 0.8]));
        let c = g.matmul(a, b).unwrap();
        let d = g.mul(c, c).unwrap(); // reuse: c has two consumers
        let e = g.add(d, a).unwrap();
        let f = g.gelu(e);
        let loss = g.mean(f);
        assert_eq!(g.len(), 7);
        g.backward(loss).unwrap();
        assert_eq!(g.backward_visits(), 7);
    }

    #[test]
    fn constants_get_no_grad() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[1.0, 2.0]));
        let b = g.param(t(&[2], &[3.0, 4.0]));
        let c = g.mul(a, b).unwrap();
        let s = g.sum(c);
        g.backward(s).unwrap();
        assert!(g.grad(a).is_none());
        assert_eq!(g.grad(b).unwrap().data(), &[1.0, 2.0]);
    }
}
