use std::collections::HashMap;

use super::{Gradients, ParamId, ParamStore, Tensor};
use crate::error::{KktError, Result};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Tanh(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    SoftmaxRows(Var),
    LogSoftmax(Var),
    MeanRows(Var),
    Concat(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    StackRows(Vec<Var>),
    Reshape(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Dot(Var, Var),
    CrossEntropy {
        logits: Var,
        gold: usize,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Operation tape. Nodes are appended in evaluation order, which is a valid
/// topological order, so backward is a single reverse sweep.
///
/// `backward` may run once per graph; a second call is rejected with
/// [`KktError::AlreadyBackpropagated`].
pub struct Graph<'p> {
    params: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    backward_done: bool,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self {
            params: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            backward_done: false,
        }
    }

    pub fn with_params(params: &'p ParamStore) -> Self {
        Self {
            params: Some(params),
            ..Self::new()
        }
    }

    pub fn params(&self) -> Option<&'p ParamStore> {
        self.params
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: value.with_requires_grad(requires_grad),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A free variable that receives a gradient.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Brings a stored parameter onto the tape. Repeated calls share a node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self
            .params
            .expect("Graph::param called on a graph without a parameter store");
        let v = self.push(store.get(id).clone(), Op::Param, true);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(KktError::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::raw(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(KktError::dim("transpose", s, &[]));
        }
        let (m, n) = (s[0], s[1]);
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::raw(vec![n, m], out), Op::Transpose(a), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(KktError::dim("add", self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::raw(shape, out), Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(KktError::dim("mul", self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::raw(shape, out), Op::Mul(a, b), rg))
    }

    /// Multiplies every element by a fixed scalar.
    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out: Vec<f64> = self.value(a).data().iter().map(|x| x * s).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(Tensor::raw(shape, out), Op::Scale(a, s), rg)
    }

    /// Affine map `x·W + b`. `x` is `[m×k]` or a single row `[k]`; the bias,
    /// when present, is `[n]` and added to every row.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let k = *sx.last().unwrap();
        if sx.len() > 2 || sw.len() != 2 || sw[0] != k {
            return Err(KktError::dim("linear", &sx, &sw));
        }
        let n = sw[1];
        if let Some(b) = b {
            if self.shape(b) != [n] {
                return Err(KktError::dim("linear bias", self.shape(b), &[n]));
            }
        }
        let m = if sx.len() == 1 { 1 } else { sx[0] };
        let mut out = matmul_raw(self.value(x).data(), self.value(w).data(), m, k, n);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(n) {
                for (o, bv) in row.iter_mut().zip(bias) {
                    *o += bv;
                }
            }
        }
        let shape = if sx.len() == 1 { vec![n] } else { vec![m, n] };
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::raw(shape, out), Op::Linear { x, w, b }, rg))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out: Vec<f64> = self.value(a).data().iter().map(|x| x.tanh()).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(Tensor::raw(shape, out), Op::Tanh(a), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(Tensor::raw(shape, out), Op::Gelu(a), rg)
    }

    /// Normalizes each row over the last axis, then applies gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let n = self.value(x).cols();
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(KktError::dim("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let xv = self.value(x);
        let rows = xv.rows();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; rows * n];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + bt[j];
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::raw(shape, out),
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

    /// Row-wise softmax with max subtraction. A rank-1 input is one row.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.cols();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor::raw(shape, out), Op::SoftmaxRows(x), rg)
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.cols();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(n) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor::raw(shape, out), Op::LogSoftmax(x), rg)
    }

    /// Mean over the row (sequence) axis: `[m×n] -> [n]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(KktError::dim("mean_rows", xv.shape(), &[]));
        }
        let (m, n) = (xv.shape()[0], xv.shape()[1]);
        if m == 0 {
            return Err(KktError::EmptySequence("mean_rows"));
        }
        let mut out = vec![0.0; n];
        for r in 0..m {
            for (o, v) in out.iter_mut().zip(xv.row(r)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= m as f64);
        let rg = self.rg(x);
        Ok(self.push(Tensor::raw(vec![n], out), Op::MeanRows(x), rg))
    }

    /// Concatenates along the last axis; all other dimensions must agree.
    pub fn concat_last_axis(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or(KktError::EmptySequence("concat_last_axis"))?;
        let lead = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(KktError::dim("concat_last_axis", self.shape(first), s));
            }
            total += s[s.len() - 1];
        }
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &v in xs {
                out.extend_from_slice(self.value(v).row(r));
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(Tensor::raw(shape, out), Op::Concat(xs.to_vec()), rg))
    }

    /// Gathers rows of a matrix, in the given order.
    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(KktError::dim("select_rows", xv.shape(), &[]));
        }
        if idx.is_empty() {
            return Err(KktError::EmptySequence("select_rows"));
        }
        let m = xv.shape()[0];
        let n = xv.cols();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= m {
                return Err(KktError::Index {
                    what: "rows",
                    index: i,
                    size: m,
                });
            }
            out.extend_from_slice(xv.row(i));
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::raw(vec![idx.len(), n], out),
            Op::SelectRows(x, idx.to_vec()),
            rg,
        ))
    }

    /// Stacks equal-length vectors into the rows of a matrix.
    pub fn stack_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or(KktError::EmptySequence("stack_rows"))?;
        let n = self.shape(first)[0];
        let mut out = Vec::with_capacity(xs.len() * n);
        for &v in xs {
            if self.shape(v) != [n] {
                return Err(KktError::dim("stack_rows", &[n], self.shape(v)));
            }
            out.extend_from_slice(self.value(v).data());
        }
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(Tensor::raw(vec![xs.len(), n], out), Op::StackRows(xs.to_vec()), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if shape.iter().product::<usize>() != xv.numel() || shape.contains(&0) {
            return Err(KktError::dim("reshape", xv.shape(), shape));
        }
        let t = Tensor::raw(shape.to_vec(), xv.data().to_vec());
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Looks up rows of an embedding table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.rank() != 2 {
            return Err(KktError::dim("embedding", tv.shape(), &[]));
        }
        if ids.is_empty() {
            return Err(KktError::EmptySequence("embedding"));
        }
        let (v, d) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(KktError::Vocabulary { id, size: v });
            }
            out.extend_from_slice(tv.row(id));
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::raw(vec![ids.len(), d], out),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Inner product of two vectors, as a `[1]` tensor.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a).len() != 1 || self.shape(a) != self.shape(b) {
            return Err(KktError::dim("dot", self.shape(a), self.shape(b)));
        }
        let s = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .sum();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(s), Op::Dot(a, b), rg))
    }

    /// `-log softmax(logits)[gold]` for a logit vector.
    pub fn cross_entropy_from_logits(&mut self, logits: Var, gold: usize) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() != 1 {
            return Err(KktError::dim("cross_entropy", lv.shape(), &[]));
        }
        let n = lv.numel();
        if gold >= n {
            return Err(KktError::Index {
                what: "options",
                index: gold,
                size: n,
            });
        }
        let lse = log_sum_exp(lv.data());
        let loss = lse - lv.data()[gold];
        let probs: Vec<f64> = lv.data().iter().map(|x| (x - lse).exp()).collect();
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, gold, probs }, rg))
    }

    /// Reverse sweep from a single-element output, seeding its gradient with 1.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.backward_done {
            return Err(KktError::AlreadyBackpropagated);
        }
        if self.value(output).numel() != 1 {
            return Err(KktError::dim("backward", self.shape(output), &[1]));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0]);

        for i in (0..=output.0).rev() {
            let Some(gout) = grads[i].take() else {
                continue;
            };
            if !self.nodes[i].value.requires_grad() {
                continue;
            }
            self.backprop_node(i, &gout, &mut grads);
            grads[i] = Some(gout);
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.value.requires_grad() {
                node.value.set_grad(g);
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.rg(*a) {
                    let g = self.acc(grads, *a);
                    // dA = dC · Bᵀ
                    for r in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for c in 0..n {
                                s += gout[r * n + c] * bv.data()[p * n + c];
                            }
                            g[r * k + p] += s;
                        }
                    }
                }
                if self.rg(*b) {
                    let g = self.acc(grads, *b);
                    // dB = Aᵀ · dC
                    for r in 0..m {
                        for p in 0..k {
                            let a_rp = av.data()[r * k + p];
                            if a_rp == 0.0 {
                                continue;
                            }
                            for c in 0..n {
                                g[p * n + c] += a_rp * gout[r * n + c];
                            }
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (out.shape()[1], out.shape()[0]);
                let g = self.acc(grads, *a);
                for r in 0..m {
                    for c in 0..n {
                        g[r * n + c] += gout[c * m + r];
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.rg(v) {
                        add_into(self.acc(grads, v), gout, 1.0);
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let bv = self.value(*b).data();
                    let g = self.acc(grads, *a);
                    for j in 0..g.len() {
                        g[j] += gout[j] * bv[j];
                    }
                }
                if self.rg(*b) {
                    let av = self.value(*a).data();
                    let g = self.acc(grads, *b);
                    for j in 0..g.len() {
                        g[j] += gout[j] * av[j];
                    }
                }
            }
            Op::Scale(a, s) => add_into(self.acc(grads, *a), gout, *s),
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (k, n) = (wv.shape()[0], wv.shape()[1]);
                let m = xv.numel() / k;
                if self.rg(*x) {
                    let g = self.acc(grads, *x);
                    for r in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for c in 0..n {
                                s += gout[r * n + c] * wv.data()[p * n + c];
                            }
                            g[r * k + p] += s;
                        }
                    }
                }
                if self.rg(*w) {
                    let g = self.acc(grads, *w);
                    for r in 0..m {
                        for p in 0..k {
                            let x_rp = xv.data()[r * k + p];
                            if x_rp == 0.0 {
                                continue;
                            }
                            for c in 0..n {
                                g[p * n + c] += x_rp * gout[r * n + c];
                            }
                        }
                    }
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let g = self.acc(grads, *b);
                        for row in gout.chunks(n) {
                            add_into(g, row, 1.0);
                        }
                    }
                }
            }
            Op::Tanh(a) => {
                let g = self.acc(grads, *a);
                for j in 0..g.len() {
                    let y = out.data()[j];
                    g[j] += gout[j] * (1.0 - y * y);
                }
            }
            Op::Gelu(a) => {
                let av = self.value(*a).data();
                let g = self.acc(grads, *a);
                for j in 0..g.len() {
                    let x = av[j];
                    let u = GELU_C * (x + 0.044715 * x * x * x);
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                    let d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
                    g[j] += gout[j] * d;
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = out.cols();
                let rows = out.rows();
                let gv = self.value(*gamma).data();
                if self.rg(*x) {
                    let g = self.acc(grads, *x);
                    for r in 0..rows {
                        let go = &gout[r * n..(r + 1) * n];
                        let xh = &xhat[r * n..(r + 1) * n];
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for j in 0..n {
                            let d = go[j] * gv[j];
                            sum_d += d;
                            sum_dx += d * xh[j];
                        }
                        let scale = rstd[r] / n as f64;
                        for j in 0..n {
                            let d = go[j] * gv[j];
                            g[r * n + j] += scale * (n as f64 * d - sum_d - xh[j] * sum_dx);
                        }
                    }
                }
                if self.rg(*gamma) {
                    let g = self.acc(grads, *gamma);
                    for r in 0..rows {
                        for j in 0..n {
                            g[j] += gout[r * n + j] * xhat[r * n + j];
                        }
                    }
                }
                if self.rg(*beta) {
                    let g = self.acc(grads, *beta);
                    for row in gout.chunks(n) {
                        add_into(g, row, 1.0);
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let n = out.cols();
                let g = self.acc(grads, *a);
                for (r, (y, go)) in out.data().chunks(n).zip(gout.chunks(n)).enumerate() {
                    let dot: f64 = y.iter().zip(go).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        g[r * n + j] += y[j] * (go[j] - dot);
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let n = out.cols();
                let g = self.acc(grads, *a);
                for (r, (y, go)) in out.data().chunks(n).zip(gout.chunks(n)).enumerate() {
                    let total: f64 = go.iter().sum();
                    for j in 0..n {
                        g[r * n + j] += go[j] - y[j].exp() * total;
                    }
                }
            }
            Op::MeanRows(a) => {
                let n = out.numel();
                let g = self.acc(grads, *a);
                let m = g.len() / n;
                let inv = 1.0 / m as f64;
                for row in g.chunks_mut(n) {
                    for (gv, go) in row.iter_mut().zip(gout) {
                        *gv += go * inv;
                    }
                }
            }
            Op::Concat(xs) => {
                let total = out.cols();
                let rows = out.rows();
                let mut offset = 0;
                for &v in xs {
                    let w = self.value(v).cols();
                    if self.rg(v) {
                        let g = self.acc(grads, v);
                        for r in 0..rows {
                            add_into(
                                &mut g[r * w..(r + 1) * w],
                                &gout[r * total + offset..r * total + offset + w],
                                1.0,
                            );
                        }
                    }
                    offset += w;
                }
            }
            Op::SelectRows(a, idx) => {
                let n = out.cols();
                let g = self.acc(grads, *a);
                for (r, &src) in idx.iter().enumerate() {
                    add_into(&mut g[src * n..(src + 1) * n], &gout[r * n..(r + 1) * n], 1.0);
                }
            }
            Op::StackRows(xs) => {
                let n = out.cols();
                for (r, &v) in xs.iter().enumerate() {
                    if self.rg(v) {
                        add_into(self.acc(grads, v), &gout[r * n..(r + 1) * n], 1.0);
                    }
                }
            }
            Op::Reshape(a) => add_into(self.acc(grads, *a), gout, 1.0),
            Op::Embedding { table, ids } => {
                let d = out.cols();
                let g = self.acc(grads, *table);
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut g[id * d..(id + 1) * d], &gout[r * d..(r + 1) * d], 1.0);
                }
            }
            Op::Dot(a, b) => {
                let s = gout[0];
                if self.rg(*a) {
                    let bv = self.value(*b).data();
                    add_into(self.acc(grads, *a), bv, s);
                }
                if self.rg(*b) {
                    let av = self.value(*a).data();
                    add_into(self.acc(grads, *b), av, s);
                }
            }
            Op::CrossEntropy { logits, gold, probs } => {
                let s = gout[0];
                let g = self.acc(grads, *logits);
                for (j, p) in probs.iter().enumerate() {
                    let target = if j == *gold { 1.0 } else { 0.0 };
                    g[j] += s * (p - target);
                }
            }
        }
    }

    /// Gradient buffer of `v`, allocated on first touch.
    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut Vec<f64> {
        let n = self.nodes[v.0].value.numel();
        grads[v.0].get_or_insert_with(|| vec![0.0; n])
    }

    /// Parameter gradients after [`Graph::backward`].
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[f64])> + '_ {
        self.param_vars
            .iter()
            .filter_map(|(&id, &v)| self.grad(v).map(|g| (id, g)))
    }

    /// Adds this graph's parameter gradients, times `scale`, into `acc`.
    pub fn accumulate_into(&self, acc: &mut Gradients, scale: f64) {
        let mut pairs: Vec<(ParamId, Var)> = self.param_vars.iter().map(|(&id, &v)| (id, v)).collect();
        pairs.sort_unstable_by_key(|(id, _)| *id);
        for (id, v) in pairs {
            if let Some(g) = self.grad(v) {
                acc.accumulate(id, g, scale);
            }
        }
    }
}

/// Naive row-major product, accumulating each output in index order.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += aip * brow[j];
            }
        }
    }
    c
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn add_into(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}
