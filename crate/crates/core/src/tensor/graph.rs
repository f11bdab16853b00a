use std::collections::BTreeMap;
use std::f64::consts::{FRAC_1_SQRT_2, PI};

use super::{Tensor, TensorError};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Tanh(Var),
    SliceCols {
        a: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    Reshape(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Append-only op record. Single use: one `backward` per graph.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
    consumed: bool,
}

/// Gradients produced by [`Graph::backward`] for every leaf that requires grad.
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: BTreeMap<usize, Tensor>,
    params: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v.0)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor> {
        self.params
    }
}

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn gelu_deriv(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    cdf + x * pdf
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(buf) => buf.iter_mut().zip(src).for_each(|(d, s)| *d += s),
        None => *dst = Some(src.to_vec()),
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for t in 0..k {
            let av = a[i * k + t];
            if av == 0.0 {
                continue;
            }
            let brow = &b[t * n..(t + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    fn push(&mut self, op: Op, value: Tensor, inputs: &[Var], name: &'static str) -> Result<Var, TensorError> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { op, value, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Adds a leaf; it receives a gradient iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs_grad = tensor.requires_grad();
        let value = Tensor { grad: None, ..tensor };
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    /// Registers a named parameter once per graph; later calls return the same node.
    pub fn param(&mut self, name: &str, tensor: &Tensor) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.leaf(tensor.clone().with_requires_grad(true));
        self.params.insert(name.to_string(), v);
        v
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize), TensorError> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op,
                left: s.to_vec(),
                right: vec![],
            });
        }
        Ok((s[0], s[1]))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(vec![m, n], data)?;
        self.push(Op::Matmul(a, b), value, &[a, b], "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(Op::Add(a, b), value, &[a, b], "add")
    }

    /// Adds a length-n vector to every row of `a` (bias add, mask add).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, TensorError> {
        let n = self.value(a).cols();
        if self.value(row).len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                left: self.shape(a).to_vec(),
                right: self.shape(row).to_vec(),
            });
        }
        let r = self.value(row).data();
        let data = self
            .value(a)
            .data()
            .chunks(n)
            .flat_map(|c| c.iter().zip(r).map(|(x, y)| x + y))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(Op::AddRow(a, row), value, &[a, row], "add_row")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(Op::Mul(a, b), value, &[a, b], "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(Op::Scale(a, c), value, &[a], "scale")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let (m, n) = self.dims2(a, "transpose")?;
        let value = Tensor::new(vec![n, m], transpose_raw(self.value(a).data(), m, n))?;
        self.push(Op::Transpose(a), value, &[a], "transpose")
    }

    /// Row-wise softmax over the last axis, with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let src = self.value(a);
        let n = src.cols();
        let mut data = src.data().to_vec();
        data.chunks_mut(n).for_each(softmax_in_place);
        let value = Tensor::new(src.shape().to_vec(), data)?;
        self.push(Op::SoftmaxRows(a), value, &[a], "softmax_rows")
    }

    /// `gamma * (x - mean) / sqrt(var + eps) + beta` over the last axis, biased variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, TensorError> {
        if eps <= 0.0 {
            return Err(TensorError::Precondition(format!(
                "layer_norm eps must be > 0, got {eps}"
            )));
        }
        let d = self.value(x).cols();
        for p in [gamma, beta] {
            if self.value(p).len() != d {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    left: self.shape(x).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let src = self.value(x);
        let rows = src.rows();
        let mut xhat = Vec::with_capacity(src.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(src.len());
        for row in src.data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        let value = Tensor::new(src.shape().to_vec(), out)?;
        self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            value,
            &[x, gamma, beta],
            "layer_norm",
        )
    }

    /// Exact GELU, `x * Phi(x)` with the Gaussian CDF via erf.
    pub fn gelu(&mut self, a: Var) -> Result<Var, TensorError> {
        let data = self.value(a).data().iter().map(|&x| gelu_scalar(x)).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(Op::Gelu(a), value, &[a], "gelu")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, TensorError> {
        let data = self.value(a).data().iter().map(|x| x.tanh()).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(Op::Tanh(a), value, &[a], "tanh")
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let (m, n) = self.dims2(a, "slice_cols")?;
        if len == 0 || start + len > n {
            return Err(TensorError::Precondition(format!(
                "slice_cols {start}..{} out of {n}",
                start + len
            )));
        }
        let src = self.value(a).data();
        let data = (0..m)
            .flat_map(|i| src[i * n + start..i * n + start + len].iter().copied())
            .collect();
        let value = Tensor::new(vec![m, len], data)?;
        self.push(Op::SliceCols { a, start }, value, &[a], "slice_cols")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let m = self.dims2(parts[0], "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.dims2(p, "concat_cols")?;
            if pm != m {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.shape(parts[0]).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let value = Tensor::new(vec![m, n], data)?;
        self.push(Op::ConcatCols(parts.to_vec()), value, parts, "concat_cols")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let n = self.dims2(parts[0], "concat_rows")?.1;
        let mut m = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (pm, pn) = self.dims2(p, "concat_rows")?;
            if pn != n {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    left: self.shape(parts[0]).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            m += pm;
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(vec![m, n], data)?;
        self.push(Op::ConcatRows(parts.to_vec()), value, parts, "concat_rows")
    }

    /// Embedding lookup: rows of `table` selected by `ids`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let (v, d) = self.dims2(table, "gather_rows")?;
        if ids.is_empty() {
            return Err(TensorError::Precondition("gather_rows with no ids".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(TensorError::Precondition(format!(
                "row index {bad} out of range for {v} rows"
            )));
        }
        let src = self.value(table);
        let data = ids.iter().flat_map(|&i| src.row(i).iter().copied()).collect();
        let value = Tensor::new(vec![ids.len(), d], data)?;
        self.push(
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            value,
            &[table],
            "gather_rows",
        )
    }

    pub fn row(&mut self, a: Var, i: usize) -> Result<Var, TensorError> {
        let m = self.dims2(a, "row")?.0;
        if i >= m {
            return Err(TensorError::Precondition(format!("row {i} out of {m}")));
        }
        self.gather_rows(a, &[i])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = Tensor::new(shape.to_vec(), self.value(a).data().to_vec())?;
        self.push(Op::Reshape(a), value, &[a], "reshape")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let s = self.value(a).data().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s), &[a], "sum")
    }

    /// `-log softmax(logits)[label]` via log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var, TensorError> {
        let z = self.value(logits).data();
        if label >= z.len() {
            return Err(TensorError::Precondition(format!(
                "label {label} out of range for {} classes",
                z.len()
            )));
        }
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let probs = z.iter().map(|v| (v - lse).exp()).collect();
        let loss = lse - z[label];
        self.push(
            Op::CrossEntropy { logits, label, probs },
            Tensor::scalar(loss),
            &[logits],
            "cross_entropy",
        )
    }

    /// Reverse pass from a scalar `loss`. Consumes the graph.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients, TensorError> {
        if self.consumed {
            return Err(TensorError::GraphConsumed);
        }
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let needs = |v: &Var| self.nodes[v.0].needs_grad;
            match &node.op {
                Op::Leaf => {
                    let t = Tensor::new(node.value.shape().to_vec(), g)?;
                    out.leaves.insert(id, t);
                }
                Op::Matmul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                    if needs(a) {
                        let bt = transpose_raw(bv.data(), k, n);
                        add_into(&mut grads[a.0], &matmul_raw(&g, &bt, m, n, k));
                    }
                    if needs(b) {
                        let at = transpose_raw(av.data(), m, k);
                        add_into(&mut grads[b.0], &matmul_raw(&at, &g, k, m, n));
                    }
                }
                Op::Add(a, b) => {
                    if needs(a) {
                        add_into(&mut grads[a.0], &g);
                    }
                    if needs(b) {
                        add_into(&mut grads[b.0], &g);
                    }
                }
                Op::AddRow(a, r) => {
                    if needs(a) {
                        add_into(&mut grads[a.0], &g);
                    }
                    if needs(r) {
                        let n = self.value(*r).len();
                        let mut acc = vec![0.0; n];
                        for chunk in g.chunks(n) {
                            acc.iter_mut().zip(chunk).for_each(|(s, v)| *s += v);
                        }
                        add_into(&mut grads[r.0], &acc);
                    }
                }
                Op::Mul(a, b) => {
                    if needs(a) {
                        let d: Vec<f64> = g.iter().zip(self.value(*b).data()).map(|(x, y)| x * y).collect();
                        add_into(&mut grads[a.0], &d);
                    }
                    if needs(b) {
                        let d: Vec<f64> = g.iter().zip(self.value(*a).data()).map(|(x, y)| x * y).collect();
                        add_into(&mut grads[b.0], &d);
                    }
                }
                Op::Scale(a, c) => {
                    let d: Vec<f64> = g.iter().map(|x| x * c).collect();
                    add_into(&mut grads[a.0], &d);
                }
                Op::Transpose(a) => {
                    let s = node.value.shape();
                    add_into(&mut grads[a.0], &transpose_raw(&g, s[0], s[1]));
                }
                Op::SoftmaxRows(a) => {
                    let y = node.value.data();
                    let n = node.value.cols();
                    let mut d = vec![0.0; y.len()];
                    for ((dr, yr), gr) in d.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..n {
                            dr[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    add_into(&mut grads[a.0], &d);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let d = node.value.cols();
                    let gam = self.value(*gamma).data();
                    if needs(gamma) {
                        let mut acc = vec![0.0; d];
                        for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                            for j in 0..d {
                                acc[j] += gr[j] * hr[j];
                            }
                        }
                        add_into(&mut grads[gamma.0], &acc);
                    }
                    if needs(beta) {
                        let mut acc = vec![0.0; d];
                        for gr in g.chunks(d) {
                            acc.iter_mut().zip(gr).for_each(|(s, v)| *s += v);
                        }
                        add_into(&mut grads[beta.0], &acc);
                    }
                    if needs(x) {
                        let mut dx = vec![0.0; g.len()];
                        for (r, ((dxr, gr), hr)) in dx.chunks_mut(d).zip(g.chunks(d)).zip(xhat.chunks(d)).enumerate() {
                            let dh: Vec<f64> = gr.iter().zip(gam).map(|(a, b)| a * b).collect();
                            let mean_dh = dh.iter().sum::<f64>() / d as f64;
                            let mean_dh_h = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                            for j in 0..d {
                                dxr[j] = inv_std[r] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                            }
                        }
                        add_into(&mut grads[x.0], &dx);
                    }
                }
                Op::Gelu(a) => {
                    let d: Vec<f64> = g
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(gv, &x)| gv * gelu_deriv(x))
                        .collect();
                    add_into(&mut grads[a.0], &d);
                }
                Op::Tanh(a) => {
                    let d: Vec<f64> = g
                        .iter()
                        .zip(node.value.data())
                        .map(|(gv, y)| gv * (1.0 - y * y))
                        .collect();
                    add_into(&mut grads[a.0], &d);
                }
                Op::SliceCols { a, start } => {
                    let (m, n) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                    let len = node.value.cols();
                    let mut d = vec![0.0; m * n];
                    for i in 0..m {
                        d[i * n + start..i * n + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                    }
                    add_into(&mut grads[a.0], &d);
                }
                Op::ConcatCols(parts) => {
                    let m = node.value.shape()[0];
                    let n = node.value.cols();
                    let mut off = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        if needs(p) {
                            let d: Vec<f64> = (0..m)
                                .flat_map(|i| g[i * n + off..i * n + off + w].iter().copied())
                                .collect();
                            add_into(&mut grads[p.0], &d);
                        }
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let len = self.value(*p).len();
                        if needs(p) {
                            add_into(&mut grads[p.0], &g[off..off + len]);
                        }
                        off += len;
                    }
                }
                Op::GatherRows { table, ids } => {
                    let tv = self.value(*table);
                    let d = tv.cols();
                    let mut acc = vec![0.0; tv.len()];
                    for (r, &i) in ids.iter().enumerate() {
                        for j in 0..d {
                            acc[i * d + j] += g[r * d + j];
                        }
                    }
                    add_into(&mut grads[table.0], &acc);
                }
                Op::Reshape(a) => add_into(&mut grads[a.0], &g),
                Op::Sum(a) => {
                    let n = self.value(*a).len();
                    add_into(&mut grads[a.0], &vec![g[0]; n]);
                }
                Op::CrossEntropy { logits, label, probs } => {
                    let d: Vec<f64> = probs
                        .iter()
                        .enumerate()
                        .map(|(j, p)| g[0] * (p - if j == *label { 1.0 } else { 0.0 }))
                        .collect();
                    add_into(&mut grads[logits.0], &d);
                }
            }
        }

        for (name, v) in &self.params {
            if let Some(t) = out.leaves.get(&v.0) {
                out.params.insert(name.clone(), t.clone());
            } else {
                out.params.insert(name.clone(), Tensor::zeros(self.shape(*v)));
            }
        }
        Ok(out)
    }
}
