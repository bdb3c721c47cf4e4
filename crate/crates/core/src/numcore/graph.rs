//! Tape-based reverse-mode differentiation.
//!
//! Every op evaluates eagerly and appends a node holding its forward value.
//! Nodes only reference earlier nodes, so the tape is topologically ordered
//! by construction and the backward pass is a single reverse sweep.

use std::collections::BTreeMap;

use super::fft::{real_dft_columns, row_norms};
use super::{ParamSet, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param(String),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gather(Var, Vec<usize>),
    MeanRows(Var),
    PrefixMean(Var),
    Silu(Var),
    Tanh(Var),
    Log(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    LogSoftmaxRows(Var),
    PickSum(Var, Vec<(usize, usize)>),
    Sum(Var),
    Mean(Var),
    SliceRows(Var, usize),
    PadRows(Var),
    Select(Var, Vec<usize>),
    RowNormalize(Var),
    SpectralMagnitude(Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A recorded computation. Drop it after `backward` to free the tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log σ(x)` without overflow for large |x|.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn log_softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_z = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for (o, v) in out.iter_mut().zip(row) {
        *o = (v - max) - log_z;
    }
}

/// Row-wise log-softmax on a plain tensor.
pub fn log_softmax_rows(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    let c = logits.cols();
    for r in 0..logits.rows() {
        log_softmax_row(logits.row(r), &mut out.data_mut()[r * c..(r + 1) * c]);
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
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

    /// Convenience accessor for one-element nodes.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Param(_) => true,
            _ => inputs.iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that is never differentiated.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, &[])
    }

    /// A named leaf whose gradient is reported by [`Graph::backward`].
    pub fn param(&mut self, name: &str, t: Tensor) -> Var {
        self.push(t, Op::Param(name.to_string()), &[])
    }

    /// Registers every tensor of `params`, keyed by name.
    pub fn bind(&mut self, params: &ParamSet) -> BTreeMap<String, Var> {
        params
            .iter()
            .map(|(name, t)| (name.to_string(), self.param(name, t.clone())))
            .collect()
    }

    /// Registers every tensor of `params` as a constant.
    pub fn bind_frozen(&mut self, params: &ParamSet) -> BTreeMap<String, Var> {
        params
            .iter()
            .map(|(name, t)| (name.to_string(), self.constant(t.clone())))
            .collect()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// Adds the vector `v` (length n) to every row of `a` (m × n).
    pub fn add_row(&mut self, a: Var, v: Var) -> Result<Var> {
        let av = self.value(a);
        let vv = self.value(v);
        if vv.len() != av.cols() {
            return Err(Error::Dimension {
                op: "add_row",
                left: av.shape().to_vec(),
                right: vv.shape().to_vec(),
            });
        }
        let mut out = av.clone();
        let c = av.cols();
        for r in 0..av.rows() {
            for (o, x) in out.row_mut(r).iter_mut().zip(vv.data()) {
                *o += x;
            }
        }
        debug_assert_eq!(out.len() % c.max(1), 0);
        Ok(self.push(out, Op::AddRow(a, v), &[a, v]))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).scale(k);
        self.push(out, Op::Scale(a, k), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let out = self.value(table).gather_rows(ids)?;
        Ok(self.push(out, Op::Gather(table, ids.to_vec()), &[table]))
    }

    /// Column means, returned as a `1 × n` row.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (m, n) = av.check_matrix("mean_rows")?;
        if m == 0 {
            return Err(Error::contract("mean_rows on an empty matrix"));
        }
        let mut out = Tensor::zeros(&[1, n]);
        for r in 0..m {
            for (o, x) in out.data_mut().iter_mut().zip(av.row(r)) {
                *o += x;
            }
        }
        let out = out.scale(1.0 / m as f64);
        Ok(self.push(out, Op::MeanRows(a), &[a]))
    }

    /// Causal running mean: row i is the mean of rows 0..=i.
    pub fn prefix_mean(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (m, n) = av.check_matrix("prefix_mean")?;
        let mut out = Tensor::zeros(&[m, n]);
        let mut acc = vec![0.0; n];
        for r in 0..m {
            for (s, x) in acc.iter_mut().zip(av.row(r)) {
                *s += x;
            }
            let inv = 1.0 / (r + 1) as f64;
            for (o, s) in out.row_mut(r).iter_mut().zip(&acc) {
                *o = s * inv;
            }
        }
        Ok(self.push(out, Op::PrefixMean(a), &[a]))
    }

    /// `x · σ(x)` elementwise.
    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * sigmoid(x));
        self.push(out, Op::Silu(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        self.push(out, Op::Log(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a), &[a])
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(log_sigmoid);
        self.push(out, Op::LogSigmoid(a), &[a])
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.value(a).check_matrix("log_softmax_rows")?;
        let out = log_softmax_rows(self.value(a));
        Ok(self.push(out, Op::LogSoftmaxRows(a), &[a]))
    }

    /// Sum of the entries at the given (row, col) coordinates.
    pub fn pick_sum(&mut self, a: Var, coords: &[(usize, usize)]) -> Result<Var> {
        let av = self.value(a);
        let (m, n) = av.check_matrix("pick_sum")?;
        let mut s = 0.0;
        for &(r, c) in coords {
            if r >= m || c >= n {
                return Err(Error::Index {
                    id: r * n + c,
                    bound: m * n,
                });
            }
            s += av.at(r, c);
        }
        Ok(self.push(Tensor::scalar(s), Op::PickSum(a, coords.to_vec()), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::contract("mean of an empty tensor"));
        }
        let s = self.value(a).sum() / n as f64;
        Ok(self.push(Tensor::scalar(s), Op::Mean(a), &[a]))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        let (m, n) = av.check_matrix("slice_rows")?;
        if start > end || end > m {
            return Err(Error::Index { id: end, bound: m });
        }
        let out = Tensor::matrix(end - start, n, av.data()[start * n..end * n].to_vec())?;
        Ok(self.push(out, Op::SliceRows(a, start), &[a]))
    }

    /// Appends zero rows so the matrix has `rows` rows.
    pub fn pad_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        let av = self.value(a);
        let (m, n) = av.check_matrix("pad_rows")?;
        if rows < m {
            return Err(Error::Dimension {
                op: "pad_rows",
                left: av.shape().to_vec(),
                right: vec![rows, n],
            });
        }
        let mut data = av.data().to_vec();
        data.resize(rows * n, 0.0);
        let out = Tensor::matrix(rows, n, data)?;
        Ok(self.push(out, Op::PadRows(a), &[a]))
    }

    /// Flat entries at `idx`, as a vector.
    pub fn select(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let mut out = Vec::with_capacity(idx.len());
        for &i in idx {
            out.push(*av.data().get(i).ok_or(Error::Index {
                id: i,
                bound: av.len(),
            })?);
        }
        Ok(self.push(Tensor::vector(out), Op::Select(a, idx.to_vec()), &[a]))
    }

    /// Scales rows to unit L2 norm.
    pub fn row_normalize(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        av.check_matrix("row_normalize")?;
        if (0..av.rows()).any(|r| av.row(r).iter().all(|&x| x == 0.0)) {
            return Err(Error::contract("row_normalize on an all-zero row"));
        }
        let out = av.l2_normalize_rows();
        Ok(self.push(out, Op::RowNormalize(a), &[a]))
    }

    /// Per-frequency ℓ2 norm of the real DFT part along rows of an `L × D`
    /// matrix; returns a length-L vector.
    pub fn spectral_magnitude(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        av.check_matrix("spectral_magnitude")?;
        if av.rows() == 0 {
            return Err(Error::contract("spectral_magnitude needs L >= 1"));
        }
        let out = Tensor::vector(row_norms(&real_dft_columns(av)));
        Ok(self.push(out, Op::SpectralMagnitude(a), &[a]))
    }

    /// Gradients of the scalar `loss` with respect to every [`Graph::param`]
    /// leaf. Parameters the loss does not depend on get exact zeros.
    pub fn backward(&self, loss: Var) -> Result<ParamSet> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));
        let mut out = ParamSet::new();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if let Op::Param(name) = &node.op {
                let g = grads[idx]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                match out.get_mut(name) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        out.insert(name, g);
                    }
                }
                continue;
            }
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
        }

        // Params recorded after the loss cannot influence it.
        for node in &self.nodes[loss.0 + 1..] {
            if let Op::Param(name) = &node.op {
                if out.get(name).is_none() {
                    out.insert(name, Tensor::zeros(node.value.shape()));
                }
            }
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let y = &node.value;
        match &node.op {
            Op::Constant | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                if self.nodes[a.0].needs_grad {
                    let gb = g.matmul(&self.value(*b).transpose()?)?;
                    self.accumulate(grads, *a, gb);
                }
                if self.nodes[b.0].needs_grad {
                    let ga = self.value(*a).transpose()?.matmul(g)?;
                    self.accumulate(grads, *b, ga);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                let ga = g.zip_map(self.value(*b), "mul", |x, y| x * y)?;
                let gb = g.zip_map(self.value(*a), "mul", |x, y| x * y)?;
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::AddRow(a, v) => {
                self.accumulate(grads, *a, g.clone());
                let vv = self.value(*v);
                let mut gv = Tensor::zeros(vv.shape());
                for r in 0..g.rows() {
                    for (o, x) in gv.data_mut().iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
                self.accumulate(grads, *v, gv);
            }
            Op::Scale(a, k) => self.accumulate(grads, *a, g.scale(*k)),
            Op::Gather(table, ids) => {
                let tv = self.value(*table);
                let mut gt = Tensor::zeros(tv.shape());
                for (i, &id) in ids.iter().enumerate() {
                    for (o, x) in gt.row_mut(id).iter_mut().zip(g.row(i)) {
                        *o += x;
                    }
                }
                self.accumulate(grads, *table, gt);
            }
            Op::MeanRows(a) => {
                let av = self.value(*a);
                let m = av.rows();
                let mut ga = Tensor::zeros(av.shape());
                for r in 0..m {
                    for (o, x) in ga.row_mut(r).iter_mut().zip(g.data()) {
                        *o = x / m as f64;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::PrefixMean(a) => {
                // d x_j = Σ_{i ≥ j} g_i / (i + 1), a suffix sum.
                let m = g.rows();
                let n = g.cols();
                let mut ga = Tensor::zeros(g.shape());
                let mut acc = vec![0.0; n];
                for r in (0..m).rev() {
                    let inv = 1.0 / (r + 1) as f64;
                    for (s, x) in acc.iter_mut().zip(g.row(r)) {
                        *s += x * inv;
                    }
                    ga.row_mut(r).copy_from_slice(&acc);
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Silu(a) => {
                let ga = g.zip_map(self.value(*a), "silu", |gy, x| {
                    let s = sigmoid(x);
                    gy * s * (1.0 + x * (1.0 - s))
                })?;
                self.accumulate(grads, *a, ga);
            }
            Op::Tanh(a) => {
                let ga = g.zip_map(y, "tanh", |gy, t| gy * (1.0 - t * t))?;
                self.accumulate(grads, *a, ga);
            }
            Op::Log(a) => {
                let ga = g.zip_map(self.value(*a), "log", |gy, x| gy / x)?;
                self.accumulate(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let ga = g.zip_map(y, "sigmoid", |gy, s| gy * s * (1.0 - s))?;
                self.accumulate(grads, *a, ga);
            }
            Op::LogSigmoid(a) => {
                let ga = g.zip_map(self.value(*a), "log_sigmoid", |gy, x| gy * sigmoid(-x))?;
                self.accumulate(grads, *a, ga);
            }
            Op::LogSoftmaxRows(a) => {
                let mut ga = g.clone();
                for r in 0..y.rows() {
                    let gs: f64 = g.row(r).iter().sum();
                    for (o, ly) in ga.row_mut(r).iter_mut().zip(y.row(r)) {
                        *o -= ly.exp() * gs;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::PickSum(a, coords) => {
                let av = self.value(*a);
                let mut ga = Tensor::zeros(av.shape());
                let gs = g.item();
                for &(r, c) in coords {
                    let cur = ga.at(r, c);
                    ga.set(r, c, cur + gs);
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Sum(a) => {
                let ga = Tensor::filled(self.value(*a).shape(), g.item());
                self.accumulate(grads, *a, ga);
            }
            Op::Mean(a) => {
                let av = self.value(*a);
                let ga = Tensor::filled(av.shape(), g.item() / av.len() as f64);
                self.accumulate(grads, *a, ga);
            }
            Op::SliceRows(a, start) => {
                let av = self.value(*a);
                let n = av.cols();
                let mut ga = Tensor::zeros(av.shape());
                ga.data_mut()[start * n..start * n + g.len()].copy_from_slice(g.data());
                self.accumulate(grads, *a, ga);
            }
            Op::PadRows(a) => {
                let av = self.value(*a);
                let ga = Tensor::new(av.shape().to_vec(), g.data()[..av.len()].to_vec())?;
                self.accumulate(grads, *a, ga);
            }
            Op::Select(a, idx) => {
                let av = self.value(*a);
                let mut ga = Tensor::zeros(av.shape());
                for (&i, x) in idx.iter().zip(g.data()) {
                    ga.data_mut()[i] += x;
                }
                self.accumulate(grads, *a, ga);
            }
            Op::RowNormalize(a) => {
                let av = self.value(*a);
                let mut ga = Tensor::zeros(av.shape());
                for r in 0..av.rows() {
                    let norm = av.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dot: f64 = y.row(r).iter().zip(g.row(r)).map(|(u, gg)| u * gg).sum();
                    for ((o, u), gg) in ga.row_mut(r).iter_mut().zip(y.row(r)).zip(g.row(r)) {
                        *o = (gg - u * dot) / norm;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::SpectralMagnitude(a) => {
                // The real-part DFT is self-adjoint, so the pullback applies
                // the same transform to the per-coefficient cotangents.
                let re = real_dft_columns(self.value(*a));
                let mut dre = Tensor::zeros(re.shape());
                for k in 0..re.rows() {
                    let mag = y.data()[k];
                    if mag == 0.0 {
                        continue;
                    }
                    let gk = g.data()[k] / mag;
                    for (o, r) in dre.row_mut(k).iter_mut().zip(re.row(k)) {
                        *o = gk * r;
                    }
                }
                self.accumulate(grads, *a, real_dft_columns(&dre));
            }
        }
        Ok(())
    }
}
