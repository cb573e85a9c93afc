//! Define-by-run reverse-mode autodiff.
//!
//! Every operation appends a node holding its forward value; `backward`
//! walks the node list in reverse. Matrix operations treat rank-1 tensors as
//! one row and reductions produce rank-0 scalars.

use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    Sum(Var),
    Mean(Var),
    MeanGroups(Var, usize),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    CrossEntropy(Var, Vec<usize>),
    BceWithLogits(Var, Vec<f64>),
    L1(Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn dims(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    t.dims2()
        .ok_or_else(|| Error::shape(op, format!("expected rank <= 2, got {:?}", t.shape())))
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
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

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax of a `rows x cols` buffer.
pub fn softmax_rows_raw(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / total));
    }
    out
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

/// Numerically stable `softplus(x) = ln(1 + e^x)`.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn tag<T>(&self, r: Result<T>) -> Result<T> {
        r.map_err(|e| e.at_node(self.nodes.len()))
    }

    /// A constant input; receives an adjoint but is not a parameter.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input)
    }

    /// Snapshots parameter `id` from `store` as a leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let r = (|| {
            let (m, k) = dims(self.value(a), "matmul")?;
            let (k2, n) = dims(self.value(b), "matmul")?;
            if k != k2 {
                return Err(Error::shape(
                    "matmul",
                    format!("[{m}, {k}] x [{k2}, {n}]: inner dimensions differ"),
                ));
            }
            let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
            Ok(Tensor::matrix(m, n, out))
        })();
        let value = self.tag(r)?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = dims(self.value(a), "transpose");
        let (m, n) = self.tag(r)?;
        let value = Tensor::matrix(n, m, transpose_raw(self.value(a).data(), m, n));
        Ok(self.push(value, Op::Transpose(a)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return self.tag(Err(Error::shape(op, format!("{sa:?} vs {sb:?}"))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    fn row_broadcast(&self, op: &'static str, x: Var, row: Var) -> Result<(usize, usize)> {
        let r = (|| {
            let (m, n) = dims(self.value(x), op)?;
            let (rr, rn) = dims(self.value(row), op)?;
            if rr != 1 || rn != n {
                return Err(Error::shape(
                    op,
                    format!(
                        "cannot broadcast {:?} over rows of [{m}, {n}]",
                        self.value(row).shape()
                    ),
                ));
            }
            Ok((m, n))
        })();
        self.tag(r)
    }

    /// `x + row`, with `row` broadcast over the rows of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (m, n) = self.row_broadcast("add_row", x, row)?;
        let r = self.value(row).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + r[i % n])
            .collect();
        Ok(self.push(Tensor::matrix(m, n, data), Op::AddRow(x, row)))
    }

    /// `x ⊙ row`, with `row` broadcast over the rows of `x`.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (m, n) = self.row_broadcast("mul_row", x, row)?;
        let r = self.value(row).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * r[i % n])
            .collect();
        Ok(self.push(Tensor::matrix(m, n, data), Op::MulRow(x, row)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::Scale(x, c))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(value, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        self.push(value, Op::Sigmoid(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let r = dims(self.value(x), "softmax");
        let (m, n) = self.tag(r)?;
        let data = softmax_rows_raw(self.value(x).data(), n);
        Ok(self.push(Tensor::matrix(m, n, data), Op::SoftmaxRows(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::scalar(t.sum() / t.numel() as f64);
        self.push(value, Op::Mean(x))
    }

    /// Averages consecutive blocks of `group` rows: `[b * group, n] -> [b, n]`.
    pub fn mean_groups(&mut self, x: Var, group: usize) -> Result<Var> {
        let r = dims(self.value(x), "mean_groups").and_then(|(m, n)| {
            if group == 0 || m % group != 0 {
                Err(Error::shape(
                    "mean_groups",
                    format!("{m} rows are not a multiple of group {group}"),
                ))
            } else {
                Ok((m, n))
            }
        });
        let (m, n) = self.tag(r)?;
        let src = self.value(x).data();
        let b = m / group;
        let mut data = vec![0.0; b * n];
        for (i, row) in src.chunks(n).enumerate() {
            let out = &mut data[(i / group) * n..(i / group + 1) * n];
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let inv = 1.0 / group as f64;
        data.iter_mut().for_each(|v| *v *= inv);
        Ok(self.push(Tensor::matrix(b, n, data), Op::MeanGroups(x, group)))
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let r = (|| {
            let first = parts
                .first()
                .ok_or_else(|| Error::shape("concat", "no operands"))?;
            let (_, n) = dims(self.value(*first), "concat")?;
            let mut rows = 0;
            let mut data = Vec::new();
            for &p in parts {
                let (m, c) = dims(self.value(p), "concat")?;
                if c != n {
                    return Err(Error::shape(
                        "concat",
                        format!("column counts {n} and {c} differ"),
                    ));
                }
                rows += m;
                data.extend_from_slice(self.value(p).data());
            }
            Ok(Tensor::matrix(rows, n, data))
        })();
        let value = self.tag(r)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec())))
    }

    /// Rows `start..start + len` of `x`.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let r = dims(self.value(x), "slice_rows").and_then(|(m, n)| {
            if len == 0 || start + len > m {
                Err(Error::shape(
                    "slice_rows",
                    format!("rows {start}..{} of {m}", start + len),
                ))
            } else {
                Ok(n)
            }
        });
        let n = self.tag(r)?;
        let data = self.value(x).data()[start * n..(start + len) * n].to_vec();
        Ok(self.push(Tensor::matrix(len, n, data), Op::SliceRows(x, start)))
    }

    /// Mean softmax cross-entropy of `logits` (`[b, classes]`) against
    /// integer class targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let r = dims(self.value(logits), "cross_entropy").and_then(|(m, n)| {
            if targets.len() != m {
                Err(Error::shape(
                    "cross_entropy",
                    format!("{m} rows but {} targets", targets.len()),
                ))
            } else if let Some(t) = targets.iter().find(|&&t| t >= n) {
                Err(Error::shape(
                    "cross_entropy",
                    format!("target {t} out of {n} classes"),
                ))
            } else {
                Ok(n)
            }
        });
        let n = self.tag(r)?;
        let total: f64 = self
            .value(logits)
            .data()
            .chunks(n)
            .zip(targets)
            .map(|(row, &t)| log_sum_exp(row) - row[t])
            .sum();
        let value = Tensor::scalar(total / targets.len() as f64);
        Ok(self.push(value, Op::CrossEntropy(logits, targets.to_vec())))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against targets in
    /// `[0, 1]`, computed from the logits for stability.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        if self.value(logits).numel() != targets.len() {
            let msg = format!(
                "{} logits but {} targets",
                self.value(logits).numel(),
                targets.len()
            );
            return self.tag(Err(Error::shape("bce", msg)));
        }
        let total: f64 = self
            .value(logits)
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &y)| softplus(z) - y * z)
            .sum();
        let value = Tensor::scalar(total / targets.len() as f64);
        Ok(self.push(value, Op::BceWithLogits(logits, targets.to_vec())))
    }

    /// Sum of absolute values.
    pub fn l1(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).data().iter().map(|v| v.abs()).sum());
        self.push(value, Op::L1(x))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let (lower, upper) = adj.split_at_mut(i);
            let Some(g) = upper[0].as_ref() else { continue };
            let g = g.as_slice();
            let node = &self.nodes[i];
            // Operands always precede their result, so they live in `lower`.
            let mut acc = |v: Var, contrib: Vec<f64>| match &mut lower[v.0] {
                Some(existing) => existing.iter_mut().zip(&contrib).for_each(|(e, c)| *e += c),
                slot @ None => *slot = Some(contrib),
            };
            match &node.op {
                Op::Input | Op::Param(_) => {}
                Op::MatMul(a, b) => {
                    let (m, k) = self.value(*a).dims2().unwrap();
                    let n = self.value(*b).cols();
                    let bt = transpose_raw(self.value(*b).data(), k, n);
                    acc(*a, matmul_raw(g, &bt, m, n, k));
                    let at = transpose_raw(self.value(*a).data(), m, k);
                    acc(*b, matmul_raw(&at, g, k, m, n));
                }
                Op::Transpose(a) => {
                    let (m, n) = self.value(*a).dims2().unwrap();
                    acc(*a, transpose_raw(g, n, m));
                }
                Op::Add(a, b) => {
                    acc(*a, g.to_vec());
                    acc(*b, g.to_vec());
                }
                Op::AddRow(x, row) => {
                    let n = self.value(*row).numel();
                    let mut gr = vec![0.0; n];
                    g.iter().enumerate().for_each(|(j, v)| gr[j % n] += v);
                    acc(*x, g.to_vec());
                    acc(*row, gr);
                }
                Op::Mul(a, b) => {
                    let ga = g
                        .iter()
                        .zip(self.value(*b).data())
                        .map(|(g, v)| g * v)
                        .collect();
                    let gb = g
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(g, v)| g * v)
                        .collect();
                    acc(*a, ga);
                    acc(*b, gb);
                }
                Op::MulRow(x, row) => {
                    let r = self.value(*row).data();
                    let n = r.len();
                    let xv = self.value(*x).data();
                    let mut gr = vec![0.0; n];
                    let mut gx = Vec::with_capacity(g.len());
                    for (j, gv) in g.iter().enumerate() {
                        gx.push(gv * r[j % n]);
                        gr[j % n] += gv * xv[j];
                    }
                    acc(*x, gx);
                    acc(*row, gr);
                }
                Op::Scale(x, c) => acc(*x, g.iter().map(|v| v * c).collect()),
                Op::Relu(x) => {
                    let gx = g
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                        .collect();
                    acc(*x, gx);
                }
                Op::Sigmoid(x) => {
                    let gx = g
                        .iter()
                        .zip(node.value.data())
                        .map(|(g, s)| g * s * (1.0 - s))
                        .collect();
                    acc(*x, gx);
                }
                Op::SoftmaxRows(x) => {
                    let n = node.value.cols();
                    let mut gx = Vec::with_capacity(g.len());
                    for (grow, srow) in g.chunks(n).zip(node.value.data().chunks(n)) {
                        let dot: f64 = grow.iter().zip(srow).map(|(a, b)| a * b).sum();
                        gx.extend(grow.iter().zip(srow).map(|(gv, s)| s * (gv - dot)));
                    }
                    acc(*x, gx);
                }
                Op::Sum(x) => acc(*x, vec![g[0]; self.value(*x).numel()]),
                Op::Mean(x) => {
                    let n = self.value(*x).numel();
                    acc(*x, vec![g[0] / n as f64; n]);
                }
                Op::MeanGroups(x, group) => {
                    let n = node.value.cols();
                    let m = self.value(*x).rows();
                    let inv = 1.0 / *group as f64;
                    let mut gx = Vec::with_capacity(m * n);
                    for i in 0..m {
                        let src = &g[(i / group) * n..(i / group + 1) * n];
                        gx.extend(src.iter().map(|v| v * inv));
                    }
                    acc(*x, gx);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let len = self.value(*p).numel();
                        acc(*p, g[offset..offset + len].to_vec());
                        offset += len;
                    }
                }
                Op::SliceRows(x, start) => {
                    let n = node.value.cols();
                    let mut gx = vec![0.0; self.value(*x).numel()];
                    gx[start * n..start * n + g.len()].copy_from_slice(g);
                    acc(*x, gx);
                }
                Op::CrossEntropy(logits, targets) => {
                    let n = self.value(*logits).cols();
                    let scale = g[0] / targets.len() as f64;
                    let mut gx = softmax_rows_raw(self.value(*logits).data(), n);
                    for (r, &t) in targets.iter().enumerate() {
                        gx[r * n + t] -= 1.0;
                    }
                    gx.iter_mut().for_each(|v| *v *= scale);
                    acc(*logits, gx);
                }
                Op::BceWithLogits(logits, targets) => {
                    let scale = g[0] / targets.len() as f64;
                    let gx = self
                        .value(*logits)
                        .data()
                        .iter()
                        .zip(targets)
                        .map(|(&z, &y)| (sigmoid(z) - y) * scale)
                        .collect();
                    acc(*logits, gx);
                }
                Op::L1(x) => {
                    let gx = self
                        .value(*x)
                        .data()
                        .iter()
                        .map(|&v| {
                            if v > 0.0 {
                                g[0]
                            } else if v < 0.0 {
                                -g[0]
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    acc(*x, gx);
                }
            }
        }

        let mut grads = Gradients {
            nodes: Vec::with_capacity(self.nodes.len()),
            params: Vec::new(),
        };
        for (i, (node, a)) in self.nodes.iter().zip(adj).enumerate() {
            let t = a.map(|d| Tensor {
                shape: node.value.shape().to_vec(),
                data: d,
            });
            if let Op::Param(id) = node.op {
                grads.params.push((id, i));
            }
            grads.nodes.push(t);
        }
        Ok(grads)
    }
}

/// Adjoints produced by [`Graph::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Adjoint of any node, `None` when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for each parameter in `store`, summed over every snapshot of
    /// that parameter in the graph. Unreachable parameters get zeros.
    pub fn for_store(&self, store: &ParamStore) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = store
            .ids()
            .map(|id| Tensor::zeros(store.get(id).shape()))
            .collect();
        for &(id, node) in &self.params {
            if let Some(g) = &self.nodes[node] {
                out[id.0]
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(o, v)| *o += v);
            }
        }
        out
    }

    /// Whether the loss reached parameter `id` through any path.
    pub fn reaches(&self, id: ParamId) -> bool {
        self.params
            .iter()
            .any(|&(p, n)| p == id && self.nodes[n].is_some())
    }
}
