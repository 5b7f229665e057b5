//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every primitive application in creation order, so the
//! tape is topologically sorted by construction. Values are computed eagerly
//! and kept on the tape; [`Graph::backward`] walks the tape from the loss
//! towards the leaves, accumulating input gradients in node order and then
//! input order.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, MatmulPlan};
use super::Tensor;
use crate::error::{ensure, Error, Result};
use crate::par;

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node of a specific [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var {
    graph: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale(f64),
    Exp,
    LogClamped(f64),
    ClampMin(f64),
    Gelu,
    SoftmaxRows,
    LogSoftmaxRows,
    LayerNorm(f64),
    MatMul,
    TransposeLast2,
    Permute(Vec<usize>),
    Reshape(Vec<usize>),
    MeanAxis(usize),
    SumAll,
    Concat(usize),
    Gather(Vec<usize>),
    SqDist,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Exp => "exp",
            Op::LogClamped(_) => "log",
            Op::ClampMin(_) => "clamp_min",
            Op::Gelu => "gelu",
            Op::SoftmaxRows => "softmax_rows",
            Op::LogSoftmaxRows => "log_softmax_rows",
            Op::LayerNorm(_) => "layer_norm",
            Op::MatMul => "matmul",
            Op::TransposeLast2 => "transpose",
            Op::Permute(_) => "permute",
            Op::Reshape(_) => "reshape",
            Op::MeanAxis(_) => "mean_axis",
            Op::SumAll => "sum",
            Op::Concat(_) => "concat",
            Op::Gather(_) => "gather",
            Op::SqDist => "sq_dist",
        }
    }

    fn eval(&self, x: &[&Tensor]) -> Result<Tensor> {
        Ok(match self {
            Op::Leaf => unreachable!("leaves are not evaluated"),
            Op::Add => kernels::add(x[0], x[1])?,
            Op::Sub => kernels::sub(x[0], x[1])?,
            Op::Mul => kernels::mul(x[0], x[1])?,
            Op::Scale(c) => kernels::map(x[0], |v| v * c),
            Op::Exp => kernels::map(x[0], f64::exp),
            Op::LogClamped(floor) => kernels::map(x[0], |v| v.max(*floor).ln()),
            Op::ClampMin(floor) => kernels::map(x[0], |v| v.max(*floor)),
            Op::Gelu => kernels::gelu(x[0]),
            Op::SoftmaxRows => kernels::softmax_rows(x[0]),
            Op::LogSoftmaxRows => kernels::log_softmax_rows(x[0]),
            Op::LayerNorm(eps) => kernels::layer_norm(x[0], x[1], x[2], *eps)?,
            Op::MatMul => kernels::matmul(x[0], x[1])?,
            Op::TransposeLast2 => kernels::transpose_last2(x[0])?,
            Op::Permute(axes) => kernels::permute(x[0], axes)?,
            Op::Reshape(shape) => x[0].reshape(shape)?,
            Op::MeanAxis(axis) => kernels::mean_axis(x[0], *axis)?,
            Op::SumAll => Tensor::scalar(kernels::sum_all(x[0])),
            Op::Concat(axis) => kernels::concat(x, *axis)?,
            Op::Gather(index) => kernels::gather_rows(x[0], index)?,
            Op::SqDist => kernels::sq_dist(x[0], x[1])?,
        })
    }

    /// Vector-Jacobian product: gradients for each input given the output
    /// gradient `g`.
    fn vjp(&self, x: &[&Tensor], out: &Tensor, g: &Tensor) -> Result<Vec<Tensor>> {
        Ok(match self {
            Op::Leaf => Vec::new(),
            Op::Add => vec![
                kernels::sum_to_shape(g, x[0].shape()),
                kernels::sum_to_shape(g, x[1].shape()),
            ],
            Op::Sub => vec![
                kernels::sum_to_shape(g, x[0].shape()),
                kernels::map(&kernels::sum_to_shape(g, x[1].shape()), |v| -v),
            ],
            Op::Mul => vec![
                kernels::sum_to_shape(&kernels::mul(g, x[1])?, x[0].shape()),
                kernels::sum_to_shape(&kernels::mul(g, x[0])?, x[1].shape()),
            ],
            Op::Scale(c) => vec![kernels::map(g, |v| v * c)],
            Op::Exp => vec![kernels::mul(g, out)?],
            Op::LogClamped(floor) => vec![zip_map(g, x[0], |gv, xv| {
                if xv > *floor {
                    gv / xv
                } else {
                    0.0
                }
            })],
            Op::ClampMin(floor) => vec![zip_map(g, x[0], |gv, xv| if xv > *floor { gv } else { 0.0 })],
            Op::Gelu => vec![zip_map(g, x[0], |gv, xv| gv * kernels::gelu_derivative(xv))],
            Op::SoftmaxRows => vec![softmax_vjp(out, g)],
            Op::LogSoftmaxRows => vec![log_softmax_vjp(out, g)],
            Op::LayerNorm(eps) => layer_norm_vjp(x[0], x[1], g, *eps),
            Op::MatMul => matmul_vjp(x[0], x[1], g)?,
            Op::TransposeLast2 => vec![kernels::transpose_last2(g)?],
            Op::Permute(axes) => vec![kernels::permute(g, &kernels::inverse_permutation(axes))?],
            Op::Reshape(_) => vec![g.reshape(x[0].shape())?],
            Op::MeanAxis(axis) => vec![mean_axis_vjp(x[0].shape(), *axis, g)],
            Op::SumAll => vec![Tensor::full(x[0].shape(), g.data()[0])],
            Op::Concat(axis) => concat_vjp(x, *axis, g),
            Op::Gather(index) => {
                let k = x[0].shape()[1];
                let mut gx = Tensor::zeros(x[0].shape());
                for (i, (&j, &gv)) in index.iter().zip(g.data()).enumerate() {
                    gx.data_mut()[i * k + j] += gv;
                }
                vec![gx]
            }
            Op::SqDist => sq_dist_vjp(x[0], x[1], g),
        })
    }
}

fn zip_map(g: &Tensor, x: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = g.data().iter().zip(x.data()).map(|(&a, &b)| f(a, b)).collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}

fn softmax_vjp(y: &Tensor, g: &Tensor) -> Tensor {
    let d = y.last_dim();
    let mut data = vec![0.0; y.numel()];
    par::for_each_row(&mut data, d, 4 * d, |i, out| {
        let (yr, gr) = (y.row(i), g.row(i));
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for j in 0..d {
            out[j] = yr[j] * (gr[j] - dot);
        }
    });
    Tensor::from_parts(y.shape().to_vec(), data)
}

fn log_softmax_vjp(y: &Tensor, g: &Tensor) -> Tensor {
    let d = y.last_dim();
    let mut data = vec![0.0; y.numel()];
    par::for_each_row(&mut data, d, 4 * d, |i, out| {
        let (yr, gr) = (y.row(i), g.row(i));
        let total: f64 = gr.iter().sum();
        for j in 0..d {
            out[j] = gr[j] - yr[j].exp() * total;
        }
    });
    Tensor::from_parts(y.shape().to_vec(), data)
}

fn layer_norm_vjp(x: &Tensor, gamma: &Tensor, g: &Tensor, eps: f64) -> Vec<Tensor> {
    let d = x.last_dim();
    let gam = gamma.data();
    let mut gx = vec![0.0; x.numel()];
    par::for_each_row(&mut gx, d, 10 * d, |i, out| {
        let (xr, gr) = (x.row(i), g.row(i));
        let (mean, rstd) = kernels::row_moments(xr, eps);
        let mut mean_gy = 0.0;
        let mut mean_gy_xhat = 0.0;
        for j in 0..d {
            let gy = gr[j] * gam[j];
            mean_gy += gy;
            mean_gy_xhat += gy * (xr[j] - mean) * rstd;
        }
        mean_gy /= d as f64;
        mean_gy_xhat /= d as f64;
        for j in 0..d {
            let xhat = (xr[j] - mean) * rstd;
            out[j] = rstd * (gr[j] * gam[j] - mean_gy - xhat * mean_gy_xhat);
        }
    });
    let mut g_gamma = vec![0.0; d];
    let mut g_beta = vec![0.0; d];
    for (xr, gr) in x.rows().zip(g.rows()) {
        let (mean, rstd) = kernels::row_moments(xr, eps);
        for j in 0..d {
            g_gamma[j] += gr[j] * (xr[j] - mean) * rstd;
            g_beta[j] += gr[j];
        }
    }
    vec![
        Tensor::from_parts(x.shape().to_vec(), gx),
        Tensor::vector(g_gamma),
        Tensor::vector(g_beta),
    ]
}

fn matmul_vjp(a: &Tensor, b: &Tensor, g: &Tensor) -> Result<Vec<Tensor>> {
    let MatmulPlan {
        m,
        k,
        n,
        pairs,
        shared_rhs,
        ..
    } = kernels::matmul_plan(a.shape(), b.shape())?;
    if shared_rhs {
        let rows = pairs.len() * m;
        let bt = kernels::transpose_flat(b.data(), k, n);
        let ga = kernels::gemm(g.data(), &bt, rows, n, k);
        let at = kernels::transpose_flat(a.data(), rows, k);
        let gb = kernels::gemm(&at, g.data(), k, rows, n);
        return Ok(vec![
            Tensor::from_parts(a.shape().to_vec(), ga),
            Tensor::from_parts(b.shape().to_vec(), gb),
        ]);
    }
    let mut ga = vec![0.0; a.numel()];
    let mut gb = vec![0.0; b.numel()];
    for (o, &(ia, ib)) in pairs.iter().enumerate() {
        let gm = &g.data()[o * m * n..(o + 1) * m * n];
        let am = &a.data()[ia * m * k..(ia + 1) * m * k];
        let bm = &b.data()[ib * k * n..(ib + 1) * k * n];
        let da = kernels::gemm(gm, &kernels::transpose_flat(bm, k, n), m, n, k);
        let db = kernels::gemm(&kernels::transpose_flat(am, m, k), gm, k, m, n);
        for (dst, v) in ga[ia * m * k..(ia + 1) * m * k].iter_mut().zip(da) {
            *dst += v;
        }
        for (dst, v) in gb[ib * k * n..(ib + 1) * k * n].iter_mut().zip(db) {
            *dst += v;
        }
    }
    Ok(vec![
        Tensor::from_parts(a.shape().to_vec(), ga),
        Tensor::from_parts(b.shape().to_vec(), gb),
    ])
}

fn mean_axis_vjp(shape: &[usize], axis: usize, g: &Tensor) -> Tensor {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let src = &g.data()[o * inner..(o + 1) * inner];
        for _ in 0..len {
            data.extend(src.iter().map(|v| v / len as f64));
        }
    }
    Tensor::from_parts(shape.to_vec(), data)
}

fn concat_vjp(parts: &[&Tensor], axis: usize, g: &Tensor) -> Vec<Tensor> {
    let shape = g.shape();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let total = shape[axis];
    let mut grads: Vec<Vec<f64>> = parts.iter().map(|p| Vec::with_capacity(p.numel())).collect();
    for o in 0..outer {
        let mut start = (o * total) * inner;
        for (p, dst) in parts.iter().zip(grads.iter_mut()) {
            let block = p.shape()[axis] * inner;
            dst.extend_from_slice(&g.data()[start..start + block]);
            start += block;
        }
    }
    parts
        .iter()
        .zip(grads)
        .map(|(p, d)| Tensor::from_parts(p.shape().to_vec(), d))
        .collect()
}

fn sq_dist_vjp(a: &Tensor, b: &Tensor, g: &Tensor) -> Vec<Tensor> {
    let (n, m, d) = (a.shape()[0], b.shape()[0], a.shape()[1]);
    let gd = g.data();
    let mut ga = vec![0.0; a.numel()];
    par::for_each_row(&mut ga, d, m * d, |i, out| {
        let ai = a.row(i);
        for j in 0..m {
            let w = 2.0 * gd[i * m + j];
            for (o, (x, y)) in out.iter_mut().zip(ai.iter().zip(b.row(j))) {
                *o += w * (x - y);
            }
        }
    });
    let mut gb = vec![0.0; b.numel()];
    par::for_each_row(&mut gb, d, n * d, |j, out| {
        let bj = b.row(j);
        for i in 0..n {
            let w = 2.0 * gd[i * m + j];
            for (o, (y, x)) in out.iter_mut().zip(bj.iter().zip(a.row(i))) {
                *o += w * (y - x);
            }
        }
    });
    vec![
        Tensor::from_parts(a.shape().to_vec(), ga),
        Tensor::from_parts(b.shape().to_vec(), gb),
    ]
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Tensor,
    requires_grad: bool,
}

/// Recorded computation. Values are evaluated eagerly as operations are added.
#[derive(Debug)]
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to grad-requiring leaves.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    graph: u64,
    by_leaf: BTreeMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.graph != self.graph {
            return None;
        }
        self.by_leaf.get(&v.index)
    }

    pub fn len(&self) -> usize {
        self.by_leaf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_leaf.is_empty()
    }

    /// `(leaf index, gradient)` pairs in leaf creation order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, &Tensor)> {
        self.by_leaf.iter().map(|(&i, t)| (i, t))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Op::Leaf, Vec::new(), value, requires_grad)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.graph, self.id, "variable from a different graph");
        &self.nodes[v.index].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    fn push(&mut self, op: Op, inputs: Vec<usize>, value: Tensor, requires_grad: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
        });
        Var {
            graph: self.id,
            index,
        }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(Error::ForeignVariable);
        }
        Ok(v.index)
    }

    fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        let idx = inputs
            .iter()
            .map(|&v| self.check(v))
            .collect::<Result<Vec<_>>>()?;
        let value = {
            let vals: Vec<&Tensor> = idx.iter().map(|&i| &self.nodes[i].value).collect();
            op.eval(&vals)?
        };
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = idx.iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push(op, idx, value, requires_grad))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Op::Scale(c), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Exp, &[a])
    }

    /// `ln(max(x, floor))`; zero gradient where the floor is active.
    pub fn log_clamped(&mut self, a: Var, floor: f64) -> Result<Var> {
        ensure!(floor > 0.0, "log floor must be positive, got {floor}");
        self.apply(Op::LogClamped(floor), &[a])
    }

    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var> {
        self.apply(Op::ClampMin(floor), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Gelu, &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::SoftmaxRows, &[a])
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::LogSoftmaxRows, &[a])
    }

    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.apply(Op::LayerNorm(eps), &[a, gamma, beta])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::MatMul, &[a, b])
    }

    pub fn transpose_last2(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::TransposeLast2, &[a])
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.apply(Op::Permute(axes.to_vec()), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Op::Reshape(shape.to_vec()), &[a])
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Op::MeanAxis(axis), &[a])
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::SumAll, &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel() as f64;
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / n)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        self.apply(Op::Concat(axis), parts)
    }

    /// `out[i] = a[i, index[i]]` for a `[b, k]` input.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        self.apply(Op::Gather(index.to_vec()), &[a])
    }

    /// Squared Euclidean distances between the rows of two matrices.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::SqDist, &[a, b])
    }

    /// Gradients of the scalar `loss` with respect to every leaf created with
    /// `requires_grad`. Leaves the loss does not depend on get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.check(loss)?;
        let loss_value = &self.nodes[root].value;
        if loss_value.numel() != 1 {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root + 1];
        grads[root] = Some(Tensor::ones(loss_value.shape()));
        let mut by_leaf = BTreeMap::new();
        for i in (0..=root).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if node.op == Op::Leaf {
                by_leaf.insert(i, g);
                continue;
            }
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|&j| &self.nodes[j].value).collect();
            let input_grads = node.op.vjp(&inputs, &node.value, &g)?;
            for (&j, gj) in node.inputs.iter().zip(input_grads) {
                if !self.nodes[j].requires_grad {
                    continue;
                }
                match &mut grads[j] {
                    Some(acc) => {
                        for (a, v) in acc.data_mut().iter_mut().zip(gj.data()) {
                            *a += v;
                        }
                    }
                    slot @ None => *slot = Some(gj),
                }
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.op == Op::Leaf && node.requires_grad {
                by_leaf
                    .entry(i)
                    .or_insert_with(|| Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients {
            graph: self.id,
            by_leaf,
        })
    }

    /// Re-evaluates every recorded operation from the stored leaves.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = if node.op == Op::Leaf {
                node.value.clone()
            } else {
                let inputs: Vec<&Tensor> = node.inputs.iter().map(|&j| &values[j]).collect();
                node.op.eval(&inputs)?
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Recorded output of every node, in tape order.
    pub fn recorded_values(&self) -> impl Iterator<Item = &Tensor> {
        self.nodes.iter().map(|n| &n.value)
    }
}
