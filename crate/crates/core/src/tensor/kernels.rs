//! Pure tensor kernels. Each function maps input tensors to a fresh output
//! and never records anything; [`super::Graph`] wraps them with gradient rules.

use super::Tensor;
use crate::error::{ensure, Error, Result};
use crate::par;

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for (i, o) in out.iter_mut().enumerate() {
        let da = dim_from_right(a, rank - 1 - i);
        let db = dim_from_right(b, rank - 1 - i);
        *o = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::shape(op, a, b)),
        };
    }
    Ok(out)
}

fn dim_from_right(shape: &[usize], from_right: usize) -> usize {
    if from_right < shape.len() {
        shape[shape.len() - 1 - from_right]
    } else {
        1
    }
}

/// Element strides of `shape` aligned to `out` (zero along broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let offset = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        if shape[i] != 1 {
            strides[offset + i] = acc;
        }
        acc *= shape[i];
    }
    strides
}

/// Input offsets, in output order, for reading `shape` broadcast to `out`.
fn broadcast_offsets(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let numel: usize = out.iter().product();
    if shape == out {
        return (0..numel).collect();
    }
    let strides = broadcast_strides(shape, out);
    let mut offsets = Vec::with_capacity(numel);
    let mut idx = vec![0usize; out.len()];
    let mut off = 0usize;
    for _ in 0..numel {
        offsets.push(off);
        for ax in (0..out.len()).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < out[ax] {
                break;
            }
            off -= strides[ax] * out[ax];
            idx[ax] = 0;
        }
    }
    offsets
}

/// `true` when `b` equals a trailing block of `a` (e.g. a bias row).
fn is_suffix(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

/// Elementwise binary operation with broadcasting.
pub fn broadcast_binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor::from_parts(a.shape.clone(), data));
    }
    if is_suffix(&a.shape, &b.shape) {
        let nb = b.numel();
        let data = a
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, b.data[i % nb]))
            .collect();
        return Ok(Tensor::from_parts(a.shape.clone(), data));
    }
    let out = broadcast_shape(op, &a.shape, &b.shape)?;
    let oa = broadcast_offsets(&a.shape, &out);
    let ob = broadcast_offsets(&b.shape, &out);
    let data = oa
        .iter()
        .zip(&ob)
        .map(|(&i, &j)| f(a.data[i], b.data[j]))
        .collect();
    Ok(Tensor::from_parts(out, data))
}

/// Sums a broadcast gradient back down to `shape`, in output order.
pub fn sum_to_shape(t: &Tensor, shape: &[usize]) -> Tensor {
    if t.shape == shape {
        return t.clone();
    }
    let numel: usize = shape.iter().product();
    let mut data = vec![0.0; numel];
    if is_suffix(&t.shape, shape) {
        for (i, &v) in t.data.iter().enumerate() {
            data[i % numel] += v;
        }
    } else {
        for (&o, &v) in broadcast_offsets(shape, &t.shape).iter().zip(&t.data) {
            data[o] += v;
        }
    }
    Tensor::from_parts(shape.to_vec(), data)
}

/// Broadcasts `t` up to `shape`.
pub fn expand_to(t: &Tensor, shape: &[usize]) -> Tensor {
    if t.shape == shape {
        return t.clone();
    }
    let data = broadcast_offsets(&t.shape, shape)
        .into_iter()
        .map(|o| t.data[o])
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

pub fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(a.shape.clone(), a.data.iter().map(|&x| f(x)).collect())
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    broadcast_binary("add", a, b, |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    broadcast_binary("sub", a, b, |x, y| x - y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    broadcast_binary("mul", a, b, |x, y| x * y)
}

/// Plain `[m, k] x [k, n]` product on flat buffers. Each output entry sums
/// over `k` in increasing order.
pub fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    par::for_each_row(&mut out, n, k * n, |i, row| {
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    });
    out
}

/// Transpose of a flat `[rows, cols]` buffer.
pub fn transpose_flat(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Layout of a (possibly batched, possibly broadcast) matrix product.
#[derive(Debug, Clone)]
pub(crate) struct MatmulPlan {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub out_shape: Vec<usize>,
    /// `(a_offset, b_offset)` per output batch entry, in matrices.
    pub pairs: Vec<(usize, usize)>,
    /// Right factor is one matrix shared by every batch entry and the left
    /// batch is not broadcast, so the product is a single flattened GEMM.
    pub shared_rhs: bool,
}

pub(crate) fn matmul_plan(a: &[usize], b: &[usize]) -> Result<MatmulPlan> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::shape("matmul", a, b));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(Error::shape("matmul", a, b));
    }
    let a_batch = &a[..a.len() - 2];
    let b_batch = &b[..b.len() - 2];
    let batch = broadcast_shape("matmul", a_batch, b_batch).map_err(|_| Error::shape("matmul", a, b))?;
    let ia = broadcast_offsets(a_batch, &batch);
    let ib = broadcast_offsets(b_batch, &batch);
    let mut out_shape = batch.clone();
    out_shape.extend([m, n]);
    Ok(MatmulPlan {
        m,
        k,
        n,
        out_shape,
        pairs: ia.into_iter().zip(ib).collect(),
        shared_rhs: b_batch.iter().product::<usize>() == 1 && a_batch.len() >= b_batch.len(),
    })
}

/// Matrix product over the last two axes with broadcast batch axes.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let plan = matmul_plan(&a.shape, &b.shape)?;
    let (m, k, n) = (plan.m, plan.k, plan.n);
    if plan.shared_rhs {
        let data = gemm(&a.data, &b.data, plan.pairs.len() * m, k, n);
        return Ok(Tensor::from_parts(plan.out_shape, data));
    }
    let mut data = Vec::with_capacity(plan.pairs.len() * m * n);
    for &(ia, ib) in &plan.pairs {
        let am = &a.data[ia * m * k..(ia + 1) * m * k];
        let bm = &b.data[ib * k * n..(ib + 1) * k * n];
        data.extend(gemm(am, bm, m, k, n));
    }
    Ok(Tensor::from_parts(plan.out_shape, data))
}

/// Swaps the last two axes.
pub fn transpose_last2(a: &Tensor) -> Result<Tensor> {
    let r = a.rank();
    ensure!(r >= 2, "transpose needs rank >= 2, got {:?}", a.shape);
    let (rows, cols) = (a.shape[r - 2], a.shape[r - 1]);
    let mut shape = a.shape.clone();
    shape.swap(r - 2, r - 1);
    let mut data = Vec::with_capacity(a.numel());
    for mat in a.data.chunks(rows * cols) {
        data.extend(transpose_flat(mat, rows, cols));
    }
    Ok(Tensor::from_parts(shape, data))
}

/// Reorders axes: output axis `i` is input axis `axes[i]`.
pub fn permute(a: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let r = a.rank();
    let mut seen = vec![false; r];
    ensure!(axes.len() == r, "permute: {axes:?} is not a permutation of rank {r}");
    for &ax in axes {
        ensure!(ax < r && !seen[ax], "permute: {axes:?} is not a permutation of rank {r}");
        seen[ax] = true;
    }
    let out_shape: Vec<usize> = axes.iter().map(|&ax| a.shape[ax]).collect();
    let mut in_strides = vec![1usize; r];
    for i in (0..r.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * a.shape[i + 1];
    }
    let strides: Vec<usize> = axes.iter().map(|&ax| in_strides[ax]).collect();
    let mut data = Vec::with_capacity(a.numel());
    let mut idx = vec![0usize; r];
    let mut off = 0usize;
    for _ in 0..a.numel() {
        data.push(a.data[off]);
        for ax in (0..r).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Ok(Tensor::from_parts(out_shape, data))
}

pub fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &ax) in axes.iter().enumerate() {
        inv[ax] = i;
    }
    inv
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Softmax over the last axis, max-subtracted.
pub fn softmax_rows(a: &Tensor) -> Tensor {
    let d = a.last_dim();
    let mut data = vec![0.0; a.numel()];
    par::for_each_row(&mut data, d, 4 * d, |i, out| softmax_row(a.row(i), out));
    Tensor::from_parts(a.shape.clone(), data)
}

/// Log-softmax over the last axis via log-sum-exp.
pub fn log_softmax_rows(a: &Tensor) -> Tensor {
    let d = a.last_dim();
    let mut data = vec![0.0; a.numel()];
    par::for_each_row(&mut data, d, 4 * d, |i, out| {
        let row = a.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
        for (o, &x) in out.iter_mut().zip(row) {
            *o = x - lse;
        }
    });
    Tensor::from_parts(a.shape.clone(), data)
}

/// Per-row mean and `1 / sqrt(var + eps)` (biased variance).
pub(crate) fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + eps).sqrt())
}

/// Layer normalization over the last axis followed by the affine map.
pub fn layer_norm(a: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let d = a.last_dim();
    if gamma.shape != [d] || beta.shape != [d] {
        return Err(Error::shape("layer_norm", &a.shape, gamma.shape()));
    }
    ensure!(eps >= 0.0, "layer_norm eps must be nonnegative, got {eps}");
    let mut data = vec![0.0; a.numel()];
    par::for_each_row(&mut data, d, 6 * d, |i, out| {
        let row = a.row(i);
        let (mean, rstd) = row_moments(row, eps);
        for j in 0..d {
            out[j] = (row[j] - mean) * rstd * gamma.data[j] + beta.data[j];
        }
    });
    Ok(Tensor::from_parts(a.shape.clone(), data))
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Exact GELU, `x * Phi(x)`.
pub fn gelu_scalar(x: f64) -> f64 {
    x * normal_cdf(x)
}

pub fn gelu_derivative(x: f64) -> f64 {
    normal_cdf(x) + x * normal_pdf(x)
}

pub fn gelu(a: &Tensor) -> Tensor {
    map(a, gelu_scalar)
}

/// Mean over one axis (the axis is removed).
pub fn mean_axis(a: &Tensor, axis: usize) -> Result<Tensor> {
    ensure!(axis < a.rank(), "mean_axis: axis {axis} out of range for {:?}", a.shape);
    let outer: usize = a.shape[..axis].iter().product();
    let len = a.shape[axis];
    let inner: usize = a.shape[axis + 1..].iter().product();
    let mut data = vec![0.0; outer * inner];
    for o in 0..outer {
        let dst = &mut data[o * inner..(o + 1) * inner];
        for l in 0..len {
            let src = &a.data[(o * len + l) * inner..(o * len + l + 1) * inner];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
        for d in dst.iter_mut() {
            *d /= len as f64;
        }
    }
    let mut shape = a.shape.clone();
    shape.remove(axis);
    Ok(Tensor::from_parts(shape, data))
}

pub fn sum_all(a: &Tensor) -> f64 {
    a.data.iter().sum()
}

/// Concatenates along `axis`; all other axes must agree.
pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
    let rank = first.rank();
    ensure!(axis < rank, "concat: axis {axis} out of range for {:?}", first.shape);
    for p in parts {
        let same = p.rank() == rank
            && (0..rank).all(|i| i == axis || p.shape[i] == first.shape[i]);
        if !same {
            return Err(Error::shape("concat", &first.shape, &p.shape));
        }
    }
    let outer: usize = first.shape[..axis].iter().product();
    let inner: usize = first.shape[axis + 1..].iter().product();
    let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let block = p.shape[axis] * inner;
            data.extend_from_slice(&p.data[o * block..(o + 1) * block]);
        }
    }
    let mut shape = first.shape.clone();
    shape[axis] = total;
    Ok(Tensor::from_parts(shape, data))
}

/// `D[i, j] = ||a_i - b_j||^2` between the rows of `[n, d]` and `[m, d]`.
pub fn sq_dist(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[1] {
        return Err(Error::shape("sq_dist", &a.shape, &b.shape));
    }
    let (n, m, d) = (a.shape[0], b.shape[0], a.shape[1]);
    let mut data = vec![0.0; n * m];
    par::for_each_row(&mut data, m, m * d, |i, out| {
        let ai = a.row(i);
        for (j, o) in out.iter_mut().enumerate() {
            *o = ai.iter().zip(b.row(j)).map(|(x, y)| (x - y) * (x - y)).sum();
        }
    });
    Ok(Tensor::from_parts(vec![n, m], data))
}

/// Picks `a[i, index[i]]` from each row of a `[b, k]` matrix.
pub fn gather_rows(a: &Tensor, index: &[usize]) -> Result<Tensor> {
    ensure!(
        a.rank() == 2 && a.shape[0] == index.len(),
        "gather_rows: {:?} rows vs {} indices",
        a.shape,
        index.len()
    );
    let k = a.shape[1];
    let data = index
        .iter()
        .enumerate()
        .map(|(i, &j)| {
            ensure!(j < k, "gather_rows: index {j} out of range for width {k}");
            Ok(a.data[i * k + j])
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::from_parts(vec![index.len()], data))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    /// Straight triple loop, no blocking or row partitioning.
    fn matmul_oracle(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        out
    }

    #[test]
    fn matmul_examples() {
        let id = t(&[2, 2], &[1., 0., 0., 1.]);
        let b = t(&[2, 2], &[3., 4., 5., 6.]);
        assert_eq!(matmul(&id, &b).unwrap().data(), b.data());

        let zero = matmul(&t(&[1, 2], &[1., 2.]), &t(&[2, 1], &[0., 0.])).unwrap();
        assert_eq!(zero.shape(), &[1, 1]);
        assert_eq!(zero.data(), &[0.]);

        let a = [1., 2., 3., 4.];
        let b = [5., 6., 7., 8.];
        let expected = matmul_oracle(&a, &b, 2, 2, 2);
        assert_eq!(expected, vec![19., 22., 43., 50.]);
        assert_eq!(matmul(&t(&[2, 2], &a), &t(&[2, 2], &b)).unwrap().data(), &expected[..]);
    }

    #[test]
    fn matmul_broadcasts_batches() {
        let a = t(&[2, 1, 2], &[1., 2., 3., 4.]);
        let w = t(&[2, 3], &[1., 0., 2., 0., 1., -1.]);
        let out = matmul(&a, &w).unwrap();
        assert_eq!(out.shape(), &[2, 1, 3]);
        assert_eq!(out.data(), &[1., 2., 0., 3., 4., 2.]);

        // size-1 batch on the left broadcasts against a batched right factor
        let l = t(&[1, 1, 2], &[1., 1.]);
        let r = t(&[2, 2, 1], &[1., 2., 3., 4.]);
        assert_eq!(matmul(&l, &r).unwrap().data(), &[3., 7.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let u = softmax_rows(&t(&[3], &[0., 0., 0.]));
        for v in u.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(softmax_rows(&t(&[1], &[123.4])).data(), &[1.0]);
        let s = softmax_rows(&t(&[2], &[0., 3f64.ln()]));
        assert!((s.data()[0] - 0.25).abs() < 1e-15);
        assert!((s.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_examples() {
        let ones = Tensor::ones(&[3]);
        let zeros = Tensor::zeros(&[3]);
        let y = layer_norm(&t(&[3], &[5., 5., 5.]), &ones, &zeros, 1e-5).unwrap();
        assert_eq!(y.data(), &[0., 0., 0.]);

        let y = layer_norm(&t(&[2], &[-1., 1.]), &Tensor::ones(&[2]), &Tensor::zeros(&[2]), 1e-12).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-10 && (y.data()[1] - 1.0).abs() < 1e-10);

        let g = t(&[2], &[2., 2.]);
        let b = t(&[2], &[1., 1.]);
        let y = layer_norm(&t(&[2], &[0., 2.]), &g, &b, 0.0).unwrap();
        assert_eq!(y.data(), &[-1., 3.]);
    }

    #[test]
    fn gelu_examples() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(20.0) - 20.0).abs() < 1e-9);
        // Phi(1) = 0.5 * (1 + erf(1/sqrt 2)), erf(0.70710678...) = 0.68268949213708...
        assert!((gelu_scalar(1.0) - 0.841_344_746_068_542_9).abs() < 1e-12);
    }

    #[test]
    fn permute_round_trip_and_values() {
        let a = t(&[2, 3], &[0., 1., 2., 3., 4., 5.]);
        let p = permute(&a, &[1, 0]).unwrap();
        assert_eq!(p.shape(), &[3, 2]);
        assert_eq!(p.data(), &[0., 3., 1., 4., 2., 5.]);
        assert_eq!(p.data(), transpose_last2(&a).unwrap().data());
        let b = Tensor::new(vec![2, 3, 4], (0..24).map(f64::from).collect()).unwrap();
        let axes = [2, 0, 1];
        let back = permute(&permute(&b, &axes).unwrap(), &inverse_permutation(&axes)).unwrap();
        assert_eq!(back, b);
    }

    #[test]
    fn broadcast_and_reduce() {
        let a = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let col = t(&[2, 1], &[10., 20.]);
        assert_eq!(add(&a, &col).unwrap().data(), &[11., 12., 13., 24., 25., 26.]);
        let g = Tensor::ones(&[2, 3]);
        assert_eq!(sum_to_shape(&g, &[2, 1]).data(), &[3., 3.]);
        assert_eq!(sum_to_shape(&g, &[3]).data(), &[2., 2., 2.]);
        assert!(add(&a, &t(&[2], &[0., 0.])).is_err());
    }

    #[test]
    fn mean_concat_dist() {
        let a = t(&[1, 2, 2], &[1., 2., 3., 6.]);
        assert_eq!(mean_axis(&a, 1).unwrap().data(), &[2., 4.]);
        let c = concat(&[&t(&[1, 2], &[1., 2.]), &t(&[1, 1], &[3.])], 1).unwrap();
        assert_eq!(c.data(), &[1., 2., 3.]);
        let z = t(&[2, 2], &[0., 0., 3., 4.]);
        assert_eq!(sq_dist(&z, &z).unwrap().data(), &[0., 25., 25., 0.]);
        let d = sq_dist(&z, &t(&[1, 2], &[0., 1.])).unwrap();
        assert_eq!(d.data(), &[1., 18.]);
    }
}
