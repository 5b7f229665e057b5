//! Losses: source cross-entropy, multi-kernel MMD between the augmented
//! views, the neighbour pseudo-label loss, their weighted sum, and the
//! temperature-scaled distillation loss.
//!
//! Functions suffixed `_var` record onto a [`Graph`] so they can be
//! differentiated; the unsuffixed forms evaluate plain tensors.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::tensor::{argmax, kernels, Graph, Tensor, Var};

/// Floor applied inside every `-log` term.
pub const LOG_FLOOR: f64 = 1e-12;

/// Components of one evaluation of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub cls_s: f64,
    pub cls_t: f64,
    pub transfer: f64,
    pub total: f64,
    pub epsilon: f64,
    pub beta: f64,
}

/// How the base RBF bandwidth is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    /// Median squared distance over all distinct pairs of the pooled sample.
    Median,
    /// A fixed squared bandwidth.
    Fixed(f64),
}

/// Family of RBF kernels `exp(-||x - y||^2 / (c * sigma^2))`, summed over the
/// multipliers `c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub multipliers: Vec<f64>,
    pub bandwidth: Bandwidth,
}

impl Default for KernelSpec {
    fn default() -> Self {
        Self {
            multipliers: vec![0.25, 0.5, 1.0, 2.0, 4.0],
            bandwidth: Bandwidth::Median,
        }
    }
}

impl KernelSpec {
    pub fn single(sigma2: f64) -> Self {
        Self {
            multipliers: vec![1.0],
            bandwidth: Bandwidth::Fixed(sigma2),
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.multipliers.is_empty(), "kernel family is empty");
        ensure!(
            self.multipliers.iter().all(|&m| m > 0.0 && m.is_finite()),
            "kernel multipliers must be positive: {:?}",
            self.multipliers
        );
        if let Bandwidth::Fixed(s) = self.bandwidth {
            ensure!(s > 0.0 && s.is_finite(), "fixed bandwidth must be positive, got {s}");
        }
        Ok(())
    }
}

fn check_labels(labels: &[usize], batch: usize, classes: usize) -> Result<()> {
    ensure!(
        labels.len() == batch,
        "{} labels for a batch of {batch}",
        labels.len()
    );
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    Ok(())
}

fn check_matrix(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    ensure!(t.rank() == 2, "{what} must be [b, K], got {:?}", t.shape());
    Ok((t.shape()[0], t.shape()[1]))
}

/// Mean cross-entropy `-log softmax(logits)[label]`.
pub fn cross_entropy_var(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let (b, k) = check_matrix(g.value(logits), "logits")?;
    check_labels(labels, b, k)?;
    let logp = g.log_softmax_rows(logits)?;
    let picked = g.gather_rows(logp, labels)?;
    let picked = g.clamp_min(picked, LOG_FLOOR.ln())?;
    let total = g.sum_all(picked)?;
    g.scale(total, -1.0 / b as f64)
}

pub fn cross_entropy_loss(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let loss = cross_entropy_var(&mut g, l, labels)?;
    g.value(loss).item()
}

/// Base squared bandwidth: median over all distinct pairs of `X ∪ Y`,
/// 1.0 when that median is zero.
pub fn median_bandwidth(x: &Tensor, y: &Tensor) -> Result<f64> {
    let dxx = kernels::sq_dist(x, x)?;
    let dyy = kernels::sq_dist(y, y)?;
    let dxy = kernels::sq_dist(x, y)?;
    let (n, m) = (x.shape()[0], y.shape()[0]);
    let mut all = Vec::with_capacity((n + m) * (n + m - 1) / 2);
    for i in 0..n {
        all.extend_from_slice(&dxx.row(i)[i + 1..]);
    }
    for i in 0..m {
        all.extend_from_slice(&dyy.row(i)[i + 1..]);
    }
    all.extend_from_slice(dxy.data());
    all.sort_by(f64::total_cmp);
    let mid = all.len() / 2;
    let median = if all.len() % 2 == 1 {
        all[mid]
    } else {
        0.5 * (all[mid - 1] + all[mid])
    };
    Ok(if median > 0.0 { median } else { 1.0 })
}

fn kernel_sum(g: &mut Graph, a: Var, b: Var, sigma2: f64, k: &KernelSpec) -> Result<Var> {
    let d = g.sq_dist(a, b)?;
    let mut acc: Option<Var> = None;
    for &c in &k.multipliers {
        let scaled = g.scale(d, -1.0 / (c * sigma2))?;
        let e = g.exp(scaled)?;
        acc = Some(match acc {
            None => e,
            Some(prev) => g.add(prev, e)?,
        });
    }
    g.sum_all(acc.expect("nonempty kernel family"))
}

/// Biased (V-statistic) squared MMD between the rows of `x` and `y`. The
/// bandwidth is treated as a constant for differentiation.
///
/// The cross term is accumulated as `sum K(X, Y) + sum K(Y, X)` so that
/// swapping the arguments gives a bit-identical result.
pub fn mmd2_var(g: &mut Graph, x: Var, y: Var, k: &KernelSpec) -> Result<Var> {
    k.validate()?;
    let (xs, ys) = (g.value(x).shape().to_vec(), g.value(y).shape().to_vec());
    if xs.len() != 2 || ys.len() != 2 || xs[1] != ys[1] {
        return Err(Error::shape("mmd2", &xs, &ys));
    }
    let (n, m) = (xs[0], ys[0]);
    ensure!(n >= 2 && m >= 2, "mmd2 needs at least two rows per sample, got {n} and {m}");
    let sigma2 = match k.bandwidth {
        Bandwidth::Fixed(s) => s,
        Bandwidth::Median => median_bandwidth(g.value(x), g.value(y))?,
    };
    let sxx = kernel_sum(g, x, x, sigma2, k)?;
    let syy = kernel_sum(g, y, y, sigma2, k)?;
    let sxy = kernel_sum(g, x, y, sigma2, k)?;
    let syx = kernel_sum(g, y, x, sigma2, k)?;
    let (n, m) = (n as f64, m as f64);
    let a = g.scale(sxx, 1.0 / (n * n))?;
    let b = g.scale(syy, 1.0 / (m * m))?;
    let cross = g.add(sxy, syx)?;
    let cross = g.scale(cross, 1.0 / (n * m))?;
    let within = g.add(a, b)?;
    g.sub(within, cross)
}

pub fn mmd2(x: &Tensor, y: &Tensor, k: &KernelSpec) -> Result<f64> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let yv = g.constant(y.clone());
    let out = mmd2_var(&mut g, xv, yv, k)?;
    g.value(out).item()
}

/// Pseudo labels `argmax q_hat` (ties to the smallest class) and their
/// confidence weights `q_hat[i, y_i]`.
pub fn pseudo_labels(q_hat: &Tensor) -> Result<(Vec<usize>, Vec<f64>)> {
    check_matrix(q_hat, "q_hat")?;
    for (i, row) in q_hat.rows().enumerate() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!(
                "q_hat row {i} sums to {s}, expected 1"
            )));
        }
    }
    let labels: Vec<usize> = q_hat.rows().map(argmax).collect();
    let weights = labels
        .iter()
        .zip(q_hat.rows())
        .map(|(&y, row)| row[y])
        .collect();
    Ok((labels, weights))
}

/// `-mean_i q_hat[i, y_i] * log p[i, y_i]` with `y_i = argmax q_hat[i]`;
/// `probs` are post-softmax predictions.
pub fn target_pseudo_loss_var(g: &mut Graph, probs: Var, q_hat: &Tensor) -> Result<Var> {
    let (b, k) = check_matrix(g.value(probs), "probs")?;
    if q_hat.shape() != [b, k] {
        return Err(Error::shape("target_pseudo_loss", g.value(probs).shape(), q_hat.shape()));
    }
    let (labels, weights) = pseudo_labels(q_hat)?;
    let logp = g.log_clamped(probs, LOG_FLOOR)?;
    let picked = g.gather_rows(logp, &labels)?;
    let w = g.constant(Tensor::vector(weights));
    let weighted = g.mul(picked, w)?;
    let total = g.sum_all(weighted)?;
    g.scale(total, -1.0 / b as f64)
}

pub fn target_pseudo_loss(probs: &Tensor, q_hat: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(probs.clone());
    let out = target_pseudo_loss_var(&mut g, p, q_hat)?;
    g.value(out).item()
}

fn check_weights(epsilon: f64, beta: f64) -> Result<()> {
    ensure!((0.0..=1.0).contains(&epsilon), "epsilon must lie in [0, 1], got {epsilon}");
    ensure!(beta >= 0.0, "beta must be nonnegative, got {beta}");
    Ok(())
}

/// `cls_s + epsilon * cls_t + beta * transfer` on the graph.
pub fn bcat_total_var(
    g: &mut Graph,
    cls_s: Var,
    cls_t: Var,
    transfer: Var,
    epsilon: f64,
    beta: f64,
) -> Result<Var> {
    check_weights(epsilon, beta)?;
    let t = g.scale(cls_t, epsilon)?;
    let cls = g.add(cls_s, t)?;
    let tr = g.scale(transfer, beta)?;
    g.add(cls, tr)
}

pub fn bcat_total_loss(cls_s: f64, cls_t: f64, transfer: f64, epsilon: f64, beta: f64) -> Result<LossReport> {
    check_weights(epsilon, beta)?;
    Ok(LossReport {
        cls_s,
        cls_t,
        transfer,
        total: cls_s + epsilon * cls_t + beta * transfer,
        epsilon,
        beta,
    })
}

/// Row softmax of `logits / temperature`.
pub fn softmax_t(logits: &Tensor, temperature: f64) -> Result<Tensor> {
    ensure!(temperature > 0.0, "temperature must be positive, got {temperature}");
    Ok(kernels::softmax_rows(&kernels::map(logits, |z| z / temperature)))
}

/// Distillation loss
/// `alpha T^2 mean_b(-sum_k p_k log q_k) + epsilon (1 - alpha) CE(student, labels)`
/// with `p = softmax_T(teacher)` and `q = softmax_T(student)`.
pub fn kd_loss_var(
    g: &mut Graph,
    teacher_logits: &Tensor,
    student_logits: Var,
    pseudo: &[usize],
    alpha: f64,
    temperature: f64,
    epsilon: f64,
) -> Result<Var> {
    ensure!((0.0..=1.0).contains(&alpha), "alpha must lie in [0, 1], got {alpha}");
    ensure!((0.0..=1.0).contains(&epsilon), "epsilon must lie in [0, 1], got {epsilon}");
    let (b, _) = check_matrix(g.value(student_logits), "student logits")?;
    if teacher_logits.shape() != g.value(student_logits).shape() {
        return Err(Error::shape("kd_loss", teacher_logits.shape(), g.value(student_logits).shape()));
    }
    let p = softmax_t(teacher_logits, temperature)?;
    let scaled = g.scale(student_logits, 1.0 / temperature)?;
    let logq = g.log_softmax_rows(scaled)?;
    let logq = g.clamp_min(logq, LOG_FLOOR.ln())?;
    let pv = g.constant(p);
    let cross = g.mul(logq, pv)?;
    let cross = g.sum_all(cross)?;
    let soft = g.scale(cross, -alpha * temperature * temperature / b as f64)?;
    let ce = cross_entropy_var(g, student_logits, pseudo)?;
    let hard = g.scale(ce, epsilon * (1.0 - alpha))?;
    g.add(soft, hard)
}

pub fn kd_loss(
    teacher_logits: &Tensor,
    student_logits: &Tensor,
    pseudo: &[usize],
    alpha: f64,
    temperature: f64,
    epsilon: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let s = g.constant(student_logits.clone());
    let out = kd_loss_var(&mut g, teacher_logits, s, pseudo, alpha, temperature, epsilon)?;
    g.value(out).item()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_grad;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::matrix(rows)
    }

    #[test]
    fn cross_entropy_examples() {
        let uniform = m(&[&[0.3, 0.3, 0.3, 0.3]]);
        assert!((cross_entropy_loss(&uniform, &[2]).unwrap() - 4f64.ln()).abs() < 1e-12);
        let sure = m(&[&[60.0, 0.0]]);
        assert!(cross_entropy_loss(&sure, &[0]).unwrap() < 1e-20);
        let l = cross_entropy_loss(&m(&[&[0.0, 3f64.ln()]]), &[1]).unwrap();
        assert!((l + 0.75f64.ln()).abs() < 1e-12);
        assert!((l - 0.287_682_072_451_780_9).abs() < 1e-12);
        assert!(cross_entropy_loss(&uniform, &[4]).is_err());
    }

    #[test]
    fn mmd_two_point_example() {
        let x = m(&[&[0.0], &[0.0]]);
        let y = m(&[&[2.0], &[2.0]]);
        let v = mmd2(&x, &y, &KernelSpec::single(1.0)).unwrap();
        assert!((v - (2.0 - 2.0 * (-4.0f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn mmd_identity_and_exact_symmetry() {
        let x = m(&[&[0.1, 2.0], &[-1.0, 0.5], &[0.7, 0.7]]);
        let y = m(&[&[1.1, -2.0], &[0.0, 0.0]]);
        let k = KernelSpec::default();
        assert_eq!(mmd2(&x, &x, &k).unwrap(), 0.0);
        let a = mmd2(&x, &y, &k).unwrap();
        let b = mmd2(&y, &x, &k).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert!(a > 0.0);
        assert!(mmd2(&m(&[&[1.0]]), &y.slice_outer(0, 2).unwrap().reshape(&[4, 1]).unwrap(), &k).is_err());
    }

    #[test]
    fn median_falls_back_to_one() {
        let x = m(&[&[1.0], &[1.0]]);
        assert_eq!(median_bandwidth(&x, &x).unwrap(), 1.0);
        // pooled {0, 1, 3}: pairs 1, 9, 4 -> median 4
        let a = m(&[&[0.0], &[1.0]]);
        let b = m(&[&[3.0], &[3.0]]);
        // pooled {0,1,3,3}: 1, 0, 9, 9, 4, 4 -> sorted 0 1 4 4 9 9 -> 4
        assert_eq!(median_bandwidth(&a, &b).unwrap(), 4.0);
    }

    #[test]
    fn pseudo_loss_examples() {
        let sure = m(&[&[0.0, 1.0, 0.0]]);
        assert_eq!(target_pseudo_loss(&sure, &sure).unwrap(), 0.0);

        let u = m(&[&[0.25; 4]]);
        let v = target_pseudo_loss(&u, &u).unwrap();
        assert!((v - (-0.25 * 0.25f64.ln())).abs() < 1e-15);
        assert!((v - 0.346_573_590_279_972_6).abs() < 1e-12);

        let p = m(&[&[0.5, 0.5], &[0.9, 0.1]]);
        let q = m(&[&[0.2, 0.8], &[0.6, 0.4]]);
        let batch = target_pseudo_loss(&p, &q).unwrap();
        let first = target_pseudo_loss(&p.slice_outer(0, 1).unwrap(), &q.slice_outer(0, 1).unwrap()).unwrap();
        let second = target_pseudo_loss(&p.slice_outer(1, 2).unwrap(), &q.slice_outer(1, 2).unwrap()).unwrap();
        assert!((batch - 0.5 * (first + second)).abs() < 1e-15);

        let bad = m(&[&[0.5, 0.6]]);
        assert!(target_pseudo_loss(&p.slice_outer(0, 1).unwrap(), &bad).is_err());
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(bcat_total_loss(1.3, 2.0, 0.7, 0.0, 0.0).unwrap().total, 1.3);
        let r = bcat_total_loss(1.0, 2.0, 0.5, 1.0, 3.0).unwrap();
        assert_eq!(r.total, 1.0 + 2.0 + 3.0 * 0.5);
        assert_eq!(bcat_total_loss(1.0, 2.0, 0.5, 0.5, 3.0).unwrap().total, 3.5);
        assert!(bcat_total_loss(1.0, 1.0, 1.0, 1.5, 0.0).is_err());
        assert!(bcat_total_loss(1.0, 1.0, 1.0, 0.5, -1.0).is_err());
    }

    #[test]
    fn softmax_t_examples() {
        let z = m(&[&[0.3, -1.0, 2.0]]);
        assert_eq!(softmax_t(&z, 1.0).unwrap(), kernels::softmax_rows(&z));
        let p = softmax_t(&m(&[&[0.0, 2.0]]), 2.0).unwrap();
        let e = std::f64::consts::E;
        assert!((p.data()[0] - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((p.data()[0] - 0.2689).abs() < 1e-4 && (p.data()[1] - 0.7311).abs() < 1e-4);
        let hot = softmax_t(&m(&[&[0.0, 5.0]]), 1e6).unwrap();
        assert!((hot.data()[0] - 0.5).abs() < 1e-5);
        assert!(softmax_t(&z, 0.0).is_err());
    }

    #[test]
    fn kd_matched_logits() {
        let z = m(&[&[0.2, -0.4, 1.1], &[0.0, 0.9, -0.3]]);
        let t = 2.0;
        let loss = kd_loss(&z, &z, &[0, 1], 1.0, t, 0.7).unwrap();
        let p = softmax_t(&z, t).unwrap();
        let entropy: f64 = p.data().iter().map(|v| -v * v.ln()).sum::<f64>() / 2.0;
        assert!((loss - t * t * entropy).abs() < 1e-12);

        let grad = finite_diff_grad(|s| kd_loss(&z, s, &[0, 1], 1.0, t, 0.7), &z, 1e-5).unwrap();
        assert!(grad.data().iter().all(|g| g.abs() < 1e-6), "{grad:?}");

        let mut g = Graph::new();
        let s = g.param(z.clone());
        let l = kd_loss_var(&mut g, &z, s, &[0, 1], 1.0, t, 0.7).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.get(s).unwrap().data().iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn kd_alpha_zero_is_scaled_cross_entropy() {
        let teacher = m(&[&[1.0, 0.0], &[0.0, 3.0]]);
        let student = m(&[&[0.3, 0.1], &[-0.2, 0.4]]);
        let ce = cross_entropy_loss(&student, &[1, 0]).unwrap();
        let kd = kd_loss(&teacher, &student, &[1, 0], 0.0, 2.0, 0.4).unwrap();
        assert!((kd - 0.4 * ce).abs() < 1e-15);
        assert!(kd_loss(&teacher, &student, &[1, 0], 1.2, 2.0, 0.4).is_err());
        assert!(kd_loss(&teacher, &student, &[1, 0], 0.5, -1.0, 0.4).is_err());
    }
}
