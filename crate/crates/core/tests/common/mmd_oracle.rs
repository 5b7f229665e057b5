//! Explicit double-sum MMD, independent of the library's kernel code.

use bcat_core::Tensor;

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kernel(a: &[f64], b: &[f64], sigma2: f64, mults: &[f64]) -> f64 {
    mults.iter().map(|c| (-sq(a, b) / (c * sigma2)).exp()).sum()
}

/// Median of pairwise squared distances over the pooled sample, 1 if zero.
pub fn median(x: &Tensor, y: &Tensor) -> f64 {
    let all: Vec<&[f64]> = x.rows().chain(y.rows()).collect();
    let mut d = Vec::new();
    for i in 0..all.len() {
        for j in i + 1..all.len() {
            d.push(sq(all[i], all[j]));
        }
    }
    d.sort_by(f64::total_cmp);
    let m = if d.len() % 2 == 1 { d[d.len() / 2] } else { (d[d.len() / 2 - 1] + d[d.len() / 2]) / 2.0 };
    if m > 0.0 { m } else { 1.0 }
}

/// Biased squared MMD with the median bandwidth scaled by each multiplier.
pub fn mmd2(x: &Tensor, y: &Tensor, mults: &[f64]) -> f64 {
    let s2 = median(x, y);
    let mean = |a: &Tensor, b: &Tensor| {
        let mut s = 0.0;
        for r in a.rows() {
            for c in b.rows() {
                s += kernel(r, c, s2, mults);
            }
        }
        s / (a.shape()[0] * b.shape()[0]) as f64
    };
    mean(x, x) + mean(y, y) - 2.0 * mean(x, y)
}
