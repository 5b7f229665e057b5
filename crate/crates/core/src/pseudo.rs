//! Memory bank of target features and predictions, and neighbour-averaged
//! pseudo labels.

use crate::error::{ensure, Error, Result};
use crate::tensor::{argmax, Tensor};

/// Per-target-sample feature and class-probability memory.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    features: Tensor,
    probs: Tensor,
    initialized: Vec<bool>,
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
}

impl MemoryBank {
    /// Uniform probabilities, zero features, nothing initialized yet.
    pub fn new(n_samples: usize, feature_dim: usize, n_classes: usize) -> Result<Self> {
        ensure!(
            n_samples >= 1 && n_classes >= 1 && feature_dim >= 1,
            "memory bank needs at least one sample, class and feature"
        );
        Ok(Self {
            features: Tensor::zeros(&[n_samples, feature_dim]),
            probs: Tensor::full(&[n_samples, n_classes], 1.0 / n_classes as f64),
            initialized: vec![false; n_samples],
        })
    }

    /// Restores a bank from stored tensors; every row counts as initialized.
    pub fn from_parts(features: Tensor, probs: Tensor) -> Result<Self> {
        ensure!(
            features.rank() == 2 && probs.rank() == 2 && features.shape()[0] == probs.shape()[0],
            "bank tensors disagree: features {:?}, probs {:?}",
            features.shape(),
            probs.shape()
        );
        let n = features.shape()[0];
        Ok(Self {
            features,
            probs,
            initialized: vec![true; n],
        })
    }

    pub fn len(&self) -> usize {
        self.initialized.len()
    }

    pub fn is_empty(&self) -> bool {
        self.initialized.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.probs.shape()[1]
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn probs(&self) -> &Tensor {
        &self.probs
    }

    pub fn initialized(&self) -> &[bool] {
        &self.initialized
    }

    /// Momentum update of the rows at `indices`. Features are L2-normalized
    /// before and after mixing; probabilities are renormalized. Rows that were
    /// never written are replaced instead of mixed.
    pub fn update(&mut self, indices: &[usize], feats: &Tensor, probs: &Tensor, momentum: f64) -> Result<()> {
        ensure!((0.0..1.0).contains(&momentum), "bank momentum must lie in [0, 1), got {momentum}");
        let (d, k) = (self.features.shape()[1], self.probs.shape()[1]);
        if feats.shape() != [indices.len(), d] {
            return Err(Error::shape("update_bank", feats.shape(), &[indices.len(), d]));
        }
        if probs.shape() != [indices.len(), k] {
            return Err(Error::shape("update_bank", probs.shape(), &[indices.len(), k]));
        }
        let mut seen = vec![false; self.len()];
        for &i in indices {
            ensure!(i < self.len(), "bank index {i} out of range for {} slots", self.len());
            ensure!(!seen[i], "duplicate bank index {i} in one update");
            seen[i] = true;
        }
        for (row, &i) in indices.iter().enumerate() {
            // An uninitialized slot takes the new values outright.
            let keep = if self.initialized[i] { momentum } else { 0.0 };
            let mut f = feats.row(row).to_vec();
            normalize(&mut f);
            let dst = &mut self.features.data_mut()[i * d..(i + 1) * d];
            for (o, n) in dst.iter_mut().zip(&f) {
                *o = keep * *o + (1.0 - keep) * n;
            }
            normalize(dst);

            let dst = &mut self.probs.data_mut()[i * k..(i + 1) * k];
            for (o, n) in dst.iter_mut().zip(probs.row(row)) {
                *o = keep * *o + (1.0 - keep) * n;
            }
            let s: f64 = dst.iter().sum();
            for o in dst.iter_mut() {
                *o /= s;
            }
            self.initialized[i] = true;
        }
        Ok(())
    }

    /// Indices of the `k` most cosine-similar bank rows to `query`, skipping
    /// `exclude`. Equal similarities go to the smaller bank index.
    pub fn nearest(&self, query: &[f64], exclude: usize, k: usize) -> Vec<usize> {
        let mut q = query.to_vec();
        normalize(&mut q);
        let mut scored: Vec<(f64, usize)> = self
            .features
            .rows()
            .enumerate()
            .filter(|&(j, _)| j != exclude)
            .map(|(j, f)| (f.iter().zip(&q).map(|(a, b)| a * b).sum(), j))
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        scored.into_iter().take(k).map(|(_, j)| j).collect()
    }

    /// Neighbour-averaged class probabilities `q_hat` and their argmax labels
    /// for queries whose own bank slots are `query_indices`.
    pub fn knn_pseudo_labels(
        &self,
        query_indices: &[usize],
        query_feats: &Tensor,
        k: usize,
    ) -> Result<(Tensor, Vec<usize>)> {
        ensure!(
            k >= 1 && k < self.len(),
            "k = {k} neighbours out of range for a bank of {} (need 1 <= k <= n - 1)",
            self.len()
        );
        let d = self.features.shape()[1];
        if query_feats.shape() != [query_indices.len(), d] {
            return Err(Error::shape("knn_pseudo_labels", query_feats.shape(), &[query_indices.len(), d]));
        }
        let n_classes = self.n_classes();
        let rows: Vec<Vec<f64>> = crate::par::map_indices(query_indices.len(), |r| {
            let mut q_hat = vec![0.0; n_classes];
            for j in self.nearest(query_feats.row(r), query_indices[r], k) {
                for (o, p) in q_hat.iter_mut().zip(self.probs.row(j)) {
                    *o += p;
                }
            }
            q_hat.iter_mut().for_each(|v| *v /= k as f64);
            q_hat
        });
        let labels = rows.iter().map(|r| argmax(r)).collect();
        let q_hat = Tensor::new(vec![rows.len(), n_classes], rows.concat())?;
        Ok((q_hat, labels))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_bank_is_uniform_and_uninitialized() {
        let bank = MemoryBank::new(3, 2, 4).unwrap();
        assert!(bank.probs().data().iter().all(|&p| p == 0.25));
        assert!(bank.initialized().iter().all(|&f| !f));
        let q = Tensor::matrix(&[&[1.0, 0.0]]);
        let (q_hat, y) = bank.knn_pseudo_labels(&[0], &q, 2).unwrap();
        assert!(q_hat.data().iter().all(|&p| p == 0.25));
        assert_eq!(y, vec![0]);
    }

    #[test]
    fn zero_momentum_replaces_rows() {
        let mut bank = MemoryBank::new(2, 2, 2).unwrap();
        bank.update(&[1], &Tensor::matrix(&[&[3.0, 4.0]]), &Tensor::matrix(&[&[0.2, 0.8]]), 0.0)
            .unwrap();
        bank.update(&[1], &Tensor::matrix(&[&[0.0, 2.0]]), &Tensor::matrix(&[&[0.9, 0.1]]), 0.0)
            .unwrap();
        assert_eq!(bank.features().row(1), &[0.0, 1.0]);
        assert_eq!(bank.probs().row(1), &[0.9, 0.1]);
        assert_eq!(bank.initialized(), &[false, true]);
    }

    #[test]
    fn repeated_identical_update_is_a_fixed_point() {
        let mut bank = MemoryBank::new(2, 2, 2).unwrap();
        let f = Tensor::matrix(&[&[0.6, 0.8]]);
        let p = Tensor::matrix(&[&[0.25, 0.75]]);
        bank.update(&[0], &f, &p, 0.7).unwrap();
        let once = bank.clone();
        bank.update(&[0], &f, &p, 0.7).unwrap();
        assert!(bank.features().max_abs_diff(once.features()) < 1e-15);
        assert!(bank.probs().max_abs_diff(once.probs()) < 1e-15);
    }

    #[test]
    fn half_momentum_mixes_probabilities() {
        let mut bank = MemoryBank::new(1, 1, 2).unwrap();
        bank.update(&[0], &Tensor::matrix(&[&[1.0]]), &Tensor::matrix(&[&[1.0, 0.0]]), 0.0)
            .unwrap();
        bank.update(&[0], &Tensor::matrix(&[&[1.0]]), &Tensor::matrix(&[&[0.0, 1.0]]), 0.5)
            .unwrap();
        assert_eq!(bank.probs().row(0), &[0.5, 0.5]);
    }

    #[test]
    fn update_rejects_duplicates_and_out_of_range() {
        let mut bank = MemoryBank::new(3, 1, 2).unwrap();
        let f = Tensor::matrix(&[&[1.0], &[1.0]]);
        let p = Tensor::matrix(&[&[0.5, 0.5], &[0.5, 0.5]]);
        assert!(bank.update(&[1, 1], &f, &p, 0.5).is_err());
        assert!(bank.update(&[1, 3], &f, &p, 0.5).is_err());
        assert!(bank.update(&[0, 1], &f, &p, 1.0).is_err());
    }

    #[test]
    fn k_must_leave_room_for_self_exclusion() {
        let bank = MemoryBank::new(3, 1, 2).unwrap();
        let q = Tensor::matrix(&[&[1.0]]);
        assert!(bank.knn_pseudo_labels(&[0], &q, 0).is_err());
        assert!(bank.knn_pseudo_labels(&[0], &q, 3).is_err());
        assert!(bank.knn_pseudo_labels(&[0], &q, 2).is_ok());
    }

    #[test]
    fn single_aligned_neighbour() {
        let features = Tensor::matrix(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]);
        let probs = Tensor::matrix(&[&[0.1, 0.9], &[0.7, 0.3], &[0.5, 0.5]]);
        let bank = MemoryBank::from_parts(features, probs).unwrap();
        let q = Tensor::matrix(&[&[0.0, 2.0, 0.0]]);
        let (q_hat, y) = bank.knn_pseudo_labels(&[2], &q, 1).unwrap();
        assert_eq!(q_hat.data(), &[0.7, 0.3]);
        assert_eq!(y, vec![0]);
    }
}
