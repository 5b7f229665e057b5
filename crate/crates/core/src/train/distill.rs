use serde::{Deserialize, Serialize};

use super::infer::check_images;
use super::{accuracy, logits_dtf, probe, Optimizer, TrainConfig};
use crate::dataio::{make_batches, Dataset};
use crate::error::{ensure, Result};
use crate::model::{classify, patch_partition, self_branch_forward, ModelParams};
use crate::objective::kd_loss_var;
use crate::pseudo::MemoryBank;
use crate::rng::{derive_seed, stream};
use crate::tensor::{argmax, Graph, Tensor};

/// A trained model with the extras the full forward pass needs.
#[derive(Debug, Clone, Copy)]
pub struct Teacher<'a> {
    pub params: &'a ModelParams,
    pub reference_source: &'a Tensor,
    pub bank: &'a MemoryBank,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillMetrics {
    pub epoch: usize,
    pub loss_kd: f64,
    pub epsilon: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_acc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct DistillOutput {
    pub params: ModelParams,
    pub metrics: Vec<DistillMetrics>,
}

/// Distils the teacher into a self-attention-only student that starts from
/// the teacher's weights. Teacher logits come from the full forward pass
/// against the stored reference batch and pseudo labels from the teacher's
/// bank; both are computed once before training. The student never sees
/// source images.
pub fn distill_student(teacher: Teacher<'_>, target: &Dataset, cfg: &TrainConfig) -> Result<DistillOutput> {
    cfg.validate()?;
    let m = &cfg.model;
    check_images(&target.images, m, "target images")?;
    let n_t = target.len();
    ensure!(
        teacher.bank.len() == n_t,
        "teacher bank has {} slots but the target set has {n_t} samples",
        teacher.bank.len()
    );
    ensure!(
        cfg.k_neighbors < n_t,
        "k_neighbors = {} needs more than that many target samples, got {n_t}",
        cfg.k_neighbors
    );
    let teacher_logits = super::logits_full(teacher.params, m, &target.images, teacher.reference_source)?;
    let reference = Dataset::new(teacher.reference_source.clone(), None)?;
    let features = probe(teacher.params, cfg, &reference, target)?.features;
    let (_, pseudo) = teacher
        .bank
        .knn_pseudo_labels(&(0..n_t).collect::<Vec<_>>(), &features, cfg.k_neighbors)?;

    let mut params = teacher.params.clone();
    let mut opt = Optimizer::new(cfg, &params);
    let mut metrics = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let epsilon = cfg.epsilon_for(epoch)?;
        let batches = make_batches(n_t, cfg.batch_size, derive_seed(cfg.seed, &[stream::DISTILL_ORDER, epoch as u64]))?;
        let mut loss_sum = 0.0;
        for idx in &batches {
            let mut g = Graph::new();
            let p = params.register(&mut g, true);
            let pt = g.constant(patch_partition(&target.batch(idx)?, m.patch_size)?);
            let z = self_branch_forward(&mut g, pt, &p, m)?;
            let pooled = g.mean_axis(z, 1)?;
            let aug = g.concat(&[pooled, pooled], 1)?;
            let logits = classify(&mut g, aug, &p)?;
            let t_logits = teacher_logits.select_outer(idx)?;
            let labels: Vec<usize> = idx.iter().map(|&i| pseudo[i]).collect();
            let loss = kd_loss_var(&mut g, &t_logits, logits, &labels, cfg.alpha, cfg.temperature, epsilon)?;
            loss_sum += g.value(loss).item()?;
            let grads = g.backward(loss)?;
            opt.step(&mut params, &p, &grads)?;
        }
        let target_acc = match &target.labels {
            Some(l) => {
                let pred: Vec<usize> = logits_dtf(&params, m, &target.images)?.rows().map(argmax).collect();
                Some(accuracy(&pred, l))
            }
            None => None,
        };
        metrics.push(DistillMetrics {
            epoch,
            loss_kd: loss_sum / batches.len() as f64,
            epsilon,
            target_acc,
        });
    }
    Ok(DistillOutput { params, metrics })
}
