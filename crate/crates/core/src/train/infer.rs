use super::INFER_CHUNK;
use crate::error::{ensure, Result};
use crate::model::{
    backbone_forward, classify, patch_partition, pool_and_augment, self_branch_forward, ModelConfig, ModelParams,
};
use crate::tensor::{argmax, Graph, Tensor};

pub(crate) fn check_images(images: &Tensor, cfg: &ModelConfig, what: &str) -> Result<()> {
    ensure!(
        images.rank() == 4 && images.shape()[1..] == [cfg.image_h, cfg.image_w, cfg.channels],
        "{what} must be [b, {}, {}, {}], got {:?}",
        cfg.image_h,
        cfg.image_w,
        cfg.channels,
        images.shape()
    );
    Ok(())
}

fn chunked(n: usize, mut f: impl FnMut(usize, usize) -> Result<Tensor>) -> Result<Tensor> {
    let mut parts = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + INFER_CHUNK).min(n);
        parts.push(f(start, end)?);
        start = end;
    }
    let k = parts[0].last_dim();
    let data: Vec<f64> = parts.into_iter().flat_map(Tensor::into_data).collect();
    Tensor::new(vec![n, k], data)
}

/// Logits of the target-dominant view `[Z_t | Z_s->t]` with the stored
/// reference source batch as the cross-attention partner.
pub fn logits_full(params: &ModelParams, cfg: &ModelConfig, target: &Tensor, reference: &Tensor) -> Result<Tensor> {
    check_images(target, cfg, "target batch")?;
    check_images(reference, cfg, "reference batch")?;
    let n = target.shape()[0];
    chunked(n, |start, end| {
        let xt = target.slice_outer(start, end)?;
        let idx: Vec<usize> = (start..end).map(|i| i % reference.shape()[0]).collect();
        let xs = reference.select_outer(&idx)?;
        let mut g = Graph::new();
        let p = params.register(&mut g, false);
        let ps = g.constant(patch_partition(&xs, cfg.patch_size)?);
        let pt = g.constant(patch_partition(&xt, cfg.patch_size)?);
        let state = backbone_forward(&mut g, ps, pt, &p, cfg)?;
        let (_, tgt_aug) = pool_and_augment(&mut g, &state)?;
        let logits = classify(&mut g, tgt_aug, &p)?;
        Ok(g.value(logits).clone())
    })
}

/// Logits from the target self-attention branch alone, with the pooled
/// feature duplicated into both halves of the classifier input.
pub fn logits_dtf(params: &ModelParams, cfg: &ModelConfig, target: &Tensor) -> Result<Tensor> {
    check_images(target, cfg, "target batch")?;
    chunked(target.shape()[0], |start, end| {
        let xt = target.slice_outer(start, end)?;
        let mut g = Graph::new();
        let p = params.register(&mut g, false);
        let pt = g.constant(patch_partition(&xt, cfg.patch_size)?);
        let z = self_branch_forward(&mut g, pt, &p, cfg)?;
        let pooled = g.mean_axis(z, 1)?;
        let aug = g.concat(&[pooled, pooled], 1)?;
        let logits = classify(&mut g, aug, &p)?;
        Ok(g.value(logits).clone())
    })
}

pub fn infer_full(params: &ModelParams, cfg: &ModelConfig, target: &Tensor, reference: &Tensor) -> Result<Vec<usize>> {
    Ok(logits_full(params, cfg, target, reference)?.rows().map(argmax).collect())
}

pub fn infer_dtf(params: &ModelParams, cfg: &ModelConfig, target: &Tensor) -> Result<Vec<usize>> {
    Ok(logits_dtf(params, cfg, target)?.rows().map(argmax).collect())
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    assert_eq!(pred.len(), labels.len(), "prediction and label counts differ");
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len().max(1) as f64
}

/// Accuracy per true class; classes without samples report `None`.
pub fn per_class_accuracy(pred: &[usize], labels: &[usize], n_classes: usize) -> Vec<Option<f64>> {
    let mut hits = vec![0usize; n_classes];
    let mut total = vec![0usize; n_classes];
    for (&p, &l) in pred.iter().zip(labels) {
        total[l] += 1;
        hits[l] += usize::from(p == l);
    }
    hits.iter()
        .zip(&total)
        .map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64))
        .collect()
}
