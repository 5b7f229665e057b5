use serde::{Deserialize, Serialize};

use super::infer::check_images;
use super::{accuracy, Optimizer, TrainConfig};
use crate::dataio::{paired_order, Dataset};
use crate::error::{ensure, Result};
use crate::model::{backbone_forward, classify, patch_partition, pool_and_augment, ModelConfig, ModelParams};
use crate::objective::{bcat_total_var, cross_entropy_var, mmd2, mmd2_var, target_pseudo_loss_var, KernelSpec};
use crate::pseudo::MemoryBank;
use crate::rng::{derive_seed, stream};
use crate::tensor::{argmax, kernels, Graph, Tensor, Var};

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss_cls_s: f64,
    pub loss_cls_t: f64,
    pub loss_transfer: f64,
    pub loss_total: f64,
    pub epsilon: f64,
    /// Mean squared MMD between the augmented views over the target set,
    /// measured after the epoch's last step.
    pub mmd: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_acc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: ModelParams,
    /// Source half of the final training batch.
    pub reference_source: Tensor,
    pub bank: MemoryBank,
    pub metrics: Vec<EpochMetrics>,
}

/// Gradient-free pass over the whole target set.
#[derive(Debug, Clone)]
pub struct Probe {
    /// Target-dominant augmented features `[n_t, 2d]`.
    pub features: Tensor,
    /// Softmax predictions on the target view `[n_t, K]`.
    pub probs: Tensor,
    pub predictions: Vec<usize>,
    pub mmd: f64,
}

/// Runs the full model over the target set in chunks of `batch_size`,
/// pairing target sample `i` with source sample `i mod n_s`. `mmd` is the
/// mean over chunks holding at least two samples.
pub fn probe(params: &ModelParams, cfg: &TrainConfig, source: &Dataset, target: &Dataset) -> Result<Probe> {
    let m = &cfg.model;
    let (n_s, n_t) = (source.len(), target.len());
    let (mut feats, mut probs, mut predictions) = (Vec::new(), Vec::new(), Vec::with_capacity(n_t));
    let (mut mmd_sum, mut mmd_count) = (0.0, 0usize);
    let mut start = 0;
    while start < n_t {
        let end = (start + cfg.batch_size).min(n_t);
        let t_idx: Vec<usize> = (start..end).collect();
        let s_idx: Vec<usize> = (start..end).map(|i| i % n_s).collect();
        let mut g = Graph::new();
        let p = params.register(&mut g, false);
        let views = forward_views(&mut g, &p, m, &source.batch(&s_idx)?, &target.batch(&t_idx)?)?;
        let (src_aug, tgt_aug) = (views.src_aug, views.tgt_aug);
        let logits = classify(&mut g, tgt_aug, &p)?;
        let pr = kernels::softmax_rows(g.value(logits));
        predictions.extend(g.value(logits).rows().map(argmax));
        if t_idx.len() >= 2 {
            mmd_sum += mmd2(g.value(src_aug), g.value(tgt_aug), &cfg.kernel)?;
            mmd_count += 1;
        }
        feats.extend_from_slice(g.value(tgt_aug).data());
        probs.extend(pr.into_data());
        start = end;
    }
    Ok(Probe {
        features: Tensor::new(vec![n_t, 2 * m.d_model], feats)?,
        probs: Tensor::new(vec![n_t, m.n_classes], probs)?,
        predictions,
        mmd: if mmd_count > 0 { mmd_sum / mmd_count as f64 } else { 0.0 },
    })
}

/// Augmented features of both domains and the source-view logits.
#[derive(Debug, Clone, Copy)]
pub struct Views {
    pub src_aug: Var,
    pub tgt_aug: Var,
    pub logits_s: Var,
}

/// Full forward pass on a paired batch of source and target images.
pub fn forward_views(g: &mut Graph, p: &ModelParams<Var>, m: &ModelConfig, xs: &Tensor, xt: &Tensor) -> Result<Views> {
    let ps = g.constant(patch_partition(xs, m.patch_size)?);
    let pt = g.constant(patch_partition(xt, m.patch_size)?);
    let state = backbone_forward(g, ps, pt, p, m)?;
    let (src_aug, tgt_aug) = pool_and_augment(g, &state)?;
    let logits_s = classify(g, src_aug, p)?;
    Ok(Views {
        src_aug,
        tgt_aug,
        logits_s,
    })
}

/// Target-side loss terms of one step.
#[derive(Debug, Clone, Copy)]
pub struct TargetTerms {
    pub probs_t: Var,
    pub cls_t: Var,
    pub transfer: Var,
}

/// Pseudo-label loss on the target view against `q_hat`, and the squared
/// MMD between the two augmented views.
pub fn target_terms(
    g: &mut Graph,
    views: &Views,
    p: &ModelParams<Var>,
    q_hat: &Tensor,
    kernel: &KernelSpec,
) -> Result<TargetTerms> {
    let logits_t = classify(g, views.tgt_aug, p)?;
    let probs_t = g.softmax_rows(logits_t)?;
    let cls_t = target_pseudo_loss_var(g, probs_t, q_hat)?;
    let transfer = mmd2_var(g, views.src_aug, views.tgt_aug, kernel)?;
    Ok(TargetTerms {
        probs_t,
        cls_t,
        transfer,
    })
}

fn first_occurrences(indices: &[usize]) -> Vec<usize> {
    let mut seen = std::collections::BTreeSet::new();
    (0..indices.len()).filter(|&r| seen.insert(indices[r])).collect()
}

#[derive(Default)]
struct Sums {
    cls_s: f64,
    cls_t: f64,
    transfer: f64,
    total: f64,
}

/// Trains the quadruple-branch model on labelled source and unlabelled
/// target data. Target labels, when present, only feed `target_acc`.
pub fn train_bcat(source: &Dataset, target: &Dataset, cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    let m = &cfg.model;
    check_images(&source.images, m, "source images")?;
    check_images(&target.images, m, "target images")?;
    let source_labels = source
        .labels
        .as_ref()
        .ok_or_else(|| crate::Error::InvalidArgument("source dataset must be labelled".into()))?;
    ensure!(
        source_labels.iter().all(|&l| l < m.n_classes),
        "source labels must lie in 0..{}",
        m.n_classes
    );
    let (n_s, n_t) = (source.len(), target.len());
    let n_pairs = n_s.max(n_t);
    ensure!(
        cfg.batch_size <= n_pairs,
        "batch size {} exceeds the larger domain ({n_pairs} samples)",
        cfg.batch_size
    );
    if !cfg.source_only {
        ensure!(
            cfg.k_neighbors < n_t,
            "k_neighbors = {} needs more than that many target samples, got {n_t}",
            cfg.k_neighbors
        );
    }

    let mut params = ModelParams::init(m, derive_seed(cfg.seed, &[stream::INIT]))?;
    let mut opt = Optimizer::new(cfg, &params);
    let mut bank = MemoryBank::new(n_t, 2 * m.d_model, m.n_classes)?;
    if !cfg.source_only {
        let p = probe(&params, cfg, source, target)?;
        bank.update(&(0..n_t).collect::<Vec<_>>(), &p.features, &p.probs, cfg.bank_momentum)?;
    }

    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut reference = None;
    for epoch in 1..=cfg.epochs {
        let epsilon = cfg.epsilon_for(epoch)?;
        let e = epoch as u64;
        let s_order = paired_order(n_s, n_pairs, derive_seed(cfg.seed, &[stream::SOURCE_ORDER, e]));
        let t_order = paired_order(n_t, n_pairs, derive_seed(cfg.seed, &[stream::TARGET_ORDER, e]));
        let steps = n_pairs / cfg.batch_size;
        let mut sums = Sums::default();
        for step in 0..steps {
            let range = step * cfg.batch_size..(step + 1) * cfg.batch_size;
            let (s_idx, t_idx) = (&s_order[range.clone()], &t_order[range]);
            let xs = source.batch(s_idx)?;
            let labels: Vec<usize> = s_idx.iter().map(|&i| source_labels[i]).collect();

            let mut g = Graph::new();
            let p = params.register(&mut g, true);
            let views = forward_views(&mut g, &p, m, &xs, &target.batch(t_idx)?)?;
            let cls_s = cross_entropy_var(&mut g, views.logits_s, &labels)?;

            let (loss, update) = if cfg.source_only {
                sums.cls_s += g.value(cls_s).item()?;
                sums.total += g.value(cls_s).item()?;
                (cls_s, None)
            } else {
                let (q_hat, _) = bank.knn_pseudo_labels(t_idx, g.value(views.tgt_aug), cfg.k_neighbors)?;
                let terms = target_terms(&mut g, &views, &p, &q_hat, &cfg.kernel)?;
                let total = bcat_total_var(&mut g, cls_s, terms.cls_t, terms.transfer, epsilon, cfg.beta)?;
                sums.cls_s += g.value(cls_s).item()?;
                sums.cls_t += g.value(terms.cls_t).item()?;
                sums.transfer += g.value(terms.transfer).item()?;
                sums.total += g.value(total).item()?;
                let keep = first_occurrences(t_idx);
                let idx: Vec<usize> = keep.iter().map(|&r| t_idx[r]).collect();
                let feats = g.value(views.tgt_aug).select_outer(&keep)?;
                let probs = g.value(terms.probs_t).select_outer(&keep)?;
                (total, Some((idx, feats, probs)))
            };
            let grads = g.backward(loss)?;
            opt.step(&mut params, &p, &grads)?;
            if let Some((idx, feats, probs)) = update {
                bank.update(&idx, &feats, &probs, cfg.bank_momentum)?;
            }
            if epoch == cfg.epochs && step + 1 == steps {
                reference = Some(xs);
            }
        }

        let p = probe(&params, cfg, source, target)?;
        let n = steps as f64;
        metrics.push(EpochMetrics {
            epoch,
            loss_cls_s: sums.cls_s / n,
            loss_cls_t: sums.cls_t / n,
            loss_transfer: sums.transfer / n,
            loss_total: sums.total / n,
            epsilon,
            mmd: p.mmd,
            target_acc: target.labels.as_ref().map(|l| accuracy(&p.predictions, l)),
        });
    }

    Ok(TrainOutput {
        params,
        reference_source: reference.expect("at least one step ran"),
        bank,
        metrics,
    })
}
