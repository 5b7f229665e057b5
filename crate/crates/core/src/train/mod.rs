//! Optimizers, the epoch-ratio weight schedule, BCAT training, student
//! distillation and the inference paths.

mod bcat;
mod distill;
mod infer;
pub mod optim;

use serde::{Deserialize, Serialize};

pub use bcat::{forward_views, probe, target_terms, train_bcat, EpochMetrics, Probe, TargetTerms, TrainOutput, Views};
pub use distill::{distill_student, DistillMetrics, DistillOutput, Teacher};
pub use infer::{accuracy, infer_dtf, infer_full, logits_dtf, logits_full, per_class_accuracy};
pub use optim::{adamw_step, sgd_momentum_step, AdamHyper, OptimizerKind, OptimizerState};

use crate::error::{ensure, Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::objective::KernelSpec;
use crate::tensor::{Gradients, Tensor, Var};

/// Samples per forward pass when no gradient is needed.
pub const INFER_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    /// `None` selects the optimizer's default.
    pub weight_decay: Option<f64>,
    pub alpha: f64,
    pub beta: f64,
    pub temperature: f64,
    pub k_neighbors: usize,
    pub bank_momentum: f64,
    pub seed: u64,
    /// Fixed target-loss weight; `None` ramps it as `epoch / epochs`.
    pub epsilon: Option<f64>,
    /// Train on the source loss alone, never building the target terms.
    pub source_only: bool,
    pub kernel: KernelSpec,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            optimizer: OptimizerKind::Adamw,
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: None,
            alpha: 0.8,
            beta: 3.0,
            temperature: 2.0,
            k_neighbors: 5,
            bank_momentum: 0.9,
            seed: 0,
            epsilon: None,
            source_only: false,
            kernel: KernelSpec::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.kernel.validate()?;
        let c = |ok: bool, msg: String| if ok { Ok(()) } else { Err(Error::Config(msg)) };
        c(self.epochs >= 1, format!("epochs must be at least 1, got {}", self.epochs))?;
        c(self.batch_size >= 2, format!("batch_size must be at least 2, got {}", self.batch_size))?;
        c(self.lr >= 0.0 && self.lr.is_finite(), format!("lr must be nonnegative, got {}", self.lr))?;
        c((0.0..1.0).contains(&self.momentum), format!("momentum must lie in [0, 1), got {}", self.momentum))?;
        c(self.weight_decay().is_finite() && self.weight_decay() >= 0.0, format!("weight_decay must be nonnegative, got {}", self.weight_decay()))?;
        c((0.0..=1.0).contains(&self.alpha), format!("alpha must lie in [0, 1], got {}", self.alpha))?;
        c(self.beta >= 0.0 && self.beta.is_finite(), format!("beta must be nonnegative, got {}", self.beta))?;
        c(self.temperature > 0.0 && self.temperature.is_finite(), format!("temperature must be positive, got {}", self.temperature))?;
        c(self.k_neighbors >= 1, "k_neighbors must be at least 1".into())?;
        c((0.0..1.0).contains(&self.bank_momentum), format!("bank_momentum must lie in [0, 1), got {}", self.bank_momentum))?;
        if let Some(e) = self.epsilon {
            c((0.0..=1.0).contains(&e), format!("epsilon must lie in [0, 1], got {e}"))?;
        }
        Ok(())
    }

    pub fn weight_decay(&self) -> f64 {
        self.weight_decay
            .unwrap_or_else(|| self.optimizer.default_weight_decay())
    }

    /// Target-loss weight for a 1-indexed epoch.
    pub fn epsilon_for(&self, epoch: usize) -> Result<f64> {
        match self.epsilon {
            Some(e) => Ok(e),
            None => epsilon_at(epoch, self.epochs),
        }
    }
}

/// `epoch / total` for `1 <= epoch <= total`.
pub fn epsilon_at(epoch: usize, total: usize) -> Result<f64> {
    ensure!(
        (1..=total).contains(&epoch),
        "epoch {epoch} outside 1..={total}"
    );
    Ok(epoch as f64 / total as f64)
}

/// The configured optimizer bound to its state.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    state: OptimizerState,
}

impl Optimizer {
    pub fn new(cfg: &TrainConfig, params: &ModelParams) -> Self {
        Self {
            kind: cfg.optimizer,
            lr: cfg.lr,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay(),
            state: OptimizerState::new(&params.tensors()),
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, vars: &ModelParams<Var>, grads: &Gradients) -> Result<()> {
        let grads: Vec<&Tensor> = vars
            .tensors()
            .into_iter()
            .map(|&v| grads.get(v).ok_or(Error::ForeignVariable))
            .collect::<Result<_>>()?;
        let mut ps = params.tensors_mut();
        match self.kind {
            OptimizerKind::SgdMomentum => {
                sgd_momentum_step(&mut ps, &grads, &mut self.state, self.lr, self.momentum, self.weight_decay)
            }
            OptimizerKind::Adamw => {
                let mut h = AdamHyper::new(self.lr, self.weight_decay);
                h.beta1 = self.momentum;
                adamw_step(&mut ps, &grads, &mut self.state, &h)
            }
        }
    }
}
