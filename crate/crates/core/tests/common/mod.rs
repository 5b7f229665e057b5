#![allow(dead_code)]

pub mod grad;
pub mod mmd_oracle;

use bcat_core::model::{ModelConfig, ModelParams};
use bcat_core::rng::rng_from_seed;
use bcat_core::Tensor;
use rand::Rng as _;
use rand_distr::StandardNormal;

/// N = 4 tokens, d_model 8, two heads, one block.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        image_h: 8,
        image_w: 8,
        channels: 1,
        patch_size: 4,
        d_model: 8,
        n_heads: 2,
        n_blocks: 1,
        mlp_ratio: 2,
        n_classes: 4,
        classifier_hidden: 8,
    }
}

pub fn tiny_params(seed: u64) -> ModelParams {
    ModelParams::init(&tiny_config(), seed).unwrap()
}

pub fn normal(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = rng_from_seed(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = rng_from_seed(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// `||a - b|| / max(||a||, ||b||)`, or the absolute difference norm when
/// both are tiny.
pub fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let norm = |t: &[f64]| t.iter().map(|v| v * v).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    let scale = norm(a.data()).max(norm(b.data()));
    if scale < 1e-8 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}
