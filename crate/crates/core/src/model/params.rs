use std::collections::BTreeMap;

use rand::Rng as _;

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed, stream};
use crate::tensor::{Graph, Tensor, Var};

/// Checkpoint suffixes of the twelve per-block tensors, in field order.
pub const BLOCK_TENSOR_NAMES: [&str; 12] = [
    "wq", "wk", "wv", "wo", "ln1.g", "ln1.b", "ln2.g", "ln2.b", "mlp.w1", "mlp.b1", "mlp.w2",
    "mlp.b2",
];

/// Parameters of one quadruple block. A single instance is read by all four
/// branches of that block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T = Tensor> {
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub wo: T,
    pub ln1_g: T,
    pub ln1_b: T,
    pub ln2_g: T,
    pub ln2_b: T,
    pub mlp_w1: T,
    pub mlp_b1: T,
    pub mlp_w2: T,
    pub mlp_b2: T,
}

impl<T> BlockParams<T> {
    pub fn fields(&self) -> [&T; 12] {
        [
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ln1_g,
            &self.ln1_b,
            &self.ln2_g,
            &self.ln2_b,
            &self.mlp_w1,
            &self.mlp_b1,
            &self.mlp_w2,
            &self.mlp_b2,
        ]
    }

    pub fn fields_mut(&mut self) -> [&mut T; 12] {
        [
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.ln2_g,
            &mut self.ln2_b,
            &mut self.mlp_w1,
            &mut self.mlp_b1,
            &mut self.mlp_w2,
            &mut self.mlp_b2,
        ]
    }

    pub fn from_fields(fields: [T; 12]) -> Self {
        let [wq, wk, wv, wo, ln1_g, ln1_b, ln2_g, ln2_b, mlp_w1, mlp_b1, mlp_w2, mlp_b2] = fields;
        Self {
            wq,
            wk,
            wv,
            wo,
            ln1_g,
            ln1_b,
            ln2_g,
            ln2_b,
            mlp_w1,
            mlp_b1,
            mlp_w2,
            mlp_b2,
        }
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> BlockParams<U> {
        BlockParams::from_fields(self.fields().map(&mut f))
    }
}

/// Every learnable tensor of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T = Tensor> {
    pub embed_w: T,
    pub embed_b: T,
    pub blocks: Vec<BlockParams<T>>,
    pub cls_w1: T,
    pub cls_b1: T,
    pub cls_w2: T,
    pub cls_b2: T,
}

impl<T> ModelParams<T> {
    /// `(checkpoint name, tensor)` pairs in canonical order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = vec![
            ("embed.w".to_string(), &self.embed_w),
            ("embed.b".to_string(), &self.embed_b),
        ];
        for (i, block) in self.blocks.iter().enumerate() {
            for (suffix, t) in BLOCK_TENSOR_NAMES.iter().zip(block.fields()) {
                out.push((format!("block{i}.{suffix}"), t));
            }
        }
        out.extend([
            ("cls.w1".to_string(), &self.cls_w1),
            ("cls.b1".to_string(), &self.cls_b1),
            ("cls.w2".to_string(), &self.cls_w2),
            ("cls.b2".to_string(), &self.cls_b2),
        ]);
        out
    }

    /// Mutable references in the same order as [`ModelParams::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![&mut self.embed_w, &mut self.embed_b];
        for block in &mut self.blocks {
            out.extend(block.fields_mut());
        }
        out.extend([
            &mut self.cls_w1,
            &mut self.cls_b1,
            &mut self.cls_w2,
            &mut self.cls_b2,
        ]);
        out
    }

    pub fn tensors(&self) -> Vec<&T> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    pub fn count(&self) -> usize {
        4 + 2 + 12 * self.blocks.len()
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> ModelParams<U> {
        ModelParams {
            embed_w: f(&self.embed_w),
            embed_b: f(&self.embed_b),
            blocks: self.blocks.iter().map(|b| b.map(&mut f)).collect(),
            cls_w1: f(&self.cls_w1),
            cls_b1: f(&self.cls_b1),
            cls_w2: f(&self.cls_w2),
            cls_b2: f(&self.cls_b2),
        }
    }
}

#[derive(Clone, Copy)]
enum Init {
    Xavier,
    Zeros,
    Ones,
}

fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.d_model;
    let h = cfg.mlp_hidden();
    let mut out = vec![
        ("embed.w".into(), vec![cfg.token_dim(), d], Init::Xavier),
        ("embed.b".into(), vec![d], Init::Zeros),
    ];
    for i in 0..cfg.n_blocks {
        let block: [(&str, Vec<usize>, Init); 12] = [
            ("wq", vec![d, d], Init::Xavier),
            ("wk", vec![d, d], Init::Xavier),
            ("wv", vec![d, d], Init::Xavier),
            ("wo", vec![d, d], Init::Xavier),
            ("ln1.g", vec![d], Init::Ones),
            ("ln1.b", vec![d], Init::Zeros),
            ("ln2.g", vec![d], Init::Ones),
            ("ln2.b", vec![d], Init::Zeros),
            ("mlp.w1", vec![d, h], Init::Xavier),
            ("mlp.b1", vec![h], Init::Zeros),
            ("mlp.w2", vec![h, d], Init::Xavier),
            ("mlp.b2", vec![d], Init::Zeros),
        ];
        out.extend(
            block
                .into_iter()
                .map(|(s, shape, init)| (format!("block{i}.{s}"), shape, init)),
        );
    }
    out.extend([
        ("cls.w1".into(), vec![cfg.aug_dim(), cfg.classifier_hidden], Init::Xavier),
        ("cls.b1".into(), vec![cfg.classifier_hidden], Init::Zeros),
        ("cls.w2".into(), vec![cfg.classifier_hidden, cfg.n_classes], Init::Xavier),
        ("cls.b2".into(), vec![cfg.n_classes], Init::Zeros),
    ]);
    out
}

impl ModelParams<Tensor> {
    /// Expected `(name, shape)` for every parameter under `cfg`.
    pub fn expected_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        layout(cfg).into_iter().map(|(n, s, _)| (n, s)).collect()
    }

    /// Glorot-uniform matrices, zero biases, unit layer-norm gains; one
    /// seeded stream consumed in canonical parameter order.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_from_seed(derive_seed(seed, &[stream::INIT]));
        let tensors: Vec<Tensor> = layout(cfg)
            .into_iter()
            .map(|(_, shape, init)| match init {
                Init::Zeros => Tensor::zeros(&shape),
                Init::Ones => Tensor::ones(&shape),
                Init::Xavier => {
                    let a = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                    let data = (0..shape[0] * shape[1])
                        .map(|_| rng.random_range(-a..a))
                        .collect();
                    Tensor::from_parts(shape, data)
                }
            })
            .collect();
        Ok(Self::from_ordered(tensors, cfg.n_blocks))
    }

    fn from_ordered(tensors: Vec<Tensor>, n_blocks: usize) -> Self {
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("parameter layout exhausted");
        let embed_w = next();
        let embed_b = next();
        let blocks = (0..n_blocks)
            .map(|_| BlockParams::from_fields(std::array::from_fn(|_| next())))
            .collect();
        Self {
            embed_w,
            embed_b,
            blocks,
            cls_w1: next(),
            cls_b1: next(),
            cls_w2: next(),
            cls_b2: next(),
        }
    }

    /// Takes every model tensor out of `named`, checking names and shapes
    /// against `cfg`. Tensors that are not model parameters stay in the map.
    pub fn take_from(named: &mut BTreeMap<String, Tensor>, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut ordered = Vec::new();
        for (name, shape) in Self::expected_shapes(cfg) {
            let t = named
                .remove(&name)
                .ok_or_else(|| Error::MissingTensor(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::TensorShape {
                    name,
                    expected: shape,
                    found: t.shape().to_vec(),
                });
            }
            ordered.push(t);
        }
        Ok(Self::from_ordered(ordered, cfg.n_blocks))
    }

    /// Places every tensor on `g` as a leaf.
    pub fn register(&self, g: &mut Graph, requires_grad: bool) -> ModelParams<Var> {
        self.map(|t| g.leaf(t.clone(), requires_grad))
    }

    pub fn numel(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }
}
