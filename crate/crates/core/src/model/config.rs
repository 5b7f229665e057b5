use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Layer-norm epsilon used everywhere in the network.
pub const LN_EPS: f64 = 1e-5;

/// Architecture dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub mlp_ratio: usize,
    pub n_classes: usize,
    pub classifier_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_h: 16,
            image_w: 16,
            channels: 1,
            patch_size: 4,
            d_model: 32,
            n_heads: 4,
            n_blocks: 2,
            mlp_ratio: 2,
            n_classes: 4,
            classifier_hidden: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_h", self.image_h),
            ("image_w", self.image_w),
            ("channels", self.channels),
            ("patch_size", self.patch_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("mlp_ratio", self.mlp_ratio),
            ("n_classes", self.n_classes),
            ("classifier_hidden", self.classifier_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be >= 1")));
            }
        }
        if !self.image_h.is_multiple_of(self.patch_size) || !self.image_w.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image {}x{} is not divisible by patch size {}",
                self.image_h, self.image_w, self.patch_size
            )));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    /// Number of patches per image.
    pub fn n_tokens(&self) -> usize {
        (self.image_h / self.patch_size) * (self.image_w / self.patch_size)
    }

    /// Flattened patch width `C * P^2`.
    pub fn token_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        self.mlp_ratio * self.d_model
    }

    /// Width of an augmented (two-branch) representation.
    pub fn aug_dim(&self) -> usize {
        2 * self.d_model
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_arithmetic() {
        let vit = ModelConfig {
            image_h: 224,
            image_w: 224,
            channels: 3,
            patch_size: 16,
            ..ModelConfig::default()
        };
        vit.validate().unwrap();
        assert_eq!(vit.n_tokens(), 196);
        assert_eq!(vit.token_dim(), 768);

        let d = ModelConfig::default();
        assert_eq!(d.n_tokens(), 16);
        assert_eq!(d.token_dim(), 16);
    }

    #[test]
    fn rejects_inconsistent_dims() {
        let bad_patch = ModelConfig {
            patch_size: 5,
            ..ModelConfig::default()
        };
        assert!(bad_patch.validate().is_err());
        let bad_heads = ModelConfig {
            n_heads: 3,
            ..ModelConfig::default()
        };
        assert!(bad_heads.validate().is_err());
    }
}
