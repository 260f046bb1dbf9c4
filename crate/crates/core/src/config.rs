//! Model hyperparameters.
//!
//! Defaults are the desk-scale toy model. Full-scale values (for example
//! 256 prototypes) are valid configuration points, just slow.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VisionConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub d_vision: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    /// Number of learnable cluster centers.
    pub num_prototypes: usize,
    /// EM iterations per forward pass.
    pub em_iters: usize,
}

impl Default for VisionConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            channels: 3,
            d_vision: 64,
            n_layers: 2,
            n_heads: 4,
            mlp_ratio: 4,
            num_prototypes: 8,
            em_iters: 2,
        }
    }
}

impl VisionConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Image tokens per image.
    pub fn num_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0
            || !self.image_size.is_multiple_of(self.patch_size)
            || self.image_size == 0
        {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.n_heads == 0 || !self.d_vision.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_vision {} is not divisible by n_heads {}",
                self.d_vision, self.n_heads
            )));
        }
        if self.num_prototypes == 0 || self.em_iters == 0 {
            return Err(Error::Config(
                "num_prototypes and em_iters must be at least 1".into(),
            ));
        }
        if self.channels == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config(
                "channels and mlp_ratio must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            mlp_ratio: 4,
            vocab_size: crate::vocab::VOCAB_SIZE,
            max_seq_len: 512,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size < crate::vocab::VOCAB_SIZE {
            return Err(Error::Config(format!(
                "vocab_size {} is smaller than the byte vocabulary ({})",
                self.vocab_size,
                crate::vocab::VOCAB_SIZE
            )));
        }
        if self.max_seq_len == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config(
                "max_seq_len and mlp_ratio must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Adapter placement for one tower.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraTowerConfig {
    pub rank: usize,
    pub alpha: f64,
    /// Per-block linear names (`attn.q`, `mlp.fc1`, ...) or full linear names (`lm.head`).
    pub targets: Vec<String>,
}

pub fn default_block_targets() -> Vec<String> {
    ["attn.q", "attn.k", "attn.v", "attn.o", "mlp.fc1", "mlp.fc2"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub llm: LoraTowerConfig,
    pub vision: LoraTowerConfig,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            llm: LoraTowerConfig {
                rank: 128,
                alpha: 256.0,
                targets: default_block_targets(),
            },
            vision: LoraTowerConfig {
                rank: 32,
                alpha: 64.0,
                targets: default_block_targets(),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vision: VisionConfig,
    pub lm: LmConfig,
    pub lora: LoraConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.vision.validate()?;
        self.lm.validate()?;
        for (tower, cfg) in [("llm", &self.lora.llm), ("vision", &self.lora.vision)] {
            if cfg.rank == 0 || !(cfg.alpha.is_finite() && cfg.alpha > 0.0) {
                return Err(Error::Config(format!(
                    "lora.{tower}: rank and alpha must be positive"
                )));
            }
        }
        if self.lm.max_seq_len <= self.vision.num_tokens() {
            return Err(Error::Config(format!(
                "max_seq_len {} cannot hold {} image tokens plus text",
                self.lm.max_seq_len,
                self.vision.num_tokens()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_defaults() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.vision.num_tokens(), 16);
        assert_eq!((c.vision.num_prototypes, c.vision.em_iters), (8, 2));
        assert_eq!(c.lm.d_model, 64);
    }

    #[test]
    fn lora_defaults_follow_implementation_section() {
        let c = LoraConfig::default();
        assert_eq!((c.llm.rank, c.llm.alpha), (128, 256.0));
        assert_eq!((c.vision.rank, c.vision.alpha), (32, 64.0));
    }

    #[test]
    fn rejects_bad_geometry() {
        let mut v = VisionConfig {
            patch_size: 7,
            ..VisionConfig::default()
        };
        assert!(v.validate().is_err());
        v.patch_size = 8;
        v.n_heads = 3;
        assert!(v.validate().is_err());
        v.n_heads = 4;
        v.em_iters = 0;
        assert!(v.validate().is_err());
    }

    #[test]
    fn full_scale_prototype_count_is_valid() {
        let v = VisionConfig {
            num_prototypes: 256,
            ..VisionConfig::default()
        };
        v.validate().unwrap();
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = toml::from_str::<VisionConfig>("image_size = 32\nbogus = 1\n");
        assert!(err.is_err());
    }
}
