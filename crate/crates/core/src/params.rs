use std::collections::BTreeMap;

use autodiff::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Which part of the model a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    VisionEncoder,
    Prototype,
    Projector,
    LanguageModel,
    Adapter,
}

impl ParamGroup {
    pub fn of(name: &str) -> Option<Self> {
        let prefix = name.split('.').next()?;
        Some(match prefix {
            "vision" => Self::VisionEncoder,
            "proto" => Self::Prototype,
            "projector" => Self::Projector,
            "lm" => Self::LanguageModel,
            "lora" => Self::Adapter,
            _ => return None,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::VisionEncoder => "vision_encoder",
            Self::Prototype => "prototype",
            Self::Projector => "projector",
            Self::LanguageModel => "language_model",
            Self::Adapter => "adapter",
        }
    }
}

/// Named parameter tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Marks exactly the parameters accepted by `trainable` as requiring gradients.
    pub fn set_trainable(&mut self, trainable: impl Fn(&str) -> bool) {
        for (name, t) in self.tensors.iter_mut() {
            t.set_requires_grad(trainable(name));
        }
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.tensors
            .iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(k, _)| k.clone())
            .collect()
    }
}

/// Deterministic generator keyed by (seed, parameter name), independent of
/// the order in which parameters are created.
pub fn name_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(b"sqllava-init");
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(digest)
}

pub fn normal(seed: u64, name: &str, shape: &[usize], std: f64) -> Tensor {
    let mut rng = name_rng(seed, name);
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(&mut rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("consistent shape")
}
