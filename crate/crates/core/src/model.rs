use std::collections::BTreeSet;

use autodiff::{Tensor, Var};

use crate::config::{LoraTowerConfig, ModelConfig};
use crate::error::{Error, Result};
use crate::language::{self, LanguageModel};
use crate::lora::AdapterSet;
use crate::nn::Forward;
use crate::params::ParamStore;
use crate::vision::{self, Projector, PrototypeBank, VisionTower};
use crate::vocab::{TokenId, Vocab};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tower {
    Vision,
    Language,
}

impl Tower {
    fn block_prefix(self, i: usize) -> String {
        match self {
            Tower::Vision => vision::block_prefix(i),
            Tower::Language => language::block_prefix(i),
        }
    }

    fn root(self) -> &'static str {
        match self {
            Tower::Vision => "vision.",
            Tower::Language => "lm.",
        }
    }
}

/// The full two-tower model: weights, adapters, and vocabulary.
#[derive(Clone, Debug)]
pub struct SqLlava {
    pub config: ModelConfig,
    pub seed: u64,
    pub params: ParamStore,
    pub adapters: AdapterSet,
    pub vocab: Vocab,
    linears: BTreeSet<String>,
}

impl SqLlava {
    /// Randomly initialized model.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut linears = BTreeSet::new();
        let vt = VisionTower::new(config.vision.clone());
        linears.extend(vt.init_params(&mut params, seed));
        linears.extend(PrototypeBank::new(&config.vision).init_params(&mut params, seed));
        let proj = Projector {
            d_vision: config.vision.d_vision,
            d_model: config.lm.d_model,
        };
        linears.extend(proj.init_params(&mut params, seed));
        linears.extend(LanguageModel::new(config.lm.clone()).init_params(&mut params, seed));
        Ok(Self {
            config,
            seed,
            params,
            adapters: AdapterSet::default(),
            vocab: Vocab::byte_level(),
            linears,
        })
    }

    /// Reassembles a model from stored parts, checking every expected
    /// parameter is present with the right shape.
    pub fn from_parts(
        config: ModelConfig,
        seed: u64,
        params: ParamStore,
        adapters: AdapterSet,
        vocab: Vocab,
    ) -> Result<Self> {
        let fresh = Self::new(config, seed)?;
        for (name, t) in fresh.params.iter() {
            let got = params
                .get(name)
                .map_err(|_| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if got.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        for a in adapters.iter() {
            for n in [a.a_name(), a.b_name()] {
                if !params.contains(&n) {
                    return Err(Error::Checkpoint(format!("missing adapter tensor `{n}`")));
                }
            }
        }
        let expected = fresh.params.len() + 2 * adapters.len();
        if params.len() != expected {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, expected {expected}",
                params.len()
            )));
        }
        Ok(Self {
            params,
            adapters,
            vocab,
            ..fresh
        })
    }

    pub fn vision_tower(&self) -> VisionTower {
        VisionTower::new(self.config.vision.clone())
    }

    pub fn prototypes(&self) -> PrototypeBank {
        PrototypeBank::new(&self.config.vision)
    }

    pub fn projector(&self) -> Projector {
        Projector {
            d_vision: self.config.vision.d_vision,
            d_model: self.config.lm.d_model,
        }
    }

    pub fn language_model(&self) -> LanguageModel {
        LanguageModel::new(self.config.lm.clone())
    }

    pub fn forward_ctx(&self) -> Forward<'_> {
        Forward::new(&self.params, &self.adapters)
    }

    /// Names of every linear transform (`<name>.weight` / `<name>.bias`).
    pub fn linear_names(&self) -> &BTreeSet<String> {
        &self.linears
    }

    /// `H_v` for one image: encode, cluster, redistribute, project.
    pub fn image_embeddings(&self, fw: &mut Forward, pixels: &Tensor) -> Result<Var> {
        let tokens = self.vision_tower().encode(fw, pixels)?;
        let bank = self.prototypes();
        let (_, centers) = bank.em_cluster(fw, &tokens)?;
        let tokens = bank.enhance(fw, &tokens, centers)?;
        self.projector().project(fw, &tokens)
    }

    /// Logits for a rendered token stream whose `image_span` holds image placeholders.
    pub fn logits(
        &self,
        fw: &mut Forward,
        ids: &[TokenId],
        image_span: (usize, usize),
        pixels: Option<&Tensor>,
    ) -> Result<Var> {
        let h_v = match (image_span.1, pixels) {
            (0, _) => None,
            (_, Some(p)) => Some(self.image_embeddings(fw, p)?),
            (_, None) => return Err(Error::Format("image span given without pixels".into())),
        };
        let lm = self.language_model();
        let seq = lm.splice(fw, ids, image_span, h_v)?;
        lm.forward(fw, &seq)
    }

    /// Expands per-block names (`attn.q`) over every block of `tower`;
    /// names that already are full linear names pass through.
    pub fn expand_targets(&self, tower: Tower, patterns: &[String]) -> Result<Vec<String>> {
        let layers = match tower {
            Tower::Vision => self.config.vision.n_layers,
            Tower::Language => self.config.lm.n_layers,
        };
        let mut out = Vec::new();
        for p in patterns {
            if p.starts_with(tower.root()) {
                if !self.linears.contains(p) {
                    return Err(Error::Config(format!("unknown adapter target `{p}`")));
                }
                out.push(p.clone());
                continue;
            }
            for i in 0..layers {
                let name = format!("{}.{p}", tower.block_prefix(i));
                if !self.linears.contains(&name) {
                    return Err(Error::Config(format!("unknown adapter target `{p}`")));
                }
                out.push(name);
            }
        }
        Ok(out)
    }

    /// Attaches adapters to explicit linear names inside the two towers.
    pub fn attach(&mut self, targets: &[String], rank: usize, alpha: f64) -> Result<()> {
        for t in targets {
            let in_tower = t.starts_with("vision.") || t.starts_with("lm.");
            if !in_tower || !self.linears.contains(t) {
                return Err(Error::Config(format!("unknown adapter target `{t}`")));
            }
        }
        self.adapters
            .attach(&mut self.params, targets, rank, alpha, self.seed)
    }

    /// Attaches the configured adapters in both towers.
    pub fn attach_configured(&mut self) -> Result<()> {
        let lora = self.config.lora.clone();
        for (tower, cfg) in [(Tower::Language, &lora.llm), (Tower::Vision, &lora.vision)] {
            let LoraTowerConfig {
                rank,
                alpha,
                targets,
            } = cfg;
            let names = self.expand_targets(tower, targets)?;
            self.attach(&names, *rank, *alpha)?;
        }
        Ok(())
    }

    pub fn merge_adapters(&mut self) -> Result<()> {
        self.adapters.merge(&mut self.params)
    }

    pub fn unmerge_adapters(&mut self) -> Result<()> {
        self.adapters.unmerge(&mut self.params)
    }
}
