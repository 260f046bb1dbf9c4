//! Run configuration file.
//!
//! ```toml
//! seed = 0                      # model initialization
//!
//! [model.vision]                # VisionConfig
//! [model.lm]                    # LmConfig
//! [model.lora.llm]              # rank, alpha, targets
//! [model.lora.vision]
//!
//! [data]
//! conversations = "train.json"  # instruction conversations
//! captions = "captions.json"    # caption records for the first stage
//! records = "records.sqrd"      # output of `data prepare`
//! [data.policy]                 # delta, seed
//!
//! [train.warmup]                # plain-text decoder warm-up; steps = 0 skips it
//! [train.pretrain]              # TrainPlan
//! [train.finetune]              # TrainPlan
//!
//! [io]
//! checkpoint_dir = "checkpoints"
//! metrics = "metrics.jsonl"
//! save_every = 500              # optional intermediate checkpoints
//! ```
//! Every section is optional. Relative paths are taken from the directory
//! holding the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::data::{SqPolicy, Stage};
use crate::error::{Error, Result};
use crate::trainer::TrainPlan;
use crate::warmup::WarmupConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub conversations: Option<PathBuf>,
    pub captions: Option<PathBuf>,
    /// Base for relative image paths; defaults to the directory of each JSON file.
    pub image_root: Option<PathBuf>,
    pub records: PathBuf,
    pub policy: SqPolicy,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            conversations: None,
            captions: None,
            image_root: None,
            records: PathBuf::from("records.sqrd"),
            policy: SqPolicy::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub warmup: WarmupConfig,
    pub pretrain: TrainPlan,
    pub finetune: TrainPlan,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            warmup: WarmupConfig::default(),
            pretrain: TrainPlan::pretrain(),
            finetune: TrainPlan::finetune(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoConfig {
    pub checkpoint_dir: PathBuf,
    /// JSON-lines file, one record per optimizer step; appended to.
    pub metrics: PathBuf,
    pub save_every: Option<usize>,
}

impl Default for IoConfig {
    fn default() -> Self {
        Self {
            checkpoint_dir: PathBuf::from("checkpoints"),
            metrics: PathBuf::from("metrics.jsonl"),
            save_every: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub io: IoConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.data.conversations.as_mut().map(fix);
        self.data.captions.as_mut().map(fix);
        self.data.image_root.as_mut().map(fix);
        fix(&mut self.data.records);
        fix(&mut self.io.checkpoint_dir);
        fix(&mut self.io.metrics);
    }

    /// Replaces every seed in the file: initialization, turn-kind draws,
    /// warm-up text sampling and both data orders.
    pub fn override_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.data.policy.seed = seed;
        self.train.warmup.seed = seed;
        self.train.pretrain.seed = seed;
        self.train.finetune.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.policy.validate()?;
        if self.train.warmup.steps > 0 {
            self.train.warmup.validate(self.model.lm.max_seq_len)?;
        }
        for (want, plan) in [
            (Stage::Pretrain, &self.train.pretrain),
            (Stage::Finetune, &self.train.finetune),
        ] {
            if plan.stage != want {
                return Err(Error::Config(format!(
                    "train.{} declares stage {:?}",
                    if want == Stage::Pretrain {
                        "pretrain"
                    } else {
                        "finetune"
                    },
                    plan.stage
                )));
            }
            plan.validate()?;
        }
        if self.io.save_every == Some(0) {
            return Err(Error::Config("io.save_every must be positive".into()));
        }
        Ok(())
    }

    /// The fully resolved configuration, defaults included.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.model.lora.llm.rank, 128);
        assert_eq!(cfg.train.pretrain.batch_size, 256);
        assert_eq!(cfg.train.finetune.batch_size, 128);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in [
            "colour = 1",
            "[model.lm]\nwidth = 3",
            "[io]\ncheckpoints = \"x\"",
            "[data.policy]\nratio = 0.3",
        ] {
            assert!(
                matches!(RunConfig::parse(text), Err(Error::Config(_))),
                "{text}"
            );
        }
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut cfg = RunConfig::parse("seed = 3\n[data.policy]\ndelta = 0.25\n").unwrap();
        cfg.override_seed(9);
        let back = RunConfig::parse(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.train.finetune.seed, 9);
        assert_eq!(back.data.policy.delta, 0.25);
    }

    #[test]
    fn relative_paths_follow_the_file() {
        let mut cfg = RunConfig::parse(
            "[data]\nconversations = \"a.json\"\n[io]\nmetrics = \"/abs/m.jsonl\"",
        )
        .unwrap();
        cfg.resolve_paths(Path::new("/runs/x"));
        assert_eq!(
            cfg.data.conversations.unwrap(),
            PathBuf::from("/runs/x/a.json")
        );
        assert_eq!(cfg.io.metrics, PathBuf::from("/abs/m.jsonl"));
        assert_eq!(cfg.io.checkpoint_dir, PathBuf::from("/runs/x/checkpoints"));
    }

    #[test]
    fn mismatched_stage_is_a_config_error() {
        let text = "[train.pretrain]\nstage = \"finetune\"\nlr = { adapter = 1e-3, prototype = 1e-3, projector = 1e-3 }\nschedule = { kind = \"constant\" }\nbatch_size = 1\nepochs = 1\nseed = 0\n";
        assert!(matches!(RunConfig::parse(text), Err(Error::Config(_))));
    }
}
