//! Plain-text pre-training of the decoder.
//!
//! A freshly initialized decoder has no language prior, so after instruction
//! tuning it can only replay token sequences at the positions it saw them.
//! This phase stands in for the pre-trained language model the method starts
//! from: next-token prediction on random concatenations of corpus text, with
//! every `lm.*` weight trainable. It runs before both training stages, which
//! keep the decoder frozen.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Conversation, SYSTEM_MESSAGE};
use crate::error::{Error, Result};
use crate::model::SqLlava;
use crate::params::ParamGroup;
use crate::trainer::{adamw_update, AdamW, OptState};
use crate::vocab::{TokenId, BOS, DELIM};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WarmupConfig {
    pub steps: usize,
    pub lr: f64,
    /// Texts are appended until the sequence reaches a length drawn from
    /// `min_len..max_len`, then cut to `max_len`.
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
    pub optimizer: AdamW,
}

impl Default for WarmupConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            lr: 1e-3,
            min_len: 100,
            max_len: 400,
            seed: 0,
            optimizer: AdamW::default(),
        }
    }
}

impl WarmupConfig {
    pub fn validate(&self, max_seq_len: usize) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!(
                "warmup lr {} must be positive",
                self.lr
            )));
        }
        if self.min_len < 2 || self.min_len >= self.max_len || self.max_len > max_seq_len {
            return Err(Error::Config(format!(
                "warmup lengths need 2 <= min_len < max_len <= {max_seq_len}, got {}..{}",
                self.min_len, self.max_len
            )));
        }
        Ok(())
    }
}

/// Distinct texts of a corpus: the system message plus every question and answer.
pub fn warmup_texts(convs: &[Conversation]) -> Vec<String> {
    let mut texts: Vec<String> = convs
        .iter()
        .flat_map(|c| c.turns.iter())
        .flat_map(|t| [t.question.clone(), t.answer.clone()])
        .collect();
    texts.push(SYSTEM_MESSAGE.to_string());
    texts.sort();
    texts.dedup();
    texts
}

/// `[bos] text <o_d> text <o_d> ...` cut to at most `cfg.max_len` ids.
pub fn warmup_sequence(
    rng: &mut ChaCha8Rng,
    texts: &[String],
    model: &SqLlava,
    cfg: &WarmupConfig,
) -> Vec<TokenId> {
    let target = rng.random_range(cfg.min_len..cfg.max_len);
    let mut ids = vec![BOS];
    while ids.len() < target {
        let t = texts.choose(rng).expect("non-empty text list");
        ids.extend(model.vocab.tokenize(t));
        ids.push(DELIM);
    }
    ids.truncate(cfg.max_len);
    ids
}

/// Trains the decoder weights on `texts`; `on_step` sees `(step, loss)`.
/// Trainable flags are restored afterwards.
pub fn warmup_language_model(
    model: &mut SqLlava,
    texts: &[String],
    cfg: &WarmupConfig,
    mut on_step: impl FnMut(usize, f64) -> Result<()>,
) -> Result<()> {
    cfg.validate(model.config.lm.max_seq_len)?;
    if texts.iter().all(|t| t.is_empty()) {
        return Err(Error::Data(
            "warmup needs at least one non-empty text".into(),
        ));
    }
    if model.adapters.is_merged() {
        return Err(Error::State(
            "warmup on merged adapters would fold them into the decoder".into(),
        ));
    }
    let previous = model.params.trainable_names();
    model
        .params
        .set_trainable(|n| ParamGroup::of(n) == Some(ParamGroup::LanguageModel));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = OptState::default();
    let result = (|| {
        for step in 0..cfg.steps {
            let ids = warmup_sequence(&mut rng, texts, model, cfg);
            let n = ids.len();
            let targets: Vec<usize> = (0..n)
                .map(|i| ids.get(i + 1).map_or(0, |t| *t as usize))
                .collect();
            let mask: Vec<bool> = (0..n).map(|i| i + 1 < n).collect();
            let mut fw = model.forward_ctx();
            let logits = model.logits(&mut fw, &ids, (0, 0), None)?;
            let loss = fw.graph.cross_entropy(logits, &targets, &mask)?;
            let value = fw.graph.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Numeric {
                    sample_id: format!("warmup step {step}"),
                    what: format!("loss is {value}"),
                });
            }
            let mut grads = fw.graph.backward(loss)?;
            state.t += 1;
            for name in model.params.trainable_names() {
                let Some(g) = grads.take_by_name(&name) else {
                    continue;
                };
                let w = model.params.get_mut(&name)?;
                let len = w.numel();
                let m = state
                    .m
                    .entry(name.clone())
                    .or_insert_with(|| vec![0.0; len]);
                let v = state.v.entry(name).or_insert_with(|| vec![0.0; len]);
                adamw_update(w.data_mut(), &g, m, v, state.t, cfg.lr, &cfg.optimizer);
            }
            on_step(step + 1, value)?;
        }
        Ok(())
    })();
    model
        .params
        .set_trainable(|n| previous.iter().any(|p| p == n));
    result
}
