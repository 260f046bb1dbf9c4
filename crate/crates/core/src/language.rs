//! Causal decoder over a spliced sequence of image and text embeddings.

use autodiff::{Tensor, Var};

use crate::config::LmConfig;
use crate::error::{Error, Result};
use crate::nn::{init_block, init_layer_norm, init_linear, Forward};
use crate::params::{normal, ParamStore};
use crate::vocab::TokenId;

pub const TOK_EMB: &str = "lm.tok_emb";
pub const POS_EMB: &str = "lm.pos_emb";
pub const FINAL_NORM: &str = "lm.ln_f";
pub const HEAD: &str = "lm.head";

const TOK_INIT_STD: f64 = 1.0;
/// The output head is frozen in both stages, so it is initialized wide
/// enough that confident predictions remain reachable after the final norm.
const HEAD_INIT_GAIN: f64 = 2.0;

pub fn block_prefix(i: usize) -> String {
    format!("lm.blocks.{i}")
}

/// Embedded input `H: [L, d_model]` with the image rows spliced in.
#[derive(Clone, Copy, Debug)]
pub struct MixedSequence {
    pub h: Var,
    pub len: usize,
    /// `(start, length)` of the image rows inside `h`.
    pub image_span: (usize, usize),
}

#[derive(Clone, Debug)]
pub struct LanguageModel {
    pub config: LmConfig,
}

impl LanguageModel {
    pub fn new(config: LmConfig) -> Self {
        Self { config }
    }

    pub fn init_params(&self, store: &mut ParamStore, seed: u64) -> Vec<String> {
        let c = &self.config;
        store.insert(
            TOK_EMB,
            normal(seed, TOK_EMB, &[c.vocab_size, c.d_model], TOK_INIT_STD),
        );
        store.insert(POS_EMB, sinusoidal_positions(c.max_seq_len, c.d_model));
        let mut linears = Vec::new();
        for i in 0..c.n_layers {
            linears.extend(init_block(
                store,
                seed,
                &block_prefix(i),
                c.d_model,
                c.mlp_ratio,
            ));
        }
        init_layer_norm(store, FINAL_NORM, c.d_model);
        init_linear(store, seed, HEAD, c.d_model, c.vocab_size, HEAD_INIT_GAIN);
        linears.push(HEAD.to_string());
        linears
    }

    /// Embeds `ids` and replaces the rows in `image_span` with `h_v`.
    /// Ids inside the span are placeholders and are never looked up.
    pub fn splice(
        &self,
        fw: &mut Forward,
        ids: &[TokenId],
        image_span: (usize, usize),
        h_v: Option<Var>,
    ) -> Result<MixedSequence> {
        let (start, len) = image_span;
        if start + len > ids.len() {
            return Err(Error::Format(format!(
                "image span {start}+{len} exceeds sequence of {} tokens",
                ids.len()
            )));
        }
        let table = fw.param(TOK_EMB)?;
        let lookup = |ids: &[TokenId]| ids.iter().map(|&i| i as usize).collect::<Vec<_>>();
        let h = if len == 0 {
            fw.graph.embedding(table, &lookup(ids))?
        } else {
            let h_v =
                h_v.ok_or_else(|| Error::Format("image span without image embeddings".into()))?;
            let rows = fw.graph.value(h_v).dims2()?.0;
            if rows != len {
                return Err(Error::Format(format!(
                    "image span holds {len} positions but {rows} image tokens were given"
                )));
            }
            let mut parts = Vec::with_capacity(3);
            if start > 0 {
                parts.push(fw.graph.embedding(table, &lookup(&ids[..start]))?);
            }
            parts.push(h_v);
            if start + len < ids.len() {
                parts.push(fw.graph.embedding(table, &lookup(&ids[start + len..]))?);
            }
            fw.graph.concat_rows(&parts)?
        };
        Ok(MixedSequence {
            h,
            len: ids.len(),
            image_span,
        })
    }

    fn trunk(&self, fw: &mut Forward, seq: &MixedSequence) -> Result<Var> {
        if seq.len > self.config.max_seq_len {
            return Err(Error::Length {
                len: seq.len,
                max: self.config.max_seq_len,
            });
        }
        if seq.len == 0 {
            return Err(Error::Format("empty sequence".into()));
        }
        let table = fw.param(POS_EMB)?;
        let positions: Vec<usize> = (0..seq.len).collect();
        let pos = fw.graph.embedding(table, &positions)?;
        let mut x = fw.graph.add(seq.h, pos)?;
        for i in 0..self.config.n_layers {
            x = fw.block(&block_prefix(i), x, self.config.n_heads, true)?;
        }
        fw.layer_norm(FINAL_NORM, x)
    }

    /// Next-token logits `[L, vocab_size]` for every position.
    pub fn forward(&self, fw: &mut Forward, seq: &MixedSequence) -> Result<Var> {
        let x = self.trunk(fw, seq)?;
        fw.linear(HEAD, x)
    }

    /// Logits `[1, vocab_size]` for the last position only.
    pub fn forward_last(&self, fw: &mut Forward, seq: &MixedSequence) -> Result<Var> {
        let x = self.trunk(fw, seq)?;
        let last = fw.graph.slice_rows(x, seq.len - 1, 1)?;
        fw.linear(HEAD, last)
    }
}

/// Position table initialized with interleaved sine/cosine pairs. Every
/// shift is then a fixed linear map, so attention can key on offsets that
/// carry over to positions never seen in training. Only the decoder
/// warm-up updates the table.
pub fn sinusoidal_positions(len: usize, d: usize) -> Tensor {
    let mut data = Vec::with_capacity(len * d);
    for p in 0..len {
        for i in 0..d {
            let freq = 1.0 / 10000f64.powf((i / 2 * 2) as f64 / d as f64);
            let angle = p as f64 * freq;
            data.push(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new(vec![len, d], data).expect("consistent shape")
}

/// Index of the largest logit; ties resolve to the lowest id.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Log-softmax value of `target` in `row`, computed directly.
pub fn log_prob(row: &[f64], target: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
    row[target] - max - sum.ln()
}
