//! Greedy decoding for answering and zero-shot self-questioning.

use autodiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::data::template::generation_prefix;
use crate::data::TurnKind;
use crate::error::{Error, Result};
use crate::language::argmax;
use crate::model::SqLlava;
use crate::vocab::{TokenId, DELIM};

pub const DEFAULT_CAPTION_PROMPT: &str =
    "Provide a brief description of the given image, your answer should be in one sentence.";

pub const DEFAULT_MAX_NEW_TOKENS: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Answer,
    SelfQ,
}

#[derive(Clone, Debug)]
pub struct GenRequest {
    pub image: Option<Tensor>,
    pub mode: Mode,
    /// Required in answer mode, forbidden in self-questioning mode.
    pub prompt: Option<String>,
    pub max_new_tokens: usize,
}

impl GenRequest {
    pub fn answer(image: Tensor, question: impl Into<String>) -> Self {
        Self {
            image: Some(image),
            mode: Mode::Answer,
            prompt: Some(question.into()),
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
        }
    }

    pub fn selfq(image: Tensor) -> Self {
        Self {
            image: Some(image),
            mode: Mode::SelfQ,
            prompt: None,
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image.is_none() {
            return Err(Error::Request("an image is required".into()));
        }
        match (self.mode, &self.prompt) {
            (Mode::SelfQ, Some(_)) => Err(Error::Request(
                "self-questioning takes no prompt; its only instruction is [vusr]".into(),
            )),
            (Mode::Answer, None) => Err(Error::Request("answer mode needs a question".into())),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    /// Decoded output without the delimiter.
    pub text: String,
    /// Every emitted id, including a final delimiter when one was produced.
    pub tokens: Vec<TokenId>,
    pub stopped_at_delimiter: bool,
}

/// Prompt ids the decoder is conditioned on for `req`.
pub fn request_prefix(model: &SqLlava, req: &GenRequest) -> Result<Vec<TokenId>> {
    req.validate()?;
    let kind = match req.mode {
        Mode::Answer => TurnKind::Usr,
        Mode::SelfQ => TurnKind::Vusr,
    };
    Ok(generation_prefix(
        kind,
        req.prompt.as_deref(),
        &model.vocab,
        model.config.vision.num_tokens(),
    ))
}

pub fn generate(model: &SqLlava, req: &GenRequest) -> Result<Generation> {
    let mut ids = request_prefix(model, req)?;
    let pixels = req.image.as_ref().expect("validated");
    let l_v = model.config.vision.num_tokens();
    let image_start = ids
        .iter()
        .position(|t| *t == crate::vocab::IMAGE)
        .unwrap_or(0);
    let h_v = {
        let mut fw = model.forward_ctx();
        let h = model.image_embeddings(&mut fw, pixels)?;
        fw.graph.value(h).clone()
    };
    let lm = model.language_model();
    let max_len = model.config.lm.max_seq_len;
    let mut out = Vec::new();
    let mut stopped = false;
    while out.len() < req.max_new_tokens && ids.len() < max_len {
        let mut fw = model.forward_ctx();
        let hv = fw.graph.constant(h_v.clone());
        let seq = lm.splice(&mut fw, &ids, (image_start, l_v), Some(hv))?;
        let logits = lm.forward_last(&mut fw, &seq)?;
        let next = argmax(fw.graph.value(logits).data()) as TokenId;
        out.push(next);
        ids.push(next);
        if next == DELIM {
            stopped = true;
            break;
        }
    }
    let body = if stopped {
        &out[..out.len() - 1]
    } else {
        &out[..]
    };
    Ok(Generation {
        text: model.vocab.detokenize(body),
        tokens: out,
        stopped_at_delimiter: stopped,
    })
}

/// Answer-mode generation with a caption instruction.
pub fn caption(
    model: &SqLlava,
    image: Tensor,
    instruction: Option<&str>,
    max_new_tokens: usize,
) -> Result<Generation> {
    let mut req = GenRequest::answer(image, instruction.unwrap_or(DEFAULT_CAPTION_PROMPT));
    req.max_new_tokens = max_new_tokens;
    generate(model, &req)
}
