//! Sequence layout for training and generation.
//!
//! Instruction records:
//! `[bos] system [image × L_v] ( prefix question <o_d> [aswr] answer <o_d> ) × P`
//! with `prefix ∈ {[usr], [vusr]}`. Caption records for the first stage:
//! `[bos] [image × L_v] caption <o_d>`.

use serde::{Deserialize, Serialize};

use super::conversation::{Conversation, TurnKind};
use crate::error::{Error, Result};
use crate::vocab::{TokenId, Vocab, ASWR, BOS, DELIM, IMAGE, USR, VUSR};

pub const SYSTEM_MESSAGE: &str = "The assistant gives helpful, detailed, and polite answers to the user's questions. Also, the assistant is a curious virtual user can ask complex questions that are relevant to the content in the image.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpanKind {
    Bos,
    System,
    Image,
    Prefix,
    Question,
    QuestionDelim,
    AnswerTag,
    Answer,
    AnswerDelim,
}

impl SpanKind {
    pub fn is_question(self) -> bool {
        matches!(self, SpanKind::Question | SpanKind::QuestionDelim)
    }

    pub fn is_answer(self) -> bool {
        matches!(self, SpanKind::Answer | SpanKind::AnswerDelim)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub kind: SpanKind,
    /// 0-based turn index for per-turn spans.
    pub turn: Option<usize>,
    pub start: usize,
    pub len: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
}

/// A rendered, loss-masked training record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnSequence {
    pub id: String,
    pub stage: Stage,
    pub token_ids: Vec<TokenId>,
    pub loss_mask: Vec<bool>,
    pub kinds: Vec<TurnKind>,
    pub spans: Vec<Span>,
}

impl TurnSequence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// `(start, length)` of the image placeholders.
    pub fn image_span(&self) -> (usize, usize) {
        self.spans
            .iter()
            .find(|s| s.kind == SpanKind::Image)
            .map(|s| (s.start, s.len))
            .unwrap_or((0, 0))
    }

    /// Span covering token position `pos`.
    pub fn span_at(&self, pos: usize) -> Option<&Span> {
        self.spans
            .iter()
            .find(|s| pos >= s.start && pos < s.start + s.len)
    }

    pub fn masked_count(&self) -> usize {
        self.loss_mask.iter().filter(|m| **m).count()
    }
}

struct Builder {
    ids: Vec<TokenId>,
    mask: Vec<bool>,
    spans: Vec<Span>,
}

impl Builder {
    fn new() -> Self {
        Self {
            ids: Vec::new(),
            mask: Vec::new(),
            spans: Vec::new(),
        }
    }

    fn push(&mut self, kind: SpanKind, turn: Option<usize>, ids: &[TokenId], learn: bool) {
        self.spans.push(Span {
            kind,
            turn,
            start: self.ids.len(),
            len: ids.len(),
        });
        self.ids.extend_from_slice(ids);
        self.mask.extend(std::iter::repeat_n(learn, ids.len()));
    }

    fn finish(
        self,
        id: &str,
        stage: Stage,
        kinds: Vec<TurnKind>,
        max_len: usize,
    ) -> Result<TurnSequence> {
        if self.ids.len() > max_len {
            return Err(Error::Length {
                len: self.ids.len(),
                max: max_len,
            });
        }
        Ok(TurnSequence {
            id: id.to_string(),
            stage,
            token_ids: self.ids,
            loss_mask: self.mask,
            kinds,
            spans: self.spans,
        })
    }
}

pub fn prefix_token(kind: TurnKind) -> TokenId {
    match kind {
        TurnKind::Usr => USR,
        TurnKind::Vusr => VUSR,
    }
}

/// Renders an instruction conversation. `num_image_tokens` placeholders
/// reserve the rows the projected image will occupy.
pub fn render(
    conv: &Conversation,
    kinds: &[TurnKind],
    vocab: &Vocab,
    num_image_tokens: usize,
    max_len: usize,
) -> Result<TurnSequence> {
    if kinds.len() != conv.turns.len() {
        return Err(Error::Format(format!(
            "conversation `{}`: {} turn kinds for {} turns",
            conv.id,
            kinds.len(),
            conv.turns.len()
        )));
    }
    if kinds.first() == Some(&TurnKind::Vusr) {
        return Err(Error::Format(format!(
            "conversation `{}`: the first turn cannot be self-questioning",
            conv.id
        )));
    }
    let mut b = Builder::new();
    b.push(SpanKind::Bos, None, &[BOS], false);
    b.push(
        SpanKind::System,
        None,
        &vocab.tokenize(SYSTEM_MESSAGE),
        false,
    );
    b.push(SpanKind::Image, None, &vec![IMAGE; num_image_tokens], false);
    for (j, (turn, kind)) in conv.turns.iter().zip(kinds).enumerate() {
        let t = Some(j);
        let ask = *kind == TurnKind::Vusr;
        b.push(SpanKind::Prefix, t, &[prefix_token(*kind)], false);
        b.push(SpanKind::Question, t, &vocab.tokenize(&turn.question), ask);
        b.push(SpanKind::QuestionDelim, t, &[DELIM], ask);
        b.push(SpanKind::AnswerTag, t, &[ASWR], false);
        b.push(SpanKind::Answer, t, &vocab.tokenize(&turn.answer), true);
        b.push(SpanKind::AnswerDelim, t, &[DELIM], true);
    }
    b.finish(&conv.id, Stage::Finetune, kinds.to_vec(), max_len)
}

/// Renders a caption record: the first answer is the description.
pub fn render_pretrain(
    conv: &Conversation,
    vocab: &Vocab,
    num_image_tokens: usize,
    max_len: usize,
) -> Result<TurnSequence> {
    let caption = &conv
        .turns
        .first()
        .ok_or_else(|| Error::Format(format!("conversation `{}` has no turns", conv.id)))?
        .answer;
    let mut b = Builder::new();
    b.push(SpanKind::Bos, None, &[BOS], false);
    b.push(SpanKind::Image, None, &vec![IMAGE; num_image_tokens], false);
    b.push(SpanKind::Answer, Some(0), &vocab.tokenize(caption), true);
    b.push(SpanKind::AnswerDelim, Some(0), &[DELIM], true);
    b.finish(&conv.id, Stage::Pretrain, Vec::new(), max_len)
}

/// Prompt fed to the decoder at generation time. Answer mode ends right
/// before the first answer token; self-questioning mode ends right before
/// the first question token.
pub fn generation_prefix(
    kind: TurnKind,
    question: Option<&str>,
    vocab: &Vocab,
    num_image_tokens: usize,
) -> Vec<TokenId> {
    let mut ids = vec![BOS];
    ids.extend(vocab.tokenize(SYSTEM_MESSAGE));
    ids.extend(std::iter::repeat_n(IMAGE, num_image_tokens));
    ids.push(prefix_token(kind));
    if let Some(q) = question {
        ids.extend(vocab.tokenize(q));
        ids.push(DELIM);
        ids.push(ASWR);
    }
    ids
}
