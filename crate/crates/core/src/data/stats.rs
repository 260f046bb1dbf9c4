use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::conversation::TurnKind;
use super::template::{SpanKind, TurnSequence};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LengthSummary {
    pub count: usize,
    pub min: usize,
    pub max: usize,
    pub mean: f64,
    /// Length → number of spans with that length.
    pub histogram: BTreeMap<usize, usize>,
}

impl LengthSummary {
    fn from_lengths(lengths: &[usize]) -> Self {
        if lengths.is_empty() {
            return Self::default();
        }
        let mut histogram = BTreeMap::new();
        for l in lengths {
            *histogram.entry(*l).or_insert(0) += 1;
        }
        Self {
            count: lengths.len(),
            min: *lengths.iter().min().expect("non-empty"),
            max: *lengths.iter().max().expect("non-empty"),
            mean: lengths.iter().sum::<usize>() as f64 / lengths.len() as f64,
            histogram,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub conversations: usize,
    pub turns: usize,
    pub usr_turns: usize,
    pub vusr_turns: usize,
    /// `vusr_turns / turns`, or 0 for an empty corpus.
    pub vusr_fraction: f64,
    pub tokens: usize,
    pub masked_tokens: usize,
    /// Masked tokens attributed to each turn, summed over the corpus by turn index.
    pub masked_per_turn: Vec<usize>,
    pub question_lengths: LengthSummary,
    pub answer_lengths: LengthSummary,
}

pub fn corpus_stats(seqs: &[TurnSequence]) -> CorpusStats {
    let mut s = CorpusStats {
        conversations: seqs.len(),
        ..Default::default()
    };
    let mut q_lens = Vec::new();
    let mut a_lens = Vec::new();
    for seq in seqs {
        s.turns += seq.kinds.len();
        s.usr_turns += seq.kinds.iter().filter(|k| **k == TurnKind::Usr).count();
        s.vusr_turns += seq.kinds.iter().filter(|k| **k == TurnKind::Vusr).count();
        s.tokens += seq.len();
        for span in &seq.spans {
            match span.kind {
                SpanKind::Question => q_lens.push(span.len),
                SpanKind::Answer => a_lens.push(span.len),
                _ => {}
            }
            if let Some(t) = span.turn {
                if s.masked_per_turn.len() <= t {
                    s.masked_per_turn.resize(t + 1, 0);
                }
                let masked = seq.loss_mask[span.start..span.start + span.len]
                    .iter()
                    .filter(|m| **m)
                    .count();
                s.masked_per_turn[t] += masked;
                s.masked_tokens += masked;
            }
        }
    }
    if s.turns > 0 {
        s.vusr_fraction = s.vusr_turns as f64 / s.turns as f64;
    }
    s.question_lengths = LengthSummary::from_lengths(&q_lens);
    s.answer_lengths = LengthSummary::from_lengths(&a_lens);
    s
}
