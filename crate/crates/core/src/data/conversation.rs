use std::path::{Path, PathBuf};

use autodiff::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const IMAGE_MARKER: &str = "<image>";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InlineImage {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ImageSource {
    Path(PathBuf),
    Inline(InlineImage),
}

impl ImageSource {
    /// Pixels as `[H, W, C]`. Relative paths resolve against `base`.
    pub fn load(&self, base: Option<&Path>) -> Result<Tensor> {
        match self {
            ImageSource::Inline(img) => Ok(Tensor::new(img.shape.clone(), img.data.clone())
                .map_err(|e| Error::Data(format!("inline image: {e}")))?),
            ImageSource::Path(p) => {
                let path = match base {
                    Some(b) if p.is_relative() => b.join(p),
                    _ => p.clone(),
                };
                crate::image::load(&path)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Human,
    Gpt,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub from: Speaker,
    pub value: String,
}

/// Conversation as stored on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConversation {
    pub id: String,
    pub image: ImageSource,
    pub conversations: Vec<Message>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Turn {
    pub question: String,
    pub answer: String,
}

/// One image with `P ≥ 1` question-answer pairs. The image marker has been
/// removed from the first question.
#[derive(Clone, Debug, PartialEq)]
pub struct Conversation {
    pub id: String,
    pub image: ImageSource,
    pub turns: Vec<Turn>,
}

impl Conversation {
    pub fn from_raw(raw: RawConversation) -> Result<Self> {
        let id = raw.id;
        let fail = |why: String| Error::Format(format!("conversation `{id}`: {why}"));
        let msgs = raw.conversations;
        if msgs.is_empty() || !msgs.len().is_multiple_of(2) {
            return Err(fail(format!(
                "expected alternating human/gpt pairs, got {} messages",
                msgs.len()
            )));
        }
        let mut turns = Vec::with_capacity(msgs.len() / 2);
        for (j, pair) in msgs.chunks(2).enumerate() {
            if pair[0].from != Speaker::Human || pair[1].from != Speaker::Gpt {
                return Err(fail(format!("turn {} is not a human/gpt pair", j + 1)));
            }
            let markers = pair[0].value.matches(IMAGE_MARKER).count();
            let question = if j == 0 {
                if markers != 1 {
                    return Err(fail(format!(
                        "first question must contain exactly one {IMAGE_MARKER}, found {markers}"
                    )));
                }
                pair[0]
                    .value
                    .replacen(IMAGE_MARKER, "", 1)
                    .trim()
                    .to_string()
            } else {
                if markers != 0 || pair[1].value.contains(IMAGE_MARKER) {
                    return Err(fail(format!("{IMAGE_MARKER} outside the first question")));
                }
                pair[0].value.clone()
            };
            if pair[1].value.contains(IMAGE_MARKER) {
                return Err(fail(format!("{IMAGE_MARKER} inside an answer")));
            }
            turns.push(Turn {
                question,
                answer: pair[1].value.clone(),
            });
        }
        Ok(Self {
            id,
            image: raw.image,
            turns,
        })
    }

    /// Inverse of [`Conversation::from_raw`]: the marker goes back in front
    /// of the first question.
    pub fn to_raw(&self) -> RawConversation {
        let mut msgs = Vec::with_capacity(self.turns.len() * 2);
        for (j, t) in self.turns.iter().enumerate() {
            let q = if j == 0 {
                format!("{IMAGE_MARKER}\n{}", t.question)
            } else {
                t.question.clone()
            };
            msgs.push(Message {
                from: Speaker::Human,
                value: q,
            });
            msgs.push(Message {
                from: Speaker::Gpt,
                value: t.answer.clone(),
            });
        }
        RawConversation {
            id: self.id.clone(),
            image: self.image.clone(),
            conversations: msgs,
        }
    }
}

/// Parses a JSON array of conversations.
pub fn parse_dataset(json: &str) -> Result<Vec<Conversation>> {
    let raw: Vec<RawConversation> =
        serde_json::from_str(json).map_err(|e| Error::Format(format!("conversation JSON: {e}")))?;
    raw.into_iter().map(Conversation::from_raw).collect()
}

pub fn load_dataset(path: &Path) -> Result<Vec<Conversation>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text)
}

pub fn dataset_to_json(convs: &[Conversation]) -> String {
    let raw: Vec<RawConversation> = convs.iter().map(Conversation::to_raw).collect();
    serde_json::to_string_pretty(&raw).expect("conversations serialize")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TurnKind {
    Usr,
    Vusr,
}

/// Proportion control for self-questioning turns.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SqPolicy {
    pub delta: f64,
    pub seed: u64,
}

impl Default for SqPolicy {
    fn default() -> Self {
        Self {
            delta: 0.5,
            seed: 0,
        }
    }
}

impl SqPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(Error::Config(format!(
                "delta {} outside [0, 1]",
                self.delta
            )));
        }
        Ok(())
    }

    /// Uniform draw in `[0, 1)` for turn `j` (1-based) of conversation `id`.
    /// Counter-based, so reordering a dataset never changes a draw.
    pub fn draw(&self, id: &str, j: usize) -> f64 {
        let mut h = Sha256::new();
        h.update(b"sqllava-turn");
        h.update(self.seed.to_le_bytes());
        h.update((id.len() as u64).to_le_bytes());
        h.update(id.as_bytes());
        h.update((j as u64).to_le_bytes());
        let digest = h.finalize();
        let x = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
        (x >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Turn 1 is always usr; later turns are vusr when `R > δ`.
    pub fn kind(&self, id: &str, j: usize) -> TurnKind {
        if j <= 1 || self.draw(id, j) <= self.delta {
            TurnKind::Usr
        } else {
            TurnKind::Vusr
        }
    }

    pub fn assign(&self, conv: &Conversation) -> Vec<TurnKind> {
        (1..=conv.turns.len())
            .map(|j| self.kind(&conv.id, j))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(msgs: &[(&str, &str)]) -> RawConversation {
        RawConversation {
            id: "c".into(),
            image: ImageSource::Path("x.png".into()),
            conversations: msgs
                .iter()
                .map(|(f, v)| Message {
                    from: if *f == "human" {
                        Speaker::Human
                    } else {
                        Speaker::Gpt
                    },
                    value: v.to_string(),
                })
                .collect(),
        }
    }

    #[test]
    fn marker_is_stripped_from_first_question() {
        let c =
            Conversation::from_raw(raw(&[("human", "<image>\nWhat is it?"), ("gpt", "A cat.")]))
                .unwrap();
        assert_eq!(c.turns[0].question, "What is it?");
        let c =
            Conversation::from_raw(raw(&[("human", "What is it?\n<image>"), ("gpt", "A cat.")]))
                .unwrap();
        assert_eq!(c.turns[0].question, "What is it?");
    }

    #[test]
    fn missing_marker_is_a_format_error() {
        let e = Conversation::from_raw(raw(&[("human", "What?"), ("gpt", "A.")])).unwrap_err();
        assert!(matches!(e, Error::Format(_)));
    }

    #[test]
    fn second_marker_is_a_format_error() {
        let e = Conversation::from_raw(raw(&[
            ("human", "<image> a"),
            ("gpt", "b"),
            ("human", "<image> c"),
            ("gpt", "d"),
        ]))
        .unwrap_err();
        assert!(matches!(e, Error::Format(_)));
    }

    #[test]
    fn turns_must_alternate() {
        assert!(Conversation::from_raw(raw(&[("gpt", "<image>"), ("human", "b")])).is_err());
        assert!(Conversation::from_raw(raw(&[("human", "<image>")])).is_err());
        assert!(Conversation::from_raw(raw(&[])).is_err());
    }

    #[test]
    fn inline_and_path_images_parse() {
        let json = r#"[
            {"id": "a", "image": "img/a.png", "conversations": [{"from": "human", "value": "<image>q"}, {"from": "gpt", "value": "a"}]},
            {"id": "b", "image": {"shape": [1, 1, 3], "data": [0, 0.5, 1]}, "conversations": [{"from": "human", "value": "<image>q"}, {"from": "gpt", "value": "a"}]}
        ]"#;
        let d = parse_dataset(json).unwrap();
        assert!(matches!(d[0].image, ImageSource::Path(_)));
        let px = d[1].image.load(None).unwrap();
        assert_eq!(px.shape(), &[1, 1, 3]);
    }

    #[test]
    fn json_round_trip() {
        let json = r#"[{"id": "a", "image": "a.png", "conversations": [{"from": "human", "value": "<image>\nq1"}, {"from": "gpt", "value": "a1"}, {"from": "human", "value": "q2"}, {"from": "gpt", "value": "a2"}]}]"#;
        let d = parse_dataset(json).unwrap();
        assert_eq!(parse_dataset(&dataset_to_json(&d)).unwrap(), d);
    }

    #[test]
    fn first_turn_is_always_usr() {
        let p = SqPolicy {
            delta: 0.0,
            seed: 3,
        };
        for id in ["a", "b", "c", "d"] {
            assert_eq!(p.kind(id, 1), TurnKind::Usr);
            assert_eq!(p.kind(id, 2), TurnKind::Vusr);
        }
    }

    #[test]
    fn delta_extremes() {
        let all = SqPolicy {
            delta: 0.0,
            seed: 1,
        };
        let none = SqPolicy {
            delta: 1.0,
            seed: 1,
        };
        for j in 2..200 {
            assert_eq!(all.kind("x", j), TurnKind::Vusr);
            assert_eq!(none.kind("x", j), TurnKind::Usr);
        }
    }

    #[test]
    fn draws_are_in_unit_interval() {
        let p = SqPolicy {
            delta: 0.5,
            seed: 9,
        };
        for j in 0..1000 {
            let r = p.draw("conv", j);
            assert!((0.0..1.0).contains(&r));
        }
    }

    #[test]
    fn delta_out_of_range_is_rejected() {
        assert!(SqPolicy {
            delta: 1.5,
            seed: 0
        }
        .validate()
        .is_err());
        assert!(SqPolicy {
            delta: -0.1,
            seed: 0
        }
        .validate()
        .is_err());
    }
}
