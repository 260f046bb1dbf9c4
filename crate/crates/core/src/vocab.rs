//! Byte-level vocabulary with reserved instruction tokens.
//!
//! Ids `0..256` are raw bytes. Reserved tokens sit above them, so ordinary
//! text, including text that spells `[vusr]`, can never produce a reserved id.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const BOS: TokenId = 256;
pub const PAD: TokenId = 257;
pub const IMAGE: TokenId = 258;
pub const USR: TokenId = 259;
pub const VUSR: TokenId = 260;
pub const ASWR: TokenId = 261;
pub const DELIM: TokenId = 262;

pub const VOCAB_SIZE: usize = 263;

const SPECIALS: [(TokenId, &str); 7] = [
    (BOS, "<s>"),
    (PAD, "<pad>"),
    (IMAGE, "<image>"),
    (USR, "[usr]"),
    (VUSR, "[vusr]"),
    (ASWR, "[aswr]"),
    (DELIM, "<o_d>"),
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::byte_level()
    }
}

impl Vocab {
    pub fn byte_level() -> Self {
        let mut tokens: Vec<String> = (0..=255u8).map(|b| format!("<0x{b:02X}>")).collect();
        tokens.extend(SPECIALS.iter().map(|(_, s)| s.to_string()));
        Self { tokens }
    }

    /// Table read back from a checkpoint; must match the byte-level layout.
    pub fn from_table(tokens: Vec<String>) -> Result<Self> {
        let v = Self { tokens };
        if v != Self::byte_level() {
            return Err(Error::Checkpoint(
                "vocabulary table does not match the byte-level layout".into(),
            ));
        }
        Ok(v)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn is_special(id: TokenId) -> bool {
        id >= 256
    }

    pub fn special_name(id: TokenId) -> Option<&'static str> {
        SPECIALS.iter().find(|(i, _)| *i == id).map(|(_, s)| *s)
    }

    /// UTF-8 bytes of `text`, one id per byte.
    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        text.bytes().map(TokenId::from).collect()
    }

    pub fn tokenize_bytes(&self, bytes: &[u8]) -> Vec<TokenId> {
        bytes.iter().map(|b| TokenId::from(*b)).collect()
    }

    /// Raw bytes for `ids`; reserved ids expand to their names.
    pub fn detokenize_bytes(&self, ids: &[TokenId]) -> Vec<u8> {
        let mut bytes = Vec::with_capacity(ids.len());
        for &id in ids {
            if id < 256 {
                bytes.push(id as u8);
            } else if let Some(name) = Self::special_name(id) {
                bytes.extend_from_slice(name.as_bytes());
            }
        }
        bytes
    }

    /// Inverse of [`Vocab::tokenize`]. Invalid UTF-8 is replaced.
    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        String::from_utf8_lossy(&self.detokenize_bytes(ids)).into_owned()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_is_empty() {
        assert!(Vocab::byte_level().tokenize("").is_empty());
    }

    #[test]
    fn specials_are_distinct_and_reserved() {
        let ids = [BOS, IMAGE, USR, VUSR, ASWR, DELIM, PAD];
        for (i, a) in ids.iter().enumerate() {
            assert!(Vocab::is_special(*a));
            for b in &ids[i + 1..] {
                assert_ne!(a, b);
            }
        }
        assert_eq!(Vocab::byte_level().len(), VOCAB_SIZE);
    }

    #[test]
    fn literal_special_strings_stay_bytes() {
        let v = Vocab::byte_level();
        for s in ["[vusr]", "[usr]", "[aswr]", "<o_d>", "<image>", "<s>"] {
            let ids = v.tokenize(s);
            assert!(ids.iter().all(|id| *id < 256), "{s}");
            assert_eq!(v.detokenize(&ids), s);
        }
    }

    #[test]
    fn non_special_ids_round_trip() {
        let v = Vocab::byte_level();
        let ids: Vec<TokenId> = "héllo wörld".bytes().map(TokenId::from).collect();
        assert_eq!(v.tokenize(&v.detokenize(&ids)), ids);
    }
}
