//! Binary record file.
//!
//! ```text
//! "SQRD" | u32 version | u32 count
//! per record: u32 id_len | id bytes | u32 n | n × u32 id | ceil(n/8) mask bytes (LSB first)
//! ```
//! All integers little-endian.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use super::template::TurnSequence;
use crate::error::{Error, Result};
use crate::vocab::{TokenId, Vocab};

const MAGIC: &[u8; 4] = b"SQRD";
pub const RECORDS_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub id: String,
    pub token_ids: Vec<TokenId>,
    pub loss_mask: Vec<bool>,
}

impl From<&TurnSequence> for Record {
    fn from(s: &TurnSequence) -> Self {
        Self {
            id: s.id.clone(),
            token_ids: s.token_ids.clone(),
            loss_mask: s.loss_mask.clone(),
        }
    }
}

pub fn pack_mask(mask: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; mask.len().div_ceil(8)];
    for (i, m) in mask.iter().enumerate() {
        if *m {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

pub fn unpack_mask(bytes: &[u8], n: usize) -> Vec<bool> {
    (0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect()
}

pub fn encode(records: &[Record]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&RECORDS_VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        out.extend_from_slice(&(r.id.len() as u32).to_le_bytes());
        out.extend_from_slice(r.id.as_bytes());
        out.extend_from_slice(&(r.token_ids.len() as u32).to_le_bytes());
        for id in &r.token_ids {
            out.extend_from_slice(&id.to_le_bytes());
        }
        out.extend_from_slice(&pack_mask(&r.loss_mask));
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| Error::Format("record file is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Record>> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Format("not a record file".into()));
    }
    let version = c.u32()?;
    if version != RECORDS_VERSION {
        return Err(Error::Format(format!(
            "unsupported record file version {version}"
        )));
    }
    let count = c.u32()? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let id_len = c.u32()? as usize;
        let id = String::from_utf8(c.take(id_len)?.to_vec())
            .map_err(|_| Error::Format("record id is not UTF-8".into()))?;
        let n = c.u32()? as usize;
        let mut token_ids = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            token_ids.push(c.u32()?);
        }
        let loss_mask = unpack_mask(c.take(n.div_ceil(8))?, n);
        records.push(Record {
            id,
            token_ids,
            loss_mask,
        });
    }
    if c.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after last record".into()));
    }
    Ok(records)
}

pub fn write(path: &Path, records: &[Record]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode(records))
        .map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Vec<Record>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

fn token_label(vocab: &Vocab, id: TokenId) -> String {
    match Vocab::special_name(id) {
        Some(name) => name.to_string(),
        None if (0x20..0x7f).contains(&id) => format!("{:?}", id as u8 as char),
        None => vocab
            .tokens()
            .get(id as usize)
            .cloned()
            .unwrap_or_else(|| format!("#{id}")),
    }
}

/// One line per token: position, id, mask bit, span, label.
pub fn debug_dump(seqs: &[TurnSequence], vocab: &Vocab) -> String {
    let mut out = String::new();
    for s in seqs {
        let _ = writeln!(
            out,
            "# {} ({} tokens, {} masked)",
            s.id,
            s.len(),
            s.masked_count()
        );
        for (i, (id, m)) in s.token_ids.iter().zip(&s.loss_mask).enumerate() {
            let span = s
                .span_at(i)
                .map(|sp| match sp.turn {
                    Some(t) => format!("{:?}[{t}]", sp.kind),
                    None => format!("{:?}", sp.kind),
                })
                .unwrap_or_default();
            let _ = writeln!(
                out,
                "{i}\t{id}\t{}\t{span}\t{}",
                *m as u8,
                token_label(vocab, *id)
            );
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_packing_round_trips() {
        for n in 0..20 {
            let mask: Vec<bool> = (0..n).map(|i| i % 3 == 0).collect();
            assert_eq!(unpack_mask(&pack_mask(&mask), n), mask);
        }
        assert_eq!(
            pack_mask(&[true, false, false, false, false, false, false, false, true]),
            vec![1, 1]
        );
    }

    #[test]
    fn records_round_trip() {
        let recs = vec![
            Record {
                id: "a".into(),
                token_ids: vec![256, 1, 2, 262],
                loss_mask: vec![false, true, true, true],
            },
            Record {
                id: "bé".into(),
                token_ids: vec![],
                loss_mask: vec![],
            },
        ];
        let bytes = encode(&recs);
        assert_eq!(&bytes[..4], b"SQRD");
        assert_eq!(decode(&bytes).unwrap(), recs);
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let bytes = encode(&[Record {
            id: "a".into(),
            token_ids: vec![1, 2, 3],
            loss_mask: vec![true; 3],
        }]);
        for cut in 0..bytes.len() {
            assert!(matches!(decode(&bytes[..cut]), Err(Error::Format(_))));
        }
    }
}
