//! Binary checkpoint.
//!
//! ```text
//! "SQCK" | u32 version
//! config snapshot        u32 len | JSON {"model": .., "plan": ..}
//! u64 model seed | u64 completed steps
//! vocab                  u32 count | (u32 len | bytes)*
//! tensors                u32 count | (name | u32 ndim | u64 dims* | f64 data*)*
//! adapters               u32 count | (target | u64 rank | f64 alpha | u64 d_in | u64 d_out)*
//! merged hosts           u8 flag | [u32 count | (name | tensor)*]
//! optimizer              u64 t | moments m | moments v, each u32 count | (name | u64 len | f64*)*
//! ```
//! Names are `u32 len | UTF-8 bytes`; everything is little-endian. Tables
//! are written in name order, so equal states always encode to equal bytes.
//! The data order is a function of the plan seed and the step counter, so no
//! generator state needs to be stored.

use std::collections::BTreeMap;
use std::path::Path;

use autodiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::lora::{Adapter, AdapterSet};
use crate::model::SqLlava;
use crate::params::ParamStore;
use crate::trainer::{OptState, TrainPlan};
use crate::vocab::Vocab;

const MAGIC: &[u8; 4] = b"SQCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Snapshot {
    model: ModelConfig,
    plan: Option<TrainPlan>,
}

/// Everything needed to continue a run.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: SqLlava,
    pub plan: Option<TrainPlan>,
    pub step: usize,
    pub opt: OptState,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len());
        self.0.extend_from_slice(b);
    }
    fn tensor(&mut self, t: &Tensor) {
        self.u32(t.shape().len());
        for d in t.shape() {
            self.u64(*d as u64);
        }
        self.f64s(t.data());
    }
    fn vectors(&mut self, table: &BTreeMap<String, Vec<f64>>) {
        self.u32(table.len());
        for (name, v) in table {
            self.bytes(name.as_bytes());
            self.u64(v.len() as u64);
            self.f64s(v);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("file is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
    fn len64(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflows".into()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Checkpoint("length overflows".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("name is not UTF-8".into()))
    }
    fn tensor(&mut self) -> Result<Tensor> {
        let ndim = self.u32()?;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(self.len64()?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, d| a.checked_mul(*d))
            .ok_or_else(|| Error::Checkpoint("tensor size overflows".into()))?;
        let data = self.f64s(n)?;
        Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))
    }
    fn vectors(&mut self) -> Result<BTreeMap<String, Vec<f64>>> {
        let count = self.u32()?;
        let mut out = BTreeMap::new();
        for _ in 0..count {
            let name = self.string()?;
            let n = self.len64()?;
            out.insert(name, self.f64s(n)?);
        }
        Ok(out)
    }
}

pub fn encode(model: &SqLlava, plan: Option<&TrainPlan>, step: usize, opt: &OptState) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(CHECKPOINT_VERSION as usize);
    let snapshot = Snapshot {
        model: model.config.clone(),
        plan: plan.cloned(),
    };
    w.bytes(
        serde_json::to_string(&snapshot)
            .expect("config serializes")
            .as_bytes(),
    );
    w.u64(model.seed);
    w.u64(step as u64);
    w.u32(model.vocab.len());
    for tok in model.vocab.tokens() {
        w.bytes(tok.as_bytes());
    }
    w.u32(model.params.len());
    for (name, t) in model.params.iter() {
        w.bytes(name.as_bytes());
        w.tensor(t);
    }
    w.u32(model.adapters.len());
    for a in model.adapters.iter() {
        w.bytes(a.target.as_bytes());
        w.u64(a.rank as u64);
        w.f64s(&[a.alpha]);
        w.u64(a.d_in as u64);
        w.u64(a.d_out as u64);
    }
    match model.adapters.merged_hosts() {
        None => w.u8(0),
        Some(hosts) => {
            w.u8(1);
            w.u32(hosts.len());
            for (name, t) in hosts {
                w.bytes(name.as_bytes());
                w.tensor(t);
            }
        }
    }
    w.u64(opt.t);
    w.vectors(&opt.m);
    w.vectors(&opt.v);
    w.0
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = r.u32()? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let n = r.u32()?;
    let snapshot: Snapshot = serde_json::from_slice(r.take(n)?)
        .map_err(|e| Error::Checkpoint(format!("config snapshot: {e}")))?;
    let seed = r.u64()?;
    let step = r.len64()?;
    let vocab_len = r.u32()?;
    let mut tokens = Vec::with_capacity(vocab_len.min(1 << 16));
    for _ in 0..vocab_len {
        tokens.push(r.string()?);
    }
    let vocab = Vocab::from_table(tokens)?;
    let mut params = ParamStore::new();
    for _ in 0..r.u32()? {
        let name = r.string()?;
        params.insert(name, r.tensor()?);
    }
    let mut adapters = Vec::new();
    for _ in 0..r.u32()? {
        let target = r.string()?;
        let rank = r.len64()?;
        let alpha = r.f64s(1)?[0];
        let d_in = r.len64()?;
        let d_out = r.len64()?;
        adapters.push(Adapter {
            target,
            rank,
            alpha,
            d_in,
            d_out,
        });
    }
    let merged = match r.u8()? {
        0 => None,
        1 => {
            let mut hosts = BTreeMap::new();
            for _ in 0..r.u32()? {
                let name = r.string()?;
                hosts.insert(name, r.tensor()?);
            }
            Some(hosts)
        }
        f => return Err(Error::Checkpoint(format!("bad merge flag {f}"))),
    };
    let t = r.u64()?;
    let m = r.vectors()?;
    let v = r.vectors()?;
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    let adapters = AdapterSet::from_parts(adapters, merged);
    let model = SqLlava::from_parts(snapshot.model, seed, params, adapters, vocab)?;
    Ok(Checkpoint {
        model,
        plan: snapshot.plan,
        step,
        opt: OptState { t, m, v },
    })
}

pub fn save(
    path: &Path,
    model: &SqLlava,
    plan: Option<&TrainPlan>,
    step: usize,
    opt: &OptState,
) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, encode(model, plan, step, opt)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
