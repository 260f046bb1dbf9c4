//! Low-rank adapters on named linear transforms.
//!
//! An adapter on host `W: [d_out, d_in]` holds `A: [r, d_in]` and
//! `B: [d_out, r]`; the adapted transform is `W·x + (alpha/r)·B·(A·x)`.
//! `B` starts at zero, so attaching never changes the model output.
//! Adapter tensors live in the parameter store as `lora.<target>.A` and
//! `lora.<target>.B`.

use std::collections::BTreeMap;

use autodiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{normal, ParamStore};

/// Standard deviation of the Gaussian used for `A`.
pub const A_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adapter {
    pub target: String,
    pub rank: usize,
    pub alpha: f64,
    pub d_in: usize,
    pub d_out: usize,
}

impl Adapter {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn a_name(&self) -> String {
        a_name(&self.target)
    }

    pub fn b_name(&self) -> String {
        b_name(&self.target)
    }

    pub fn parameter_count(&self) -> usize {
        self.rank * (self.d_in + self.d_out)
    }
}

pub fn a_name(target: &str) -> String {
    format!("lora.{target}.A")
}

pub fn b_name(target: &str) -> String {
    format!("lora.{target}.B")
}

/// Attached adapters keyed by host linear name, plus merge bookkeeping.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdapterSet {
    adapters: BTreeMap<String, Adapter>,
    /// Host weights saved at merge time, restored bit-wise by `unmerge`.
    merged_hosts: Option<BTreeMap<String, Tensor>>,
}

impl AdapterSet {
    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Adapter> {
        self.adapters.values()
    }

    pub fn get(&self, target: &str) -> Option<&Adapter> {
        self.adapters.get(target)
    }

    pub fn is_merged(&self) -> bool {
        self.merged_hosts.is_some()
    }

    pub fn merged_hosts(&self) -> Option<&BTreeMap<String, Tensor>> {
        self.merged_hosts.as_ref()
    }

    /// Adapter that must be applied in the forward pass, if any.
    pub fn active(&self, target: &str) -> Option<&Adapter> {
        if self.is_merged() {
            None
        } else {
            self.adapters.get(target)
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.adapters.values().map(Adapter::parameter_count).sum()
    }

    /// Rebuilds a set from stored metadata (checkpoint load).
    pub fn from_parts(
        adapters: Vec<Adapter>,
        merged_hosts: Option<BTreeMap<String, Tensor>>,
    ) -> Self {
        Self {
            adapters: adapters
                .into_iter()
                .map(|a| (a.target.clone(), a))
                .collect(),
            merged_hosts,
        }
    }

    /// Attaches one adapter per target. Every target must name an existing
    /// linear transform (`<target>.weight` in `params`).
    pub fn attach(
        &mut self,
        params: &mut ParamStore,
        targets: &[String],
        rank: usize,
        alpha: f64,
        seed: u64,
    ) -> Result<()> {
        if self.is_merged() {
            return Err(Error::State("cannot attach adapters while merged".into()));
        }
        if rank == 0 {
            return Err(Error::Config("adapter rank must be positive".into()));
        }
        // Validate everything first so a bad list attaches nothing.
        let mut shapes = Vec::with_capacity(targets.len());
        for t in targets {
            let host = params
                .get(&format!("{t}.weight"))
                .map_err(|_| Error::Config(format!("unknown adapter target `{t}`")))?;
            let (d_out, d_in) = host.dims2()?;
            if self.adapters.contains_key(t) {
                return Err(Error::Config(format!("adapter already attached to `{t}`")));
            }
            shapes.push((t.clone(), d_in, d_out));
        }
        for (target, d_in, d_out) in shapes {
            let adapter = Adapter {
                target: target.clone(),
                rank,
                alpha,
                d_in,
                d_out,
            };
            params.insert(
                adapter.a_name(),
                normal(seed, &adapter.a_name(), &[rank, d_in], A_INIT_STD),
            );
            params.insert(adapter.b_name(), Tensor::zeros(&[d_out, rank]));
            self.adapters.insert(target, adapter);
        }
        Ok(())
    }

    /// Folds every adapter into its host: `W ← W + (alpha/r)·B·A`.
    pub fn merge(&mut self, params: &mut ParamStore) -> Result<()> {
        if self.is_merged() {
            return Err(Error::State("adapters are already merged".into()));
        }
        if self.adapters.is_empty() {
            return Err(Error::State("no adapters attached".into()));
        }
        let mut saved = BTreeMap::new();
        for adapter in self.adapters.values() {
            let delta = delta(adapter, params)?;
            let host = params.get_mut(&format!("{}.weight", adapter.target))?;
            saved.insert(adapter.target.clone(), host.clone());
            for (w, d) in host.data_mut().iter_mut().zip(&delta) {
                *w += d;
            }
        }
        self.merged_hosts = Some(saved);
        Ok(())
    }

    /// Restores the pre-merge host weights exactly and re-enables the adapters.
    pub fn unmerge(&mut self, params: &mut ParamStore) -> Result<()> {
        let saved = self
            .merged_hosts
            .take()
            .ok_or_else(|| Error::State("adapters are not merged".into()))?;
        for (target, weight) in saved {
            let host = params.get_mut(&format!("{target}.weight"))?;
            let rg = host.requires_grad();
            *host = weight.with_requires_grad(rg);
        }
        Ok(())
    }
}

/// Dense `(alpha/r)·B·A` in the host's `[d_out, d_in]` layout.
pub fn delta(adapter: &Adapter, params: &ParamStore) -> Result<Vec<f64>> {
    let a = params.get(&adapter.a_name())?;
    let b = params.get(&adapter.b_name())?;
    let (r, d_in, d_out) = (adapter.rank, adapter.d_in, adapter.d_out);
    let scale = adapter.scale();
    let mut out = vec![0.0; d_out * d_in];
    for o in 0..d_out {
        for k in 0..r {
            let bk = b.data()[o * r + k] * scale;
            if bk == 0.0 {
                continue;
            }
            let arow = &a.data()[k * d_in..(k + 1) * d_in];
            for (dst, av) in out[o * d_in..(o + 1) * d_in].iter_mut().zip(arow) {
                *dst += bk * av;
            }
        }
    }
    Ok(out)
}
