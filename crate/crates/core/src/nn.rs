//! Shared layers recorded on a tape: adapted linear, layer norm, and the
//! pre-norm transformer block used by both towers.

use autodiff::{Graph, Var};

use crate::error::Result;
use crate::lora::{self, AdapterSet};
use crate::params::{normal, ParamStore};
use autodiff::Tensor;

/// A forward pass in progress: the tape plus read-only model weights.
pub struct Forward<'m> {
    pub graph: Graph,
    params: &'m ParamStore,
    adapters: &'m AdapterSet,
}

impl<'m> Forward<'m> {
    pub fn new(params: &'m ParamStore, adapters: &'m AdapterSet) -> Self {
        Self {
            graph: Graph::new(),
            params,
            adapters,
        }
    }

    pub fn params(&self) -> &'m ParamStore {
        self.params
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        let t = self.params.get(name)?;
        Ok(self.graph.param(name, t))
    }

    /// `x·Wᵀ + b`, plus the low-rank branch when an adapter is active on `name`.
    pub fn linear(&mut self, name: &str, x: Var) -> Result<Var> {
        let w = self.param(&format!("{name}.weight"))?;
        let b = self.param(&format!("{name}.bias"))?;
        let y = self.graph.matmul_nt(x, w)?;
        let mut y = self.graph.add_row(y, b)?;
        if let Some(adapter) = self.adapters.active(name) {
            let a = self.param(&lora::a_name(name))?;
            let bb = self.param(&lora::b_name(name))?;
            let down = self.graph.matmul_nt(x, a)?;
            let up = self.graph.matmul_nt(down, bb)?;
            let up = self.graph.scale(up, adapter.scale())?;
            y = self.graph.add(y, up)?;
        }
        Ok(y)
    }

    pub fn layer_norm(&mut self, name: &str, x: Var) -> Result<Var> {
        let g = self.param(&format!("{name}.gain"))?;
        let b = self.param(&format!("{name}.bias"))?;
        Ok(self.graph.layer_norm(x, g, b)?)
    }

    /// Multi-head self-attention over the rows of `x`.
    pub fn attention(&mut self, prefix: &str, x: Var, n_heads: usize, causal: bool) -> Result<Var> {
        let q = self.linear(&format!("{prefix}.q"), x)?;
        let k = self.linear(&format!("{prefix}.k"), x)?;
        let v = self.linear(&format!("{prefix}.v"), x)?;
        let (_, d) = self.graph.value(q).dims2()?;
        let head = d / n_heads;
        let scale = 1.0 / (head as f64).sqrt();
        let mut outs = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let qh = self.graph.slice_cols(q, h * head, head)?;
            let kh = self.graph.slice_cols(k, h * head, head)?;
            let vh = self.graph.slice_cols(v, h * head, head)?;
            let s = self.graph.matmul_nt(qh, kh)?;
            let s = self.graph.scale(s, scale)?;
            let p = if causal {
                self.graph.causal_softmax(s)?
            } else {
                self.graph.softmax(s, 1)?
            };
            outs.push(self.graph.matmul(p, vh)?);
        }
        let o = if outs.len() == 1 {
            outs[0]
        } else {
            self.graph.concat_cols(&outs)?
        };
        self.linear(&format!("{prefix}.o"), o)
    }

    /// Pre-norm block: `x + attn(ln1(x))`, then `x + mlp(ln2(x))`.
    pub fn block(&mut self, prefix: &str, x: Var, n_heads: usize, causal: bool) -> Result<Var> {
        let h = self.layer_norm(&format!("{prefix}.ln1"), x)?;
        let a = self.attention(&format!("{prefix}.attn"), h, n_heads, causal)?;
        let x = self.graph.add(x, a)?;
        let h = self.layer_norm(&format!("{prefix}.ln2"), x)?;
        let h = self.linear(&format!("{prefix}.mlp.fc1"), h)?;
        let h = self.graph.gelu(h)?;
        let h = self.linear(&format!("{prefix}.mlp.fc2"), h)?;
        Ok(self.graph.add(x, h)?)
    }
}

/// Registers `name.weight: [d_out, d_in]` with std `gain/sqrt(d_in)` and a zero bias.
pub fn init_linear(
    store: &mut ParamStore,
    seed: u64,
    name: &str,
    d_in: usize,
    d_out: usize,
    gain: f64,
) {
    let w = format!("{name}.weight");
    store.insert(
        w.clone(),
        normal(seed, &w, &[d_out, d_in], gain / (d_in as f64).sqrt()),
    );
    store.insert(format!("{name}.bias"), Tensor::zeros(&[d_out]));
}

pub fn init_layer_norm(store: &mut ParamStore, name: &str, d: usize) {
    store.insert(format!("{name}.gain"), Tensor::full(&[d], 1.0));
    store.insert(format!("{name}.bias"), Tensor::zeros(&[d]));
}

/// Parameters of one transformer block; returns the names of its linears.
pub fn init_block(
    store: &mut ParamStore,
    seed: u64,
    prefix: &str,
    d: usize,
    mlp_ratio: usize,
) -> Vec<String> {
    init_layer_norm(store, &format!("{prefix}.ln1"), d);
    init_layer_norm(store, &format!("{prefix}.ln2"), d);
    let mut linears = Vec::new();
    for p in ["q", "k", "v", "o"] {
        let name = format!("{prefix}.attn.{p}");
        init_linear(store, seed, &name, d, d, 1.0);
        linears.push(name);
    }
    let fc1 = format!("{prefix}.mlp.fc1");
    let fc2 = format!("{prefix}.mlp.fc2");
    init_linear(store, seed, &fc1, d, d * mlp_ratio, 1.0);
    init_linear(store, seed, &fc2, d * mlp_ratio, d, 1.0);
    linears.push(fc1);
    linears.push(fc2);
    linears
}
