//! Vision side: patch encoder, prototype extractor, and projector.
//!
//! Pipeline order is fixed: `encode → em_cluster → enhance → project`.
//! [`ImageTokens::enhanced`] records whether prototype redistribution has
//! been applied and is checked at each stage.

use autodiff::{Tensor, TensorError, Var};

use crate::config::VisionConfig;
use crate::error::{Error, Result};
use crate::nn::{init_block, init_layer_norm, init_linear, Forward};
use crate::params::{normal, ParamStore};

pub const PATCH_EMBED: &str = "vision.patch_embed";
pub const POS_EMB: &str = "vision.pos_emb";
pub const FINAL_NORM: &str = "vision.ln_f";

pub const CENTERS: &str = "proto.centers";
pub const PROTO_Q: &str = "proto.q";
pub const PROTO_K: &str = "proto.k";
pub const PROTO_K_NORM: &str = "proto.k_norm";
pub const PROTO_V: &str = "proto.v";
pub const PROTO_V_NORM: &str = "proto.v_norm";
pub const PROTO_Z: &str = "proto.z";

pub const PROJ_FC1: &str = "projector.fc1";
pub const PROJ_FC2: &str = "projector.fc2";

const POS_INIT_STD: f64 = 0.5;

pub fn block_prefix(i: usize) -> String {
    format!("vision.blocks.{i}")
}

/// Image token sequence `Z_v: [L_v, d_vision]` on the current tape.
#[derive(Clone, Copy, Debug)]
pub struct ImageTokens {
    pub z: Var,
    /// Set once prototype redistribution has been added.
    pub enhanced: bool,
}

/// Patch encoder standing in for a pretrained ViT.
#[derive(Clone, Debug)]
pub struct VisionTower {
    pub config: VisionConfig,
}

impl VisionTower {
    pub fn new(config: VisionConfig) -> Self {
        Self { config }
    }

    /// Registers encoder parameters; returns the names of its linears.
    pub fn init_params(&self, store: &mut ParamStore, seed: u64) -> Vec<String> {
        let c = &self.config;
        let d = c.d_vision;
        init_linear(store, seed, PATCH_EMBED, c.patch_dim(), d, 1.0);
        store.insert(
            POS_EMB,
            normal(seed, POS_EMB, &[c.num_tokens(), d], POS_INIT_STD),
        );
        let mut linears = vec![PATCH_EMBED.to_string()];
        for i in 0..c.n_layers {
            linears.extend(init_block(store, seed, &block_prefix(i), d, c.mlp_ratio));
        }
        init_layer_norm(store, FINAL_NORM, d);
        linears
    }

    /// Splits `[H, W, C]` pixels into row-major non-overlapping patches,
    /// each flattened in (row, column, channel) order.
    pub fn patchify(&self, pixels: &Tensor) -> Result<Tensor> {
        let c = &self.config;
        let expected = [c.image_size, c.image_size, c.channels];
        if pixels.shape() != expected {
            return Err(TensorError::ShapeMismatch {
                op: "encode_image",
                left: pixels.shape().to_vec(),
                right: expected.to_vec(),
            }
            .into());
        }
        if let Some(bad) = pixels.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("pixel value {bad} outside [0, 1]")));
        }
        let (g, p, ch) = (c.grid(), c.patch_size, c.channels);
        let mut out = Vec::with_capacity(pixels.numel());
        for gy in 0..g {
            for gx in 0..g {
                for py in 0..p {
                    let y = gy * p + py;
                    let start = (y * c.image_size + gx * p) * ch;
                    out.extend_from_slice(&pixels.data()[start..start + p * ch]);
                }
            }
        }
        Ok(Tensor::new(vec![g * g, c.patch_dim()], out)?)
    }

    /// Linear patch embeddings, before positions and attention.
    pub fn patch_embed(&self, fw: &mut Forward, pixels: &Tensor) -> Result<Var> {
        let patches = self.patchify(pixels)?;
        let x = fw.graph.constant(patches);
        fw.linear(PATCH_EMBED, x)
    }

    pub fn encode(&self, fw: &mut Forward, pixels: &Tensor) -> Result<ImageTokens> {
        let x = self.patch_embed(fw, pixels)?;
        let pos = fw.param(POS_EMB)?;
        let mut x = fw.graph.add(x, pos)?;
        for i in 0..self.config.n_layers {
            x = fw.block(&block_prefix(i), x, self.config.n_heads, false)?;
        }
        let z = fw.layer_norm(FINAL_NORM, x)?;
        Ok(ImageTokens { z, enhanced: false })
    }
}

/// Learnable cluster centers with the q/k/v/z transforms around them.
#[derive(Clone, Debug)]
pub struct PrototypeBank {
    pub num_prototypes: usize,
    pub em_iters: usize,
    pub dim: usize,
}

impl PrototypeBank {
    pub fn new(config: &VisionConfig) -> Self {
        Self {
            num_prototypes: config.num_prototypes,
            em_iters: config.em_iters,
            dim: config.d_vision,
        }
    }

    pub fn init_params(&self, store: &mut ParamStore, seed: u64) -> Vec<String> {
        let d = self.dim;
        store.insert(
            CENTERS,
            normal(
                seed,
                CENTERS,
                &[self.num_prototypes, d],
                1.0 / (d as f64).sqrt(),
            ),
        );
        for name in [PROTO_Q, PROTO_K, PROTO_V, PROTO_Z] {
            init_linear(store, seed, name, d, d, 1.0);
        }
        init_layer_norm(store, PROTO_K_NORM, d);
        init_layer_norm(store, PROTO_V_NORM, d);
        [PROTO_Q, PROTO_K, PROTO_V, PROTO_Z]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }

    /// Soft EM over image tokens. Each iteration computes the assignment map
    /// `M = softmax_tokens(q(C)·k(Z)ᵀ)` and the refined centers `C = M·v(Z)`,
    /// with `k` and `v` followed by layer norms. Returns the last map
    /// `[K, L_v]` and the refined centers `[K, d]`; stored centers are only
    /// the initialization.
    pub fn em_cluster(&self, fw: &mut Forward, tokens: &ImageTokens) -> Result<(Var, Var)> {
        if tokens.enhanced {
            return Err(Error::Pipeline(
                "em_cluster expects tokens before prototype redistribution".into(),
            ));
        }
        let k = fw.linear(PROTO_K, tokens.z)?;
        let k = fw.layer_norm(PROTO_K_NORM, k)?;
        let v = fw.linear(PROTO_V, tokens.z)?;
        let v = fw.layer_norm(PROTO_V_NORM, v)?;
        let mut centers = fw.param(CENTERS)?;
        let mut assign = None;
        for _ in 0..self.em_iters {
            let q = fw.linear(PROTO_Q, centers)?;
            let logits = fw.graph.matmul_nt(q, k)?;
            let m = fw.graph.softmax(logits, 1)?;
            centers = fw.graph.matmul(m, v)?;
            assign = Some(m);
        }
        let assign = assign.ok_or_else(|| Error::Config("em_iters must be at least 1".into()))?;
        Ok((assign, centers))
    }

    /// Adds `z((1/K)·Σ_j cos(C_j, Z_i)·C_j)` to every token `Z_i`.
    pub fn enhance(
        &self,
        fw: &mut Forward,
        tokens: &ImageTokens,
        centers: Var,
    ) -> Result<ImageTokens> {
        if tokens.enhanced {
            return Err(Error::Pipeline("tokens are already enhanced".into()));
        }
        let (k, _) = fw.graph.value(centers).dims2()?;
        let sim = fw.graph.cosine_matrix(tokens.z, centers)?;
        let mixed = fw.graph.matmul(sim, centers)?;
        let mixed = fw.graph.scale(mixed, 1.0 / k as f64)?;
        let delta = fw.linear(PROTO_Z, mixed)?;
        let z = fw.graph.add(tokens.z, delta)?;
        Ok(ImageTokens { z, enhanced: true })
    }
}

/// Two-layer projector from vision width to language-model width.
#[derive(Clone, Debug)]
pub struct Projector {
    pub d_vision: usize,
    pub d_model: usize,
}

impl Projector {
    pub fn init_params(&self, store: &mut ParamStore, seed: u64) -> Vec<String> {
        init_linear(store, seed, PROJ_FC1, self.d_vision, self.d_model, 1.0);
        init_linear(store, seed, PROJ_FC2, self.d_model, self.d_model, 1.0);
        vec![PROJ_FC1.to_string(), PROJ_FC2.to_string()]
    }

    /// `H_v = fc2(gelu(fc1(Z_v)))`. Requires enhanced tokens.
    pub fn project(&self, fw: &mut Forward, tokens: &ImageTokens) -> Result<Var> {
        if !tokens.enhanced {
            return Err(Error::Pipeline(
                "project expects tokens after prototype redistribution".into(),
            ));
        }
        let h = fw.linear(PROJ_FC1, tokens.z)?;
        let h = fw.graph.gelu(h)?;
        fw.linear(PROJ_FC2, h)
    }
}
