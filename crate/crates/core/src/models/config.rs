use serde::{Deserialize, Serialize};

use super::blocks::Mab;
use crate::error::{Error, Result};
use crate::tensor::{Activation, DenseLayer, EquivariantLayer, Mlp, MultiHeadAttention, PoolKind};

/// Model architecture plus the input/output layout it was built for.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Input column names, in order.
    pub features: Vec<String>,
    /// Output names, in order.
    pub targets: Vec<String>,
    pub seed: u64,
    pub architecture: Architecture,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Architecture {
    Oasis(OasisConfig),
    DeepSet(DeepSetConfig),
    SetTransformer(SetTransformerConfig),
}

/// Single-row MLP baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OasisConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderLayer {
    /// Per-row dense layers.
    #[default]
    Dense,
    /// Permutation-equivariant layers mixing in a pooled summary.
    Equivariant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeepSetConfig {
    /// Encoder layer widths; every encoder layer is activated.
    pub encoder: Vec<usize>,
    #[serde(default)]
    pub encoder_layer: EncoderLayer,
    /// Pool used inside equivariant layers; defaults to `pool`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub equivariant_pool: Option<PoolKind>,
    pub pool: PoolKind,
    /// Hidden widths of each decoder head; a linear output layer follows.
    pub decoder: Vec<usize>,
    pub activation: Activation,
    /// Number of parallel decoder heads sharing the encoder. Outputs are
    /// split evenly between heads.
    #[serde(default = "one")]
    pub heads: usize,
    /// Layer-normalize every activated layer before its activation.
    #[serde(default)]
    pub hidden_norm: bool,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "block", rename_all = "kebab-case")]
pub enum BlockKind {
    Sab,
    Isab { inducing: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetTransformerConfig {
    pub d_model: usize,
    pub heads: usize,
    /// Per-head width. Required when `d_model` is not divisible by `heads`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_dim: Option<usize>,
    pub encoder: Vec<BlockKind>,
    /// Dense layers in each block's row-wise feed-forward part.
    pub rff_layers: usize,
    /// Activation of the pooling rFF and the decoder.
    pub activation: Activation,
    /// Activation inside each attention block's rFF; linear by default.
    #[serde(default)]
    pub block_activation: Activation,
    /// Width after the encoder; a linear projection is inserted when it
    /// differs from `d_model`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool_dim: Option<usize>,
    #[serde(default = "one")]
    pub seeds: usize,
    #[serde(default = "yes")]
    pub decoder_sab: bool,
    /// Hidden layers (of width `pool_dim`) before the output layer.
    pub decoder_layers: usize,
    #[serde(default = "yes")]
    pub layer_norm: bool,
}

impl SetTransformerConfig {
    pub fn pool_width(&self) -> usize {
        self.pool_dim.unwrap_or(self.d_model)
    }
}

impl ModelConfig {
    pub fn inputs(&self) -> usize {
        self.features.len()
    }

    pub fn outputs(&self) -> usize {
        self.targets.len()
    }

    pub fn kind(&self) -> &'static str {
        match self.architecture {
            Architecture::Oasis(_) => "oasis",
            Architecture::DeepSet(_) => "deep-set",
            Architecture::SetTransformer(_) => "set-transformer",
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.inputs() == 0 || self.outputs() == 0 {
            return Err(Error::config("model needs at least one feature and one target"));
        }
        match &self.architecture {
            Architecture::Oasis(c) => {
                if c.hidden.contains(&0) {
                    return Err(Error::config("layer widths must be positive"));
                }
            }
            Architecture::DeepSet(c) => {
                if c.encoder.is_empty() || c.encoder.iter().chain(&c.decoder).any(|&w| w == 0) {
                    return Err(Error::config("Deep Set needs a non-empty encoder with positive widths"));
                }
                if c.heads == 0 || !self.outputs().is_multiple_of(c.heads) {
                    return Err(Error::config(format!(
                        "{} outputs cannot be split across {} heads",
                        self.outputs(),
                        c.heads
                    )));
                }
            }
            Architecture::SetTransformer(c) => {
                MultiHeadAttention::resolve_head_dim(c.d_model, c.heads, c.head_dim)?;
                MultiHeadAttention::resolve_head_dim(c.pool_width(), c.heads, c.head_dim)?;
                if c.d_model == 0 || c.pool_width() == 0 || c.seeds == 0 {
                    return Err(Error::config("attention widths and seed count must be positive"));
                }
                if c.seeds != 1 {
                    return Err(Error::config("only a single pooling seed is supported"));
                }
                if c.encoder.iter().any(|b| matches!(b, BlockKind::Isab { inducing: 0 })) {
                    return Err(Error::config("ISAB needs at least one inducing point"));
                }
            }
        }
        Ok(())
    }

    /// Trainable parameter count, computed from the configuration alone.
    pub fn param_count(&self) -> Result<usize> {
        self.validate()?;
        let (fi, fo) = (self.inputs(), self.outputs());
        Ok(match &self.architecture {
            Architecture::Oasis(c) => {
                let dims: Vec<usize> = std::iter::once(fi)
                    .chain(c.hidden.iter().copied())
                    .chain([fo])
                    .collect();
                Mlp::param_count(&dims, Activation::None, false)
            }
            Architecture::DeepSet(c) => {
                let enc_dims: Vec<usize> = std::iter::once(fi).chain(c.encoder.iter().copied()).collect();
                let encoder = match c.encoder_layer {
                    EncoderLayer::Dense => Mlp::param_count(&enc_dims, c.activation, c.hidden_norm),
                    EncoderLayer::Equivariant => enc_dims
                        .windows(2)
                        .map(|w| EquivariantLayer::param_count(w[0], w[1]) + if c.hidden_norm { 2 * w[1] } else { 0 })
                        .sum(),
                };
                let latent = *c.encoder.last().unwrap();
                let head_dims: Vec<usize> = std::iter::once(latent)
                    .chain(c.decoder.iter().copied())
                    .chain([fo / c.heads])
                    .collect();
                encoder + c.heads * Mlp::param_count(&head_dims, Activation::None, c.hidden_norm)
            }
            Architecture::SetTransformer(c) => {
                let (d, pd) = (c.d_model, c.pool_width());
                let mab = |w: usize| -> Result<usize> {
                    let hd = MultiHeadAttention::resolve_head_dim(w, c.heads, c.head_dim)?;
                    Ok(Mab::param_count(w, c.heads, hd, c.rff_layers, c.layer_norm))
                };
                let mut n = DenseLayer::param_count(fi, d);
                for b in &c.encoder {
                    n += match b {
                        BlockKind::Sab => mab(d)?,
                        BlockKind::Isab { inducing } => inducing * d + 2 * mab(d)?,
                    };
                }
                if pd != d {
                    n += DenseLayer::param_count(d, pd);
                }
                n += c.seeds * pd + Mlp::param_count(&vec![pd; c.rff_layers + 1], c.activation, false) + mab(pd)?;
                if c.decoder_sab {
                    n += mab(pd)?;
                }
                n + c.decoder_layers * DenseLayer::param_count(pd, pd) + DenseLayer::param_count(pd, fo)
            }
        })
    }
}

fn names(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

/// Architectures of the three applications. Feature and target names fix
/// the input and output layouts.
impl ModelConfig {
    /// Single-row baseline for local Lotka–Volterra identification: two
    /// hidden layers.
    pub fn oasis(features: Vec<String>, targets: Vec<String>, seed: u64) -> Self {
        Self {
            features,
            targets,
            seed,
            architecture: Architecture::Oasis(OasisConfig {
                hidden: vec![256, 256],
                activation: Activation::Relu,
            }),
        }
    }

    /// Deep Set for local identification: 3×256 ReLU encoder, mean pool and
    /// one 3×256 decoder head per state equation.
    pub fn local_deep_set(features: Vec<String>, targets: Vec<String>, equations: usize, seed: u64) -> Self {
        Self {
            features,
            targets,
            seed,
            architecture: Architecture::DeepSet(DeepSetConfig {
                encoder: vec![256; 3],
                encoder_layer: EncoderLayer::Dense,
                equivariant_pool: None,
                pool: PoolKind::Mean,
                decoder: vec![256; 3],
                activation: Activation::Relu,
                heads: equations,
                hidden_norm: false,
            }),
        }
    }

    /// Lorenz Deep Set: 5×320 ReLU encoder, abs-mean pool, 5×320 decoder.
    pub fn lorenz_deep_set(seed: u64) -> Self {
        Self {
            features: names(&["t", "x", "y", "z"]),
            targets: names(&["sigma", "rho", "beta"]),
            seed,
            architecture: Architecture::DeepSet(DeepSetConfig {
                encoder: vec![320; 5],
                encoder_layer: EncoderLayer::Dense,
                equivariant_pool: None,
                pool: PoolKind::AbsMean,
                decoder: vec![320; 5],
                activation: Activation::Relu,
                heads: 1,
                hidden_norm: false,
            }),
        }
    }

    /// Lorenz Set Transformer: embedding to 45, ISAB with 128 inducing
    /// points and 40 heads of width 37, projection to 40, single-seed
    /// pooling, a decoder SAB and a 2×40 ReLU head.
    pub fn lorenz_set_transformer(seed: u64) -> Self {
        Self {
            features: names(&["t", "x", "y", "z"]),
            targets: names(&["sigma", "rho", "beta"]),
            seed,
            architecture: Architecture::SetTransformer(SetTransformerConfig {
                d_model: 45,
                heads: 40,
                head_dim: Some(37),
                encoder: vec![BlockKind::Isab { inducing: 128 }],
                rff_layers: 2,
                activation: Activation::Relu,
                block_activation: Activation::None,
                pool_dim: Some(40),
                seeds: 1,
                decoder_sab: true,
                decoder_layers: 2,
                layer_norm: true,
            }),
        }
    }

    /// Heat-probe Deep Set over `(z, t, T)` rows of both probes: 5×256 GELU
    /// encoder with layer norm, sum pool,
    /// three 5×256 heads for `[G, ratio, α_ref]`.
    pub fn heat_deep_set(seed: u64) -> Self {
        Self {
            features: names(&["z", "t", "T"]),
            targets: names(&["G", "ratio", "alpha_ref"]),
            seed,
            architecture: Architecture::DeepSet(DeepSetConfig {
                encoder: vec![256; 5],
                encoder_layer: EncoderLayer::Dense,
                equivariant_pool: None,
                pool: PoolKind::Sum,
                decoder: vec![256; 5],
                activation: Activation::Gelu,
                heads: 3,
                hidden_norm: true,
            }),
        }
    }
}
