//! Identification networks mapping a window of rows to parameters: the
//! single-row OASIS baseline, Deep Set and Set Transformer.

mod blocks;
mod config;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use blocks::{Isab, Mab, Pma, Sab};
pub use config::{
    Architecture, BlockKind, DeepSetConfig, EncoderLayer, ModelConfig, OasisConfig, SetTransformerConfig,
};

use crate::error::{Error, Result};
use crate::rng::{substream, Rng};
use crate::tensor::{
    Activation, Bound, Checkpoint, DenseLayer, EquivariantLayer, LayerNorm, Mlp, ParamStore, PoolKind, Tape, Tensor,
    Var,
};

/// Per-column affine maps applied to inputs before the network and inverted
/// on its outputs. Part of the checkpoint, not trainable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    pub output_mean: Vec<f64>,
    pub output_std: Vec<f64>,
}

fn mean_std(columns: usize, rows: impl Iterator<Item = Vec<f64>>) -> (Vec<f64>, Vec<f64>) {
    let mut n = 0usize;
    let mut sum = vec![0.0; columns];
    let mut sq = vec![0.0; columns];
    for r in rows {
        n += 1;
        for j in 0..columns {
            sum[j] += r[j];
            sq[j] += r[j] * r[j];
        }
    }
    let n = n.max(1) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| {
            let v = (q / n - m * m).max(0.0).sqrt();
            if v > 1e-12 * (1.0 + m.abs()) {
                v
            } else {
                1.0
            }
        })
        .collect();
    (mean, std)
}

impl Scaling {
    pub fn identity(inputs: usize, outputs: usize) -> Self {
        Self {
            input_mean: vec![0.0; inputs],
            input_std: vec![1.0; inputs],
            output_mean: vec![0.0; outputs],
            output_std: vec![1.0; outputs],
        }
    }

    /// Column statistics over every row of every window and every target.
    /// Constant columns keep unit scale.
    pub fn fit(windows: &[&Tensor], targets: &[&[f64]]) -> Result<Self> {
        let inputs = windows
            .first()
            .map(|w| w.cols())
            .ok_or_else(|| Error::config("no windows to fit scaling on"))?;
        let outputs = targets.first().map(|t| t.len()).unwrap_or(0);
        let (input_mean, input_std) = mean_std(
            inputs,
            windows
                .iter()
                .flat_map(|w| (0..w.rows()).map(move |i| w.row_slice(i).to_vec())),
        );
        let (output_mean, output_std) = mean_std(outputs, targets.iter().map(|t| t.to_vec()));
        Ok(Self {
            input_mean,
            input_std,
            output_mean,
            output_std,
        })
    }

    fn standardize(&self, w: &Tensor, out: &mut Vec<f64>) {
        for i in 0..w.rows() {
            out.extend(
                w.row_slice(i)
                    .iter()
                    .zip(self.input_mean.iter().zip(&self.input_std))
                    .map(|(x, (m, s))| (x - m) / s),
            );
        }
    }
}

#[derive(Clone, Debug)]
enum Net {
    Oasis(Mlp),
    DeepSet(DeepSetNet),
    SetTransformer(SetTransformerNet),
}

#[derive(Clone, Debug)]
enum Encoder {
    Dense(Mlp),
    Equivariant {
        layers: Vec<EquivariantLayer>,
        norms: Vec<Option<LayerNorm>>,
        activation: Activation,
    },
}

#[derive(Clone, Debug)]
struct DeepSetNet {
    encoder: Encoder,
    pool: PoolKind,
    heads: Vec<Mlp>,
}

#[derive(Clone, Debug)]
enum Block {
    Sab(Sab),
    Isab(Isab),
}

#[derive(Clone, Debug)]
struct SetTransformerNet {
    embed: DenseLayer,
    blocks: Vec<Block>,
    project: Option<DenseLayer>,
    pma: Pma,
    decoder_sab: Option<Sab>,
    decoder: Mlp,
}

/// A trained or freshly initialized identification model.
#[derive(Clone, Debug)]
pub struct SetModel {
    config: ModelConfig,
    store: ParamStore,
    net: Net,
    pub scaling: Scaling,
}

fn build_deep_set(store: &mut ParamStore, cfg: &ModelConfig, c: &DeepSetConfig, rng: &mut Rng) -> Result<DeepSetNet> {
    let enc_dims: Vec<usize> = std::iter::once(cfg.inputs()).chain(c.encoder.iter().copied()).collect();
    let encoder = match c.encoder_layer {
        EncoderLayer::Dense => Encoder::Dense(Mlp::new(
            store,
            "encoder",
            &enc_dims,
            c.activation,
            c.activation,
            c.hidden_norm,
            rng,
        )?),
        EncoderLayer::Equivariant => {
            let pool = c.equivariant_pool.unwrap_or(c.pool);
            let mut layers = Vec::new();
            let mut norms = Vec::new();
            for (i, w) in enc_dims.windows(2).enumerate() {
                let name = format!("encoder/layer{i}");
                layers.push(EquivariantLayer::new(
                    store,
                    &name,
                    w[0],
                    w[1],
                    pool,
                    Activation::None,
                    rng,
                )?);
                norms.push(if c.hidden_norm {
                    Some(LayerNorm::new(store, &format!("{name}/norm"), w[1])?)
                } else {
                    None
                });
            }
            Encoder::Equivariant {
                layers,
                norms,
                activation: c.activation,
            }
        }
    };
    let latent = *c.encoder.last().unwrap();
    let per_head = cfg.outputs() / c.heads;
    let dims: Vec<usize> = std::iter::once(latent)
        .chain(c.decoder.iter().copied())
        .chain([per_head])
        .collect();
    let heads = (0..c.heads)
        .map(|h| {
            let prefix = if c.heads == 1 {
                "decoder".to_string()
            } else {
                format!("decoder{h}")
            };
            Mlp::new(
                store,
                &prefix,
                &dims,
                c.activation,
                Activation::None,
                c.hidden_norm,
                rng,
            )
        })
        .collect::<Result<_>>()?;
    Ok(DeepSetNet {
        encoder,
        pool: c.pool,
        heads,
    })
}

fn build_set_transformer(
    store: &mut ParamStore,
    cfg: &ModelConfig,
    c: &SetTransformerConfig,
    rng: &mut Rng,
) -> Result<SetTransformerNet> {
    let (d, pd) = (c.d_model, c.pool_width());
    let mab = |store: &mut ParamStore, name: &str, w: usize, rng: &mut Rng| {
        Mab::new(
            store,
            name,
            w,
            c.heads,
            c.head_dim,
            c.rff_layers,
            c.block_activation,
            c.layer_norm,
            rng,
        )
    };
    let embed = DenseLayer::new(store, "embed", cfg.inputs(), d, Activation::None, rng)?;
    let mut blocks = Vec::new();
    for (i, b) in c.encoder.iter().enumerate() {
        let prefix = format!("encoder/block{i}");
        blocks.push(match *b {
            BlockKind::Sab => Block::Sab(Sab(mab(store, &prefix, d, rng)?)),
            BlockKind::Isab { inducing } => {
                let points = blocks::learnable_rows(store, &format!("{prefix}/inducing"), inducing, d, rng)?;
                Block::Isab(Isab {
                    inducing: points,
                    m: inducing,
                    project: mab(store, &format!("{prefix}/project"), d, rng)?,
                    attend: mab(store, &format!("{prefix}/attend"), d, rng)?,
                })
            }
        });
    }
    let project = if pd != d {
        Some(DenseLayer::new(store, "project", d, pd, Activation::None, rng)?)
    } else {
        None
    };
    let seeds = blocks::learnable_rows(store, "pool/seeds", c.seeds, pd, rng)?;
    let pre = Mlp::new(
        store,
        "pool/rff",
        &vec![pd; c.rff_layers + 1],
        c.activation,
        c.activation,
        false,
        rng,
    )?;
    let pma = Pma {
        seeds,
        k: c.seeds,
        rff: pre,
        mab: mab(store, "pool/mab", pd, rng)?,
    };
    let decoder_sab = if c.decoder_sab {
        Some(Sab(mab(store, "decoder/sab", pd, rng)?))
    } else {
        None
    };
    let dims: Vec<usize> = std::iter::repeat_n(pd, c.decoder_layers + 1)
        .chain([cfg.outputs()])
        .collect();
    let decoder = Mlp::new(store, "decoder/mlp", &dims, c.activation, Activation::None, false, rng)?;
    Ok(SetTransformerNet {
        embed,
        blocks,
        project,
        pma,
        decoder_sab,
        decoder,
    })
}

impl SetModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = substream(config.seed, "model-init");
        let mut store = ParamStore::new();
        let net = match &config.architecture {
            Architecture::Oasis(c) => {
                let dims: Vec<usize> = std::iter::once(config.inputs())
                    .chain(c.hidden.iter().copied())
                    .chain([config.outputs()])
                    .collect();
                Net::Oasis(Mlp::new(
                    &mut store,
                    "mlp",
                    &dims,
                    c.activation,
                    Activation::None,
                    false,
                    &mut rng,
                )?)
            }
            Architecture::DeepSet(c) => Net::DeepSet(build_deep_set(&mut store, &config, c, &mut rng)?),
            Architecture::SetTransformer(c) => {
                Net::SetTransformer(build_set_transformer(&mut store, &config, c, &mut rng)?)
            }
        };
        let scaling = Scaling::identity(config.inputs(), config.outputs());
        Ok(Self {
            config,
            store,
            net,
            scaling,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn param_count(&self) -> usize {
        self.store.count()
    }

    /// Minimum rows per window (1 for set models; exactly 1 for OASIS).
    pub fn single_row(&self) -> bool {
        matches!(self.net, Net::Oasis(_))
    }

    fn check_window(&self, w: &Tensor) -> Result<()> {
        if w.cols() != self.config.inputs() {
            return Err(Error::config(format!(
                "window has {} features, model expects {} ({})",
                w.cols(),
                self.config.inputs(),
                self.config.features.join(", ")
            )));
        }
        if w.rows() == 0 {
            return Err(Error::config("empty window"));
        }
        if self.single_row() && w.rows() != 1 {
            return Err(Error::config(format!("OASIS takes exactly one row, got {}", w.rows())));
        }
        Ok(())
    }

    /// Forward pass over a batch of windows in raw units. Returns
    /// `B × outputs` in raw target units.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, windows: &[&Tensor]) -> Result<Var> {
        if windows.is_empty() {
            return Err(Error::config("empty batch"));
        }
        for w in windows {
            self.check_window(w)?;
        }
        let mut bounds = vec![0];
        let mut stacked = Vec::new();
        for w in windows {
            self.scaling.standardize(w, &mut stacked);
            bounds.push(bounds.last().unwrap() + w.rows());
        }
        let total = *bounds.last().unwrap();
        let x = tape.constant(Tensor::matrix(total, self.config.inputs(), stacked)?);
        let y = match &self.net {
            Net::Oasis(mlp) => mlp.forward(tape, p, x)?,
            Net::DeepSet(net) => net.forward(tape, p, x, &bounds)?,
            Net::SetTransformer(net) => {
                let mut outs = Vec::with_capacity(windows.len());
                for s in 0..windows.len() {
                    let rows: Vec<usize> = (bounds[s]..bounds[s + 1]).collect();
                    let xs = if windows.len() == 1 {
                        x
                    } else {
                        tape.gather_rows(x, &rows)?
                    };
                    outs.push(net.forward(tape, p, xs)?);
                }
                if outs.len() == 1 {
                    outs[0]
                } else {
                    tape.concat_rows(&outs)?
                }
            }
        };
        let b = windows.len();
        let scale = Tensor::matrix(
            b,
            self.config.outputs(),
            (0..b).flat_map(|_| self.scaling.output_std.iter().copied()).collect(),
        )?;
        let scale = tape.constant(scale);
        let shift = tape.constant(Tensor::row(&self.scaling.output_mean));
        let y = tape.mul(y, scale)?;
        tape.add_row(y, shift)
    }

    /// Predictions for one window.
    pub fn predict(&self, window: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.store.bind_frozen(&mut tape);
        let y = self.forward(&mut tape, &p, &[window])?;
        let out = tape.value(y).data().to_vec();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("model produced a non-finite output"));
        }
        Ok(out)
    }

    /// Predictions for several windows, one row each.
    pub fn predict_batch(&self, windows: &[&Tensor]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.store.bind_frozen(&mut tape);
        let y = self.forward(&mut tape, &p, windows)?;
        Ok(tape.value(y).clone())
    }

    /// Output of the per-row encoder of a Deep Set (before pooling).
    pub fn encode_rows(&self, window: &Tensor) -> Result<Tensor> {
        let Net::DeepSet(net) = &self.net else {
            return Err(Error::usage("only Deep Set models expose a per-row encoder"));
        };
        self.check_window(window)?;
        let mut tape = Tape::new();
        let p = self.store.bind_frozen(&mut tape);
        let mut data = Vec::new();
        self.scaling.standardize(window, &mut data);
        let x = tape.constant(Tensor::matrix(window.rows(), window.cols(), data)?);
        let h = net.encode(&mut tape, &p, x, &[0, window.rows()])?;
        Ok(tape.value(h).clone())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::from_store(&self.store, serde_json::to_value(&self.config)?, self.config.seed);
        ck.metadata
            .insert("scaling".into(), serde_json::to_value(&self.scaling)?);
        ck.metadata
            .insert("model".into(), serde_json::json!(self.config.kind()));
        Ok(ck)
    }

    /// Rebuilds the architecture from the embedded configuration and loads
    /// every parameter; nothing is returned unless all of it fits.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: ModelConfig = serde_json::from_value(ck.config.clone())
            .map_err(|e| Error::Incompatible(format!("checkpoint config is not a model config: {e}")))?;
        let mut model = SetModel::new(config)?;
        ck.apply_to(&mut model.store)?;
        if let Some(s) = ck.metadata.get("scaling") {
            let scaling: Scaling = serde_json::from_value(s.clone())
                .map_err(|e| Error::Incompatible(format!("bad scaling block: {e}")))?;
            if scaling.input_mean.len() != model.config.inputs() || scaling.output_mean.len() != model.config.outputs()
            {
                return Err(Error::Incompatible("scaling does not match the model layout".into()));
            }
            model.scaling = scaling;
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

impl DeepSetNet {
    fn encode(&self, tape: &mut Tape, p: &Bound, x: Var, bounds: &[usize]) -> Result<Var> {
        match &self.encoder {
            Encoder::Dense(mlp) => mlp.forward(tape, p, x),
            Encoder::Equivariant {
                layers,
                norms,
                activation,
            } => {
                let mut h = x;
                for (layer, norm) in layers.iter().zip(norms) {
                    h = layer.forward_segments(tape, p, h, bounds)?;
                    if let Some(n) = norm {
                        h = n.forward(tape, p, h)?;
                    }
                    h = activation.apply(tape, h);
                }
                Ok(h)
            }
        }
    }

    fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, bounds: &[usize]) -> Result<Var> {
        let h = self.encode(tape, p, x, bounds)?;
        let pooled = self.pool.apply_segments(tape, h, bounds)?;
        let outs = self
            .heads
            .iter()
            .map(|head| head.forward(tape, p, pooled))
            .collect::<Result<Vec<_>>>()?;
        if outs.len() == 1 {
            Ok(outs[0])
        } else {
            tape.concat_cols(&outs)
        }
    }
}

impl SetTransformerNet {
    /// One set: `n × features → 1 × outputs`.
    fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let mut h = self.embed.forward(tape, p, x)?;
        for b in &self.blocks {
            h = match b {
                Block::Sab(s) => s.forward(tape, p, h)?,
                Block::Isab(s) => s.forward(tape, p, h)?,
            };
        }
        if let Some(proj) = &self.project {
            h = proj.forward(tape, p, h)?;
        }
        let mut z = self.pma.forward(tape, p, h)?;
        if let Some(sab) = &self.decoder_sab {
            z = sab.forward(tape, p, z)?;
        }
        self.decoder.forward(tape, p, z)
    }
}

#[cfg(test)]
mod tests;
