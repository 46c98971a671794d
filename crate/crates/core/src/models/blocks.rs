//! Attention blocks of the Set Transformer.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{
    Activation, Bound, LayerNorm, Mlp, MultiHeadAttention, ParamId, ParamKind, ParamStore, Tape, Tensor, Var,
};

/// Learnable `rows × d` matrix (inducing points or pooling seeds), uniform in
/// `±1/√d`.
pub(crate) fn learnable_rows(
    store: &mut ParamStore,
    name: &str,
    rows: usize,
    d: usize,
    rng: &mut Rng,
) -> Result<ParamId> {
    let b = 1.0 / (d as f64).sqrt();
    let data = (0..rows * d).map(|_| rng.gen_range(-b..b)).collect();
    store.add(name, Tensor::matrix(rows, d, data)?, ParamKind::Embedding)
}

/// `H = norm(X + MHA(X, Y, Y))`, `MAB(X, Y) = norm(H + rFF(H))`. The
/// row-wise feed-forward part is linear unless `rff_activation` is set, in
/// which case every layer but the last is activated.
#[derive(Clone, Debug)]
pub struct Mab {
    pub attention: MultiHeadAttention,
    pub rff: Mlp,
    pub norm1: Option<LayerNorm>,
    pub norm2: Option<LayerNorm>,
    pub d: usize,
}

impl Mab {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        heads: usize,
        head_dim: Option<usize>,
        rff_layers: usize,
        rff_activation: Activation,
        layer_norm: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let attention = MultiHeadAttention::new(store, &format!("{prefix}/attention"), d, heads, head_dim, rng)?;
        let rff = Mlp::new(
            store,
            &format!("{prefix}/rff"),
            &vec![d; rff_layers + 1],
            rff_activation,
            Activation::None,
            false,
            rng,
        )?;
        let (norm1, norm2) = if layer_norm {
            (
                Some(LayerNorm::new(store, &format!("{prefix}/norm1"), d)?),
                Some(LayerNorm::new(store, &format!("{prefix}/norm2"), d)?),
            )
        } else {
            (None, None)
        };
        Ok(Self {
            attention,
            rff,
            norm1,
            norm2,
            d,
        })
    }

    pub fn param_count(d: usize, heads: usize, head_dim: usize, rff_layers: usize, layer_norm: bool) -> usize {
        MultiHeadAttention::param_count(d, heads, head_dim)
            + Mlp::param_count(&vec![d; rff_layers + 1], Activation::None, false)
            + if layer_norm { 4 * d } else { 0 }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, y: Var) -> Result<Var> {
        for (what, v) in [("query", x), ("key", y)] {
            let c = tape.value(v).cols();
            if c != self.d {
                return Err(Error::config(format!(
                    "MAB {what} has {c} columns, expected {}",
                    self.d
                )));
            }
        }
        let a = self.attention.forward(tape, p, x, y, y)?;
        let mut h = tape.add(x, a)?;
        if let Some(n) = &self.norm1 {
            h = n.forward(tape, p, h)?;
        }
        let f = self.rff.forward(tape, p, h)?;
        let mut o = tape.add(h, f)?;
        if let Some(n) = &self.norm2 {
            o = n.forward(tape, p, o)?;
        }
        Ok(o)
    }
}

/// Self-attention block `SAB(X) = MAB(X, X)`.
#[derive(Clone, Debug)]
pub struct Sab(pub Mab);

impl Sab {
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        self.0.forward(tape, p, x, x)
    }
}

/// Induced self-attention `ISAB(X) = MAB(X, MAB(I, X))` with `m` learnable
/// inducing points; cost is linear in the set size.
#[derive(Clone, Debug)]
pub struct Isab {
    pub inducing: ParamId,
    pub m: usize,
    pub project: Mab,
    pub attend: Mab,
}

impl Isab {
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = self.project.forward(tape, p, p.var(self.inducing), x)?;
        self.attend.forward(tape, p, x, h)
    }
}

/// Pooling by attention from `k` learnable seeds:
/// `PMA(Z) = MAB(S, rFF(Z))`, `n × d → k × d`.
#[derive(Clone, Debug)]
pub struct Pma {
    pub seeds: ParamId,
    pub k: usize,
    pub rff: Mlp,
    pub mab: Mab,
}

impl Pma {
    pub fn forward(&self, tape: &mut Tape, p: &Bound, z: Var) -> Result<Var> {
        let f = self.rff.forward(tape, p, z)?;
        self.mab.forward(tape, p, p.var(self.seeds), f)
    }
}
