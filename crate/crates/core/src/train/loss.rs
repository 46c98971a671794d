use serde::{Deserialize, Serialize};

use super::LabeledWindow;
use crate::error::{Error, Result};
use crate::models::SetModel;
use crate::tensor::{Bound, ParamKind, Tape, Tensor, Var};

/// How the coefficient error is reduced over output columns.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetReduction {
    /// Mean over all outputs.
    #[default]
    Mean,
    /// One mean-squared error per output, summed (one loss per predicted
    /// characteristic).
    SumPerTarget,
}

/// Loss weights shared by training and validation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the ODE residual `mean |dX/dt − Θ Ξ̂|`.
    pub ode: f64,
    /// Weight of `Σ |W|` over dense weight matrices.
    pub weights_l1: f64,
    #[serde(default)]
    pub reduction: TargetReduction,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            ode: 0.0,
            weights_l1: 0.0,
            reduction: TargetReduction::Mean,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.ode >= 0.0 && self.weights_l1 >= 0.0) {
            return Err(Error::config("loss weights must be non-negative"));
        }
        Ok(())
    }
}

/// The loss split into its parts, all as plain numbers.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub coefficients: f64,
    pub ode: f64,
    pub weights_l1: f64,
}

/// Tape nodes of one loss evaluation.
pub struct LossVars {
    pub total: Var,
    pub coefficients: Var,
    pub ode: Option<Var>,
    pub weights_l1: Option<Var>,
}

impl LossVars {
    pub fn parts(&self, tape: &Tape) -> LossParts {
        let get = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).data()[0]);
        LossParts {
            total: get(Some(self.total)),
            coefficients: get(Some(self.coefficients)),
            ode: get(self.ode),
            weights_l1: get(self.weights_l1),
        }
    }
}

/// Squared coefficient error measured in units of the model's output scale,
/// so targets of very different magnitude weigh alike.
fn coefficient_error(
    tape: &mut Tape,
    model: &SetModel,
    pred: Var,
    batch: &[&LabeledWindow],
    reduction: TargetReduction,
) -> Result<Var> {
    let outputs = model.config().outputs();
    let std = &model.scaling.output_std;
    let mut target = Vec::with_capacity(batch.len() * outputs);
    let mut inv = Vec::with_capacity(batch.len() * outputs);
    for w in batch {
        if w.target.len() != outputs {
            return Err(Error::config(format!(
                "target has {} entries, model predicts {outputs}",
                w.target.len()
            )));
        }
        target.extend_from_slice(&w.target);
        inv.extend(std.iter().map(|s| 1.0 / s));
    }
    let target = tape.constant(Tensor::matrix(batch.len(), outputs, target)?);
    let inv = tape.constant(Tensor::matrix(batch.len(), outputs, inv)?);
    let diff = tape.sub(pred, target)?;
    let diff = tape.mul(diff, inv)?;
    let sq = tape.square(diff)?;
    let mse = tape.mean_all(sq);
    Ok(match reduction {
        TargetReduction::Mean => mse,
        TargetReduction::SumPerTarget => tape.scale(mse, outputs as f64),
    })
}

/// `mean_i mean_m |b_m − (A p̂_i)_m|` over windows that carry ODE data.
fn ode_residual(tape: &mut Tape, pred: Var, batch: &[&LabeledWindow]) -> Result<Option<Var>> {
    let mut terms = Vec::new();
    for (i, w) in batch.iter().enumerate() {
        let Some(ode) = &w.ode else { continue };
        let row = tape.gather_rows(pred, &[i])?;
        let a = tape.constant(ode.a.clone());
        let b = tape.constant(ode.b.clone());
        let fitted = tape.matmul_bt(row, a)?;
        let r = tape.sub(b, fitted)?;
        let r = tape.abs(r);
        terms.push(tape.mean_all(r));
    }
    if terms.is_empty() {
        return Ok(None);
    }
    let n = terms.len();
    let stacked = tape.concat_cols(&terms)?;
    let s = tape.sum_all(stacked);
    Ok(Some(tape.scale(s, 1.0 / n as f64)))
}

fn weight_penalty(tape: &mut Tape, model: &SetModel, p: &Bound) -> Var {
    let store = model.store();
    let mut total: Option<Var> = None;
    for id in store.ids().filter(|&id| store.kind(id) == ParamKind::Weight) {
        let a = tape.abs(p.var(id));
        let s = tape.sum_all(a);
        total = Some(match total {
            Some(t) => tape.add(t, s).expect("scalars add"),
            None => s,
        });
    }
    total.unwrap_or_else(|| tape.constant(Tensor::scalar(0.0)))
}

/// Coefficient error plus weighted ODE residual plus weighted `Σ|W|`.
pub fn composite_loss(
    tape: &mut Tape,
    model: &SetModel,
    p: &Bound,
    pred: Var,
    batch: &[&LabeledWindow],
    weights: &LossWeights,
) -> Result<LossVars> {
    let coefficients = coefficient_error(tape, model, pred, batch, weights.reduction)?;
    let mut total = coefficients;
    let ode = ode_residual(tape, pred, batch)?;
    if let (Some(o), true) = (ode, weights.ode > 0.0) {
        let o = tape.scale(o, weights.ode);
        total = tape.add(total, o)?;
    }
    let weights_l1 = if weights.weights_l1 > 0.0 {
        let w = weight_penalty(tape, model, p);
        let scaled = tape.scale(w, weights.weights_l1);
        total = tape.add(total, scaled)?;
        Some(w)
    } else {
        None
    };
    Ok(LossVars {
        total,
        coefficients,
        ode,
        weights_l1,
    })
}
