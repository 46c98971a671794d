//! Dataset assembly, composite losses and staged training with
//! checkpointing on validation improvement.

mod assemble;
mod loss;

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use assemble::{
    assemble_app1, assemble_app2, assemble_app3, coefficient_names, heat_probes, lorenz_prefix_windows, split_counts,
    split_fractions, window_features, Assembled, LorenzLabels, LorenzTarget, PrefixSpec,
};
pub use loss::{composite_loss, LossParts, LossVars, LossWeights, TargetReduction};

use crate::error::{Error, Result};
use crate::models::{Scaling, SetModel};
use crate::rng::substream;
use crate::tensor::{AdamState, Tape, Tensor};

/// Affine ODE residual of a window: `r = b − A p̂` where `p̂` is the
/// flattened prediction. For coefficient targets `A` repeats the library
/// evaluation Θ once per state equation and `b` holds dX/dt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OdeData {
    /// `M × outputs`.
    pub a: Tensor,
    /// `1 × M`.
    pub b: Tensor,
}

/// One training example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledWindow {
    /// Trajectory the rows come from.
    pub source: usize,
    /// Window index within the source.
    pub index: usize,
    /// `N′ × features`.
    pub inputs: Tensor,
    pub target: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ode: Option<OdeData>,
}

/// Which rows of a training window are fed to the model each epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "kebab-case")]
pub enum WindowPolicy {
    /// Every row.
    #[default]
    Full,
    /// A prefix whose length is drawn uniformly from `sizes` (those that
    /// fit) each epoch.
    Prefix { sizes: Vec<usize> },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub lr: f64,
    pub epochs: usize,
}

/// Quantity compared across epochs to decide on checkpoints.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ValidationMetric {
    /// The full training loss.
    #[default]
    Composite,
    /// Coefficient error alone.
    Coefficients,
}

fn default_batch() -> usize {
    64
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingPlan {
    pub stages: Vec<Stage>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub loss: LossWeights,
    #[serde(default)]
    pub window_policy: WindowPolicy,
    #[serde(default)]
    pub validation: ValidationMetric,
    /// Fit input/output scaling on the training split before the first epoch.
    #[serde(default = "yes")]
    pub fit_scaling: bool,
    /// Epochs already completed by an earlier run; the ladder resumes there.
    #[serde(default)]
    pub resume_epoch: usize,
    /// Validation loss of the checkpoint being resumed; only a strict
    /// improvement on it replaces that checkpoint.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resume_best: Option<f64>,
    pub seed: u64,
}

impl TrainingPlan {
    pub fn new(stages: Vec<Stage>, seed: u64) -> Self {
        Self {
            stages,
            batch_size: default_batch(),
            loss: LossWeights::default(),
            window_policy: WindowPolicy::Full,
            validation: ValidationMetric::Composite,
            fit_scaling: true,
            resume_epoch: 0,
            resume_best: None,
            seed,
        }
    }

    /// Ladder from parallel lists of rates and epoch counts.
    pub fn ladder(lrs: &[f64], epochs: &[usize], seed: u64) -> Result<Self> {
        if lrs.len() != epochs.len() {
            return Err(Error::config(format!(
                "{} learning rates for {} stages",
                lrs.len(),
                epochs.len()
            )));
        }
        let stages = lrs
            .iter()
            .zip(epochs)
            .map(|(&lr, &epochs)| Stage { lr, epochs })
            .collect();
        Ok(Self::new(stages, seed))
    }

    pub fn total_epochs(&self) -> usize {
        self.stages.iter().map(|s| s.epochs).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(s) = self
            .stages
            .iter()
            .find(|s| !(s.lr > 0.0 && s.lr.is_finite()) || s.epochs == 0)
        {
            return Err(Error::config(format!(
                "every stage needs lr > 0 and epochs > 0, got lr {} for {} epochs",
                s.lr, s.epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if let WindowPolicy::Prefix { sizes } = &self.window_policy {
            if sizes.is_empty() || sizes.contains(&0) {
                return Err(Error::config("prefix sizes must be positive"));
            }
        }
        self.loss.validate()
    }

    /// `(stage index, lr)` of a zero-based epoch.
    pub fn stage_of(&self, epoch: usize) -> Option<(usize, f64)> {
        let mut end = 0;
        for (i, s) in self.stages.iter().enumerate() {
            end += s.epochs;
            if epoch < end {
                return Some((i, s.lr));
            }
        }
        None
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// One-based.
    pub epoch: usize,
    pub stage: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub valid_coefficients: f64,
    pub valid_ode: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub curves: Vec<EpochRecord>,
    /// `(epoch, validation loss)` of every saved checkpoint, in order.
    pub checkpoints: Vec<(usize, f64)>,
}

impl TrainReport {
    pub fn best(&self) -> Option<(usize, f64)> {
        self.checkpoints.last().copied()
    }

    pub fn curves_csv(&self) -> String {
        let mut s = String::from("epoch,stage,lr,train_loss,valid_loss,valid_coefficients,valid_ode\n");
        for r in &self.curves {
            let _ = writeln!(
                s,
                "{},{},{:e},{:e},{:e},{:e},{:e}",
                r.epoch, r.stage, r.lr, r.train_loss, r.valid_loss, r.valid_coefficients, r.valid_ode
            );
        }
        s
    }
}

fn prefix(t: &Tensor, n: usize) -> Tensor {
    if n >= t.rows() {
        return t.clone();
    }
    Tensor::matrix(n, t.cols(), t.data()[..n * t.cols()].to_vec()).expect("prefix of a matrix")
}

/// Indices grouped into batches of equal row count.
fn batches(lens: &[usize], batch_size: usize, rng: &mut crate::rng::Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..lens.len()).collect();
    order.shuffle(rng);
    order.sort_by_key(|&i| lens[i]);
    let mut out = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    for i in order {
        if cur.len() == batch_size || cur.first().is_some_and(|&j| lens[j] != lens[i]) {
            out.push(std::mem::take(&mut cur));
        }
        cur.push(i);
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out.shuffle(rng);
    out
}

/// Loss over a dataset, averaged over windows, without gradients.
pub fn evaluate_loss(
    model: &SetModel,
    windows: &[LabeledWindow],
    weights: &LossWeights,
    batch_size: usize,
) -> Result<LossParts> {
    if windows.is_empty() {
        return Err(Error::usage("cannot evaluate a loss on an empty dataset"));
    }
    let lens: Vec<usize> = windows.iter().map(|w| w.inputs.rows()).collect();
    let mut order: Vec<usize> = (0..windows.len()).collect();
    order.sort_by_key(|&i| lens[i]);
    let mut sum = LossParts::default();
    let mut ode_count = 0usize;
    for chunk in order
        .chunk_by(|&a, &b| lens[a] == lens[b])
        .flat_map(|g| g.chunks(batch_size.max(1)))
    {
        let batch: Vec<&LabeledWindow> = chunk.iter().map(|&i| &windows[i]).collect();
        let inputs: Vec<&Tensor> = batch.iter().map(|w| &w.inputs).collect();
        let mut tape = Tape::new();
        let p = model.store().bind_frozen(&mut tape);
        let pred = model.forward(&mut tape, &p, &inputs)?;
        let parts = composite_loss(&mut tape, model, &p, pred, &batch, weights)?.parts(&tape);
        let n = batch.len() as f64;
        let with_ode = batch.iter().filter(|w| w.ode.is_some()).count();
        sum.total += parts.total * n;
        sum.coefficients += parts.coefficients * n;
        sum.ode += parts.ode * with_ode as f64;
        sum.weights_l1 = parts.weights_l1;
        ode_count += with_ode;
    }
    let n = windows.len() as f64;
    Ok(LossParts {
        total: sum.total / n,
        coefficients: sum.coefficients / n,
        ode: if ode_count > 0 { sum.ode / ode_count as f64 } else { 0.0 },
        weights_l1: sum.weights_l1,
    })
}

fn save_checkpoint(model: &SetModel, dir: &Path, epoch: usize, loss: f64) -> Result<()> {
    let mut ck = model.to_checkpoint()?;
    ck.metadata.insert("epoch".into(), serde_json::json!(epoch));
    ck.metadata.insert("valid_loss".into(), serde_json::json!(loss));
    ck.save(&dir.join("best.json"))
}

fn write_curves(report: &TrainReport, dir: Option<&Path>) -> Result<()> {
    if let Some(dir) = dir {
        std::fs::write(dir.join("curves.csv"), report.curves_csv())?;
    }
    Ok(())
}

/// Runs the learning-rate ladder with Adam. After every epoch the
/// validation loss is computed; a strict improvement saves `best.json` in
/// `out` (when given). On return the model holds the best weights seen.
///
/// A non-finite training loss or gradient stops the run: the best weights
/// are restored, curves so far are written and a numeric error returned.
pub fn train(
    model: &mut SetModel,
    plan: &TrainingPlan,
    train_set: &[LabeledWindow],
    valid_set: &[LabeledWindow],
    out: Option<&Path>,
) -> Result<TrainReport> {
    plan.validate()?;
    if train_set.is_empty() || valid_set.is_empty() {
        return Err(Error::usage("training needs non-empty training and validation splits"));
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("plan.json"), serde_json::to_vec_pretty(plan)?)?;
    }
    if plan.fit_scaling && plan.resume_epoch == 0 {
        let inputs: Vec<&Tensor> = train_set.iter().map(|w| &w.inputs).collect();
        let targets: Vec<&[f64]> = train_set.iter().map(|w| w.target.as_slice()).collect();
        model.scaling = Scaling::fit(&inputs, &targets)?;
    }

    let mut report = TrainReport::default();
    let mut best_store = model.store().clone();
    let mut best = plan.resume_best.unwrap_or(f64::INFINITY);
    let mut adam = AdamState::new(model.store());
    let total = plan.total_epochs();

    for epoch in plan.resume_epoch..total {
        let (stage, lr) = plan.stage_of(epoch).expect("epoch within the ladder");
        let mut rng = substream(plan.seed, &format!("epoch/{epoch}"));
        let lens: Vec<usize> = train_set
            .iter()
            .map(|w| {
                let rows = w.inputs.rows();
                match &plan.window_policy {
                    WindowPolicy::Full => rows,
                    WindowPolicy::Prefix { sizes } => {
                        let fit: Vec<usize> = sizes.iter().copied().filter(|&n| n <= rows).collect();
                        if fit.is_empty() {
                            rows
                        } else {
                            fit[rng.gen_range(0..fit.len())]
                        }
                    }
                }
            })
            .collect();

        let mut epoch_loss = 0.0;
        for batch_idx in batches(&lens, plan.batch_size, &mut rng) {
            let batch: Vec<&LabeledWindow> = batch_idx.iter().map(|&i| &train_set[i]).collect();
            let inputs: Vec<Tensor> = batch_idx
                .iter()
                .map(|&i| prefix(&train_set[i].inputs, lens[i]))
                .collect();
            let refs: Vec<&Tensor> = inputs.iter().collect();
            let mut tape = Tape::new();
            let p = model.store().bind(&mut tape);
            let pred = model.forward(&mut tape, &p, &refs)?;
            let loss = composite_loss(&mut tape, model, &p, pred, &batch, &plan.loss)?;
            let value = tape.value(loss.total).data()[0];
            let step = if value.is_finite() {
                tape.backward(loss.total).and_then(|_| {
                    let grads = p.grads(&tape);
                    adam.step(model.store_mut(), &grads, lr)
                })
            } else {
                Err(Error::numeric(format!("training loss became {value}")))
            };
            if let Err(e) = step {
                *model.store_mut() = best_store;
                write_curves(&report, out)?;
                let at = report
                    .best()
                    .map_or("the initial weights".to_string(), |(e, _)| format!("epoch {e}"));
                return Err(Error::numeric(format!("epoch {}: {e}; restored {at}", epoch + 1)));
            }
            epoch_loss += value * batch.len() as f64;
        }
        let train_loss = epoch_loss / train_set.len() as f64;
        let v = evaluate_loss(model, valid_set, &plan.loss, plan.batch_size)?;
        let valid_loss = match plan.validation {
            ValidationMetric::Composite => v.total,
            ValidationMetric::Coefficients => v.coefficients,
        };
        report.curves.push(EpochRecord {
            epoch: epoch + 1,
            stage,
            lr,
            train_loss,
            valid_loss,
            valid_coefficients: v.coefficients,
            valid_ode: v.ode,
        });
        log::info!(
            "epoch {} lr {lr:e}: train {train_loss:.4e} valid {valid_loss:.4e}",
            epoch + 1
        );
        if valid_loss < best {
            best = valid_loss;
            best_store = model.store().clone();
            report.checkpoints.push((epoch + 1, valid_loss));
            if let Some(dir) = out {
                save_checkpoint(model, dir, epoch + 1, valid_loss)?;
            }
        }
    }
    *model.store_mut() = best_store;
    write_curves(&report, out)?;
    Ok(report)
}
