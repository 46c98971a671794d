//! Candidate-function libraries and sparse regression for system
//! identification.

mod library;
mod regression;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use library::{FeatureLibrary, Term, Wrap};
pub use regression::{stlsq, CoefficientMatrix, Lasso, SparseRegressor, Stlsq, StlsqConfig};

use crate::dynamics::Trajectory;
use crate::error::{Error, Result};
use crate::signal::{central_difference, central_difference_nonuniform, denoise_tv, is_uniform, TvOptions, Window};
use crate::tensor::Tensor;

/// How state derivatives are obtained for a window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
#[derive(Default)]
pub enum DerivativeMethod {
    /// Central differences (non-uniform stencil when the grid requires it).
    #[default]
    Central,
    /// TV differentiation; states are replaced by the re-integrated signal.
    Tv(TvOptions),
}

/// Returns `(states, derivatives)` for a trajectory.
pub fn derivatives(traj: &Trajectory, method: &DerivativeMethod) -> Result<(Tensor, Tensor)> {
    match method {
        DerivativeMethod::Central if is_uniform(&traj.times) => Ok((traj.states.clone(), central_difference(traj)?)),
        DerivativeMethod::Central => Ok((traj.states.clone(), central_difference_nonuniform(traj)?)),
        DerivativeMethod::Tv(opts) => denoise_tv(traj, opts),
    }
}

/// Identifies the local model of one window: differentiate, evaluate the
/// library, regress. Errors carry the window's index in `windows`.
pub fn identify_local(
    traj: &Trajectory,
    window: &Window,
    id: usize,
    lib: &FeatureLibrary,
    regressor: &dyn SparseRegressor,
    method: &DerivativeMethod,
) -> Result<CoefficientMatrix> {
    let run = || -> Result<CoefficientMatrix> {
        let w = traj.slice(window.start, window.end())?;
        let (states, derivs) = derivatives(&w, method)?;
        let theta = lib.evaluate(&states, w.controls.as_ref())?;
        Ok(regressor.fit(&theta, &derivs)?.with_library(lib))
    };
    run().map_err(|e| e.in_window(id))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LorenzEstimate {
    pub sigma: f64,
    pub rho: f64,
    pub beta: f64,
}

/// One-parameter least squares `target ≈ p · regressor`.
fn scalar_fit(name: &str, target: &[f64], regressor: &[f64], scale: f64) -> Result<f64> {
    let rr: f64 = regressor.iter().map(|r| r * r).sum();
    if rr.sqrt() <= 1e-10 * scale {
        return Err(Error::Degenerate(format!("regressor for {name} vanishes")));
    }
    Ok(target.iter().zip(regressor).map(|(t, r)| t * r).sum::<f64>() / rr)
}

/// Lorenz parameters from states and derivatives, each from a scalar fit:
/// `ẋ = σ(y − x)`, `ẏ + y + xz = ρx`, `xy − ż = βz`.
pub fn identify_lorenz_constrained(states: &Tensor, derivs: &Tensor) -> Result<LorenzEstimate> {
    if states.cols() != 3 || derivs.cols() != 3 {
        return Err(Error::dim("Lorenz identification needs 3 state channels"));
    }
    if states.rows() != derivs.rows() {
        return Err(Error::dim("states and derivatives differ in length"));
    }
    let n = states.rows();
    let col = |t: &Tensor, j: usize| -> Vec<f64> { (0..n).map(|i| t.get(i, j)).collect() };
    let (x, y, z) = (col(states, 0), col(states, 1), col(states, 2));
    let (dx, dy, dz) = (col(derivs, 0), col(derivs, 1), col(derivs, 2));
    let scale = states.norm().max(f64::MIN_POSITIVE);
    let y_minus_x: Vec<f64> = y.iter().zip(&x).map(|(y, x)| y - x).collect();
    let rho_target: Vec<f64> = (0..n).map(|i| dy[i] + y[i] + x[i] * z[i]).collect();
    let beta_target: Vec<f64> = (0..n).map(|i| x[i] * y[i] - dz[i]).collect();
    Ok(LorenzEstimate {
        sigma: scalar_fit("sigma", &dx, &y_minus_x, scale)?,
        rho: scalar_fit("rho", &rho_target, &x, scale)?,
        beta: scalar_fit("beta", &beta_target, &z, scale)?,
    })
}

/// Differentiates a Lorenz trajectory and identifies its parameters.
pub fn identify_lorenz(traj: &Trajectory, method: &DerivativeMethod) -> Result<LorenzEstimate> {
    let (states, derivs) = derivatives(traj, method)?;
    identify_lorenz_constrained(&states, &derivs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Label {
    pub window: usize,
    pub source: usize,
    pub start: usize,
    pub len: usize,
    /// Ξ flattened row-major (`terms × targets`).
    pub xi: Vec<f64>,
    pub mask: Vec<bool>,
    pub library_hash: String,
    pub degenerate: bool,
}

/// Labels together with the library that gives them meaning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelSet {
    pub library: FeatureLibrary,
    pub targets: usize,
    pub labels: Vec<Label>,
}

impl LabelSet {
    pub fn new(library: FeatureLibrary, targets: usize) -> Self {
        Self {
            library,
            targets,
            labels: Vec::new(),
        }
    }

    pub fn push(&mut self, id: usize, window: &Window, xi: &CoefficientMatrix) {
        self.labels.push(Label {
            window: id,
            source: window.source,
            start: window.start,
            len: window.len,
            xi: xi.coefficients.data().to_vec(),
            mask: xi.mask.clone(),
            library_hash: self.library.hash(),
            degenerate: xi.degenerate,
        });
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let set: LabelSet = serde_json::from_slice(&std::fs::read(path)?)?;
        let hash = set.library.hash();
        if let Some(l) = set.labels.iter().find(|l| l.library_hash != hash) {
            return Err(Error::Incompatible(format!(
                "label for window {} was made with a different library",
                l.window
            )));
        }
        Ok(set)
    }
}
