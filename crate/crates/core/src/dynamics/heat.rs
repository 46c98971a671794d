//! 1-D heat conduction with spatially varying diffusivity, implicit Euler in
//! conservative finite-volume form.

use serde::{Deserialize, Serialize};

use super::trajectory::{Provenance, Trajectory};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatProblem {
    /// Rod length (m).
    pub length: f64,
    pub nodes: usize,
    /// Nominal diffusivity (m²/s).
    pub alpha_ref: f64,
    /// Centre of the low-diffusivity region (m).
    pub center: f64,
    /// `alpha_ref / alpha_min`.
    pub ratio: f64,
    /// Half-width of the well (m): the dip is half-depth at `|z − center| = width`.
    pub width: f64,
    /// Surface gradient magnitude `q0/k` (K/m) while heating.
    pub flux: f64,
    /// Heating stops while the surface is hotter than this (°C).
    pub t_max: f64,
    /// Uniform initial temperature (°C).
    pub t_initial: f64,
    /// Time step (s).
    pub dt: f64,
    /// Simulated duration (s).
    pub horizon: f64,
}

impl Default for HeatProblem {
    fn default() -> Self {
        Self {
            length: 0.01,
            nodes: 101,
            alpha_ref: 1e-6,
            center: 0.005,
            ratio: 60.0,
            width: 0.001,
            flux: 30_000.0,
            t_max: 500.0,
            t_initial: 20.0,
            dt: 1.0,
            horizon: 200.0,
        }
    }
}

impl HeatProblem {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.length > 0.0) {
            bad.push("length");
        }
        if self.nodes < 3 {
            bad.push("nodes");
        }
        if !(self.center > 0.0 && self.center < self.length) {
            bad.push("center");
        }
        if !(self.ratio > 1.0) {
            bad.push("ratio");
        }
        if !(self.alpha_ref > 0.0) {
            bad.push("alpha_ref");
        }
        if !(self.width > 0.0) {
            bad.push("width");
        }
        if !(self.dt > 0.0) {
            bad.push("dt");
        }
        if !(self.horizon >= 0.0) {
            bad.push("horizon");
        }
        if !self.flux.is_finite() || !self.t_max.is_finite() || !self.t_initial.is_finite() {
            bad.push("flux/t_max/t_initial");
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::config(format!(
                "invalid heat problem fields: {}",
                bad.join(", ")
            )))
        }
    }

    pub fn dz(&self) -> f64 {
        self.length / (self.nodes - 1) as f64
    }

    pub fn steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }

    pub fn node_positions(&self) -> Vec<f64> {
        let dz = self.dz();
        (0..self.nodes).map(|i| i as f64 * dz).collect()
    }

    /// Control-volume widths; the two boundary volumes are half cells.
    pub fn volumes(&self) -> Vec<f64> {
        let dz = self.dz();
        let mut v = vec![dz; self.nodes];
        v[0] = dz / 2.0;
        v[self.nodes - 1] = dz / 2.0;
        v
    }

    /// Volume-weighted mean of a nodal temperature field.
    pub fn mean_temperature(&self, temps: &[f64]) -> f64 {
        let v = self.volumes();
        temps.iter().zip(&v).map(|(t, w)| t * w).sum::<f64>() / self.length
    }
}

/// `α(z) = α_ref − A·exp(−B(G − z)⁶)` with `A = α_ref(1 − 1/ratio)` and
/// `B = ln 2 / w⁶`.
pub fn alpha_profile(problem: &HeatProblem, z: f64) -> f64 {
    let a = problem.alpha_ref * (1.0 - 1.0 / problem.ratio);
    let b = std::f64::consts::LN_2 / problem.width.powi(6);
    let d = problem.center - z;
    if d == 0.0 {
        return problem.alpha_ref / problem.ratio;
    }
    problem.alpha_ref - a * (-b * d.powi(6)).exp()
}

/// Solves a tridiagonal system in place (Thomas algorithm). `lower[0]` and
/// `upper[n-1]` are ignored.
pub(crate) fn solve_tridiagonal(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &mut [f64]) -> Result<()> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut beta = diag[0];
    if beta.abs() < f64::MIN_POSITIVE || !beta.is_finite() {
        return Err(Error::Singular("zero pivot in tridiagonal solve".into()));
    }
    rhs[0] /= beta;
    for i in 1..n {
        c[i - 1] = upper[i - 1] / beta;
        beta = diag[i] - lower[i] * c[i - 1];
        if beta.abs() < f64::MIN_POSITIVE || !beta.is_finite() {
            return Err(Error::Singular(format!("zero pivot at row {i}")));
        }
        rhs[i] = (rhs[i] - lower[i] * rhs[i - 1]) / beta;
    }
    for i in (0..n - 1).rev() {
        rhs[i] -= c[i] * rhs[i + 1];
    }
    Ok(())
}

/// Implicit-Euler stepper. The system matrix depends only on the problem,
/// so it is assembled once.
#[derive(Clone, Debug)]
pub struct HeatSolver {
    problem: HeatProblem,
    lower: Vec<f64>,
    diag: Vec<f64>,
    upper: Vec<f64>,
    inflow: f64,
}

impl HeatSolver {
    pub fn new(problem: &HeatProblem) -> Result<Self> {
        problem.validate()?;
        let n = problem.nodes;
        let dz = problem.dz();
        let alpha: Vec<f64> = problem
            .node_positions()
            .iter()
            .map(|&z| alpha_profile(problem, z))
            .collect();
        let face: Vec<f64> = alpha.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
        let volumes = problem.volumes();
        let mut lower = vec![0.0; n];
        let mut diag = vec![0.0; n];
        let mut upper = vec![0.0; n];
        for i in 0..n {
            diag[i] = volumes[i] / problem.dt;
            if i > 0 {
                let g = face[i - 1] / dz;
                lower[i] = -g;
                diag[i] += g;
            }
            if i + 1 < n {
                let g = face[i] / dz;
                upper[i] = -g;
                diag[i] += g;
            }
        }
        Ok(Self {
            problem: problem.clone(),
            lower,
            diag,
            upper,
            inflow: alpha[0] * problem.flux,
        })
    }

    pub fn problem(&self) -> &HeatProblem {
        &self.problem
    }

    /// Advances one time step; `heating` switches the surface inflow.
    ///
    /// Solves for the temperature increment so that a field with no net
    /// flux is reproduced exactly.
    pub fn step(&self, temps: &[f64], heating: bool) -> Result<Vec<f64>> {
        let n = temps.len();
        let mut rhs = vec![0.0; n];
        for i in 0..n {
            let mut r = 0.0;
            if i > 0 {
                r += self.lower[i] * (temps[i] - temps[i - 1]);
            }
            if i + 1 < n {
                r += self.upper[i] * (temps[i] - temps[i + 1]);
            }
            rhs[i] = r;
        }
        if heating {
            rhs[0] += self.inflow;
        }
        solve_tridiagonal(&self.lower, &self.diag, &self.upper, &mut rhs)?;
        let next: Vec<f64> = temps.iter().zip(&rhs).map(|(t, d)| t + d).collect();
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("non-finite temperature"));
        }
        Ok(next)
    }
}

/// Temperatures at every node for `t = 0, dt, …, steps·dt` (rows) under an
/// inflow at `z = 0` and an insulated far end. Heating is decided from the
/// previous step's surface temperature.
pub fn simulate_heat_1d(problem: &HeatProblem) -> Result<Trajectory> {
    let solver = HeatSolver::new(problem)?;
    let n = problem.nodes;
    let steps = problem.steps();
    let mut temps = vec![problem.t_initial; n];
    let mut data = Vec::with_capacity((steps + 1) * n);
    data.extend_from_slice(&temps);
    let mut times = Vec::with_capacity(steps + 1);
    times.push(0.0);
    for s in 1..=steps {
        temps = solver.step(&temps, temps[0] <= problem.t_max)?;
        data.extend_from_slice(&temps);
        times.push(s as f64 * problem.dt);
    }

    let mut prov = Provenance::new("heat-1d")
        .with("length", problem.length)
        .with("nodes", n as f64)
        .with("alpha_ref", problem.alpha_ref)
        .with("center", problem.center)
        .with("ratio", problem.ratio)
        .with("width", problem.width)
        .with("flux", problem.flux)
        .with("t_max", problem.t_max)
        .with("t_initial", problem.t_initial)
        .with("dt", problem.dt);
    prov.extra
        .insert("z".into(), serde_json::json!(problem.node_positions()));
    Trajectory::new(times, Tensor::matrix(steps + 1, n, data)?, None, prov)
}
