use serde::{Deserialize, Serialize};

use super::ode::{integrate, OdeOptions};
use super::trajectory::{Provenance, Trajectory};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Control input: a constant or a piecewise-linear series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Control {
    Constant(f64),
    Series { times: Vec<f64>, values: Vec<f64> },
}

impl Default for Control {
    fn default() -> Self {
        Control::Constant(0.0)
    }
}

impl Control {
    /// Value at `t`; series are held constant outside their span.
    pub fn at(&self, t: f64) -> f64 {
        match self {
            Control::Constant(c) => *c,
            Control::Series { times, values } => {
                if times.is_empty() {
                    return 0.0;
                }
                let i = times.partition_point(|&s| s <= t);
                if i == 0 {
                    values[0]
                } else if i == times.len() {
                    values[times.len() - 1]
                } else {
                    let (t0, t1) = (times[i - 1], times[i]);
                    let w = (t - t0) / (t1 - t0);
                    values[i - 1] * (1.0 - w) + values[i] * w
                }
            }
        }
    }
}

/// `ẋ = αx − βxy`, `ẏ = δxy − γy + c`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LotkaVolterraParams {
    pub alpha: f64,
    pub beta: f64,
    pub delta: f64,
    pub gamma: f64,
    #[serde(default)]
    pub control: Control,
}

impl LotkaVolterraParams {
    pub fn new(alpha: f64, beta: f64, delta: f64, gamma: f64, control: Control) -> Self {
        Self {
            alpha,
            beta,
            delta,
            gamma,
            control,
        }
    }

    fn validate(&self) -> Result<()> {
        if [self.alpha, self.beta, self.delta, self.gamma]
            .iter()
            .any(|v| !v.is_finite())
        {
            return Err(Error::config("Lotka–Volterra rates must be finite"));
        }
        Ok(())
    }
}

pub fn lotka_volterra_rhs(p: &LotkaVolterraParams, t: f64, s: &[f64], ds: &mut [f64]) {
    let (x, y) = (s[0], s[1]);
    ds[0] = p.alpha * x - p.beta * x * y;
    ds[1] = p.delta * x * y - p.gamma * y + p.control.at(t);
}

/// Classic Lorenz system.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LorenzParams {
    pub sigma: f64,
    pub rho: f64,
    pub beta: f64,
}

pub fn lorenz_rhs(p: &LorenzParams, s: &[f64], ds: &mut [f64]) {
    let (x, y, z) = (s[0], s[1], s[2]);
    ds[0] = p.sigma * (y - x);
    ds[1] = x * (p.rho - z) - y;
    ds[2] = x * y - p.beta * z;
}

fn to_trajectory(
    t_grid: &[f64],
    rows: Vec<Vec<f64>>,
    controls: Option<Tensor>,
    provenance: Provenance,
) -> Result<Trajectory> {
    let l = rows.first().map_or(0, Vec::len);
    let states = Tensor::matrix(rows.len(), l, rows.into_iter().flatten().collect())?;
    Trajectory::new(t_grid.to_vec(), states, controls, provenance)
}

pub fn simulate_lotka_volterra(
    params: &LotkaVolterraParams,
    x0: f64,
    y0: f64,
    t_grid: &[f64],
    opts: &OdeOptions,
) -> Result<Trajectory> {
    params.validate()?;
    let (rows, _) = integrate(|t, s, ds| lotka_volterra_rhs(params, t, s, ds), &[x0, y0], t_grid, opts)?;
    let c: Vec<f64> = t_grid.iter().map(|&t| params.control.at(t)).collect();
    let controls = Tensor::matrix(t_grid.len(), 1, c)?;
    let mut prov = Provenance::new("lotka-volterra")
        .with("alpha", params.alpha)
        .with("beta", params.beta)
        .with("delta", params.delta)
        .with("gamma", params.gamma)
        .with("x0", x0)
        .with("y0", y0);
    if let Control::Constant(c) = params.control {
        prov = prov.with("c", c);
    }
    prov.rtol = Some(opts.rtol);
    prov.atol = Some(opts.atol);
    to_trajectory(t_grid, rows, Some(controls), prov)
}

pub fn simulate_lorenz(
    params: &LorenzParams,
    x0: f64,
    y0: f64,
    z0: f64,
    t_grid: &[f64],
    opts: &OdeOptions,
) -> Result<Trajectory> {
    if ![params.sigma, params.rho, params.beta].iter().all(|v| v.is_finite()) {
        return Err(Error::config("Lorenz parameters must be finite"));
    }
    let (rows, _) = integrate(|_, s, ds| lorenz_rhs(params, s, ds), &[x0, y0, z0], t_grid, opts)?;
    let mut prov = Provenance::new("lorenz")
        .with("sigma", params.sigma)
        .with("rho", params.rho)
        .with("beta", params.beta)
        .with("x0", x0)
        .with("y0", y0)
        .with("z0", z0);
    prov.rtol = Some(opts.rtol);
    prov.atol = Some(opts.atol);
    to_trajectory(t_grid, rows, None, prov)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::uniform_grid;

    fn app1_lv() -> LotkaVolterraParams {
        LotkaVolterraParams::new(0.5, 0.025, 0.5, 0.005, Control::Constant(0.0))
    }

    #[test]
    fn lv_equilibrium_is_constant() {
        let grid = uniform_grid(0.0, 0.1, 301);
        let tr = simulate_lotka_volterra(&app1_lv(), 0.01, 20.0, &grid, &OdeOptions::default()).unwrap();
        let mut ds = [0.0; 2];
        lotka_volterra_rhs(&app1_lv(), 0.0, &[0.01, 20.0], &mut ds);
        assert!(ds[0].abs() < 1e-15 && ds[1].abs() < 1e-15);
        for i in 0..tr.len() {
            assert!((tr.states.get(i, 0) - 0.01).abs() < 1e-12);
            assert!((tr.states.get(i, 1) - 20.0).abs() < 1e-10);
        }
    }

    #[test]
    fn lv_app1_rates_stay_bounded_and_non_negative() {
        // With these rates the prey decays towards zero while predators grow
        // to a plateau; states stay finite and prey never meaningfully
        // crosses zero (only down to the absolute tolerance floor).
        let grid = uniform_grid(0.0, 0.01, 3001);
        let opts = OdeOptions::default();
        let tr = simulate_lotka_volterra(&app1_lv(), 27.5, 10.0, &grid, &opts).unwrap();
        for i in 0..tr.len() {
            let (x, y) = (tr.states.get(i, 0), tr.states.get(i, 1));
            assert!(x.is_finite() && y.is_finite());
            assert!(x > -1e3 * opts.atol, "x={x} at t={}", tr.times[i]);
            assert!(y > 0.0 && y < 1e3);
        }
    }

    #[test]
    fn lv_swapped_rates_give_periodic_orbit() {
        // δ and γ exchanged: classic closed orbits around (γ/δ, α/β).
        let p = LotkaVolterraParams::new(0.5, 0.025, 0.005, 0.5, Control::Constant(0.0));
        let grid = uniform_grid(0.0, 0.01, 3001);
        let tr = simulate_lotka_volterra(&p, 27.5, 10.0, &grid, &OdeOptions::default()).unwrap();
        let invariant = |x: f64, y: f64| p.delta * x - p.gamma * x.ln() + p.beta * y - p.alpha * y.ln();
        let v0 = invariant(27.5, 10.0);
        for i in 0..tr.len() {
            let (x, y) = (tr.states.get(i, 0), tr.states.get(i, 1));
            assert!(x > 0.0 && y > 0.0);
            assert!((invariant(x, y) - v0).abs() < 1e-6);
        }
    }

    #[test]
    fn lv_tolerance_self_convergence() {
        let grid = uniform_grid(0.0, 0.1, 301);
        let p = LotkaVolterraParams::new(0.5, 0.025, 0.005, 0.5, Control::Constant(1.0));
        let a = simulate_lotka_volterra(&p, 27.5, 10.0, &grid, &OdeOptions::default()).unwrap();
        let tight = OdeOptions {
            rtol: 0.5e-8,
            atol: 0.5e-10,
            ..Default::default()
        };
        let b = simulate_lotka_volterra(&p, 27.5, 10.0, &grid, &tight).unwrap();
        let last = a.len() - 1;
        for j in 0..2 {
            let (va, vb) = (a.states.get(last, j), b.states.get(last, j));
            assert!(((va - vb) / vb).abs() < 1e-6);
        }
    }

    #[test]
    fn lorenz_fixed_point_holds_briefly() {
        let p = LorenzParams {
            sigma: 10.0,
            rho: 28.0,
            beta: 8.0 / 3.0,
        };
        let c = (p.beta * (p.rho - 1.0)).sqrt();
        let mut ds = [0.0; 3];
        lorenz_rhs(&p, &[c, c, p.rho - 1.0], &mut ds);
        assert!(ds.iter().all(|d| d.abs() < 1e-12));
        let grid = uniform_grid(0.0, 0.001, 100);
        let tr = simulate_lorenz(&p, c, c, p.rho - 1.0, &grid, &OdeOptions::default()).unwrap();
        for i in 0..tr.len() {
            assert!((tr.states.get(i, 0) - c).abs() < 1e-3);
            assert!((tr.states.get(i, 2) - (p.rho - 1.0)).abs() < 1e-3);
        }
    }

    #[test]
    fn lorenz_twin_runs_diverge() {
        let p = LorenzParams {
            sigma: 10.0,
            rho: 28.0,
            beta: 8.0 / 3.0,
        };
        // Separation passes unit distance shortly after t = 20 from this
        // start on the attractor.
        let grid = uniform_grid(0.0, 0.01, 2201);
        let opts = OdeOptions {
            rtol: 1e-11,
            atol: 1e-12,
            ..Default::default()
        };
        let a = simulate_lorenz(&p, -8.0, 8.0, 27.0, &grid, &opts).unwrap();
        let b = simulate_lorenz(&p, -8.0 + 1e-9, 8.0, 27.0, &grid, &opts).unwrap();
        let sep = (0..a.len())
            .map(|i| {
                (0..3)
                    .map(|j| (a.states.get(i, j) - b.states.get(i, j)).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max);
        assert!(sep > 1.0, "{sep}");
    }

    #[test]
    fn control_series_interpolates() {
        let c = Control::Series {
            times: vec![0.0, 1.0, 2.0],
            values: vec![0.0, 2.0, 2.0],
        };
        assert_eq!(c.at(-1.0), 0.0);
        assert_eq!(c.at(0.5), 1.0);
        assert_eq!(c.at(5.0), 2.0);
    }
}
