//! Ground-truth simulators and parameter-space sampling.

pub mod heat;
pub mod ode;
pub mod sobol;
mod systems;
mod trajectory;

pub use heat::{alpha_profile, simulate_heat_1d, HeatProblem, HeatSolver};
pub use ode::{integrate, OdeOptions, OdeStats};
pub use sobol::{sobol_sample, Sobol, SOBOL_MAX_DIMS};
pub use systems::{
    lorenz_rhs, lotka_volterra_rhs, simulate_lorenz, simulate_lotka_volterra, Control, LorenzParams,
    LotkaVolterraParams,
};
pub use trajectory::{Provenance, Trajectory};

/// `n` points `start, start + step, …`.
pub fn uniform_grid(start: f64, step: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| start + step * i as f64).collect()
}
