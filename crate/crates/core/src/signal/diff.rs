use crate::dynamics::Trajectory;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// True when consecutive spacings agree to a relative `1e-9`.
pub fn is_uniform(times: &[f64]) -> bool {
    if times.len() < 3 {
        return true;
    }
    let h = times[1] - times[0];
    times.windows(2).all(|w| ((w[1] - w[0]) - h).abs() <= 1e-9 * h.abs())
}

fn check_len(values: &[f64], times: &[f64]) -> Result<()> {
    if values.len() != times.len() {
        return Err(Error::dim(format!("{} values for {} times", values.len(), times.len())));
    }
    if values.len() < 3 {
        return Err(Error::usage("differentiation needs at least 3 samples"));
    }
    Ok(())
}

fn uniform_series(values: &[f64], h: f64) -> Vec<f64> {
    let n = values.len();
    let mut d = vec![0.0; n];
    d[0] = (-3.0 * values[0] + 4.0 * values[1] - values[2]) / (2.0 * h);
    for i in 1..n - 1 {
        d[i] = (values[i + 1] - values[i - 1]) / (2.0 * h);
    }
    d[n - 1] = (3.0 * values[n - 1] - 4.0 * values[n - 2] + values[n - 3]) / (2.0 * h);
    d
}

/// Second-order three-point derivative on an arbitrary increasing grid.
pub fn differentiate_series(values: &[f64], times: &[f64]) -> Result<Vec<f64>> {
    check_len(values, times)?;
    let n = values.len();
    let mut d = vec![0.0; n];
    let (h1, h2) = (times[1] - times[0], times[2] - times[1]);
    d[0] = -(2.0 * h1 + h2) / (h1 * (h1 + h2)) * values[0] + (h1 + h2) / (h1 * h2) * values[1]
        - h1 / (h2 * (h1 + h2)) * values[2];
    for i in 1..n - 1 {
        let (h1, h2) = (times[i] - times[i - 1], times[i + 1] - times[i]);
        d[i] = -h2 / (h1 * (h1 + h2)) * values[i - 1]
            + (h2 - h1) / (h1 * h2) * values[i]
            + h1 / (h2 * (h1 + h2)) * values[i + 1];
    }
    let (h1, h2) = (times[n - 2] - times[n - 3], times[n - 1] - times[n - 2]);
    d[n - 1] = h2 / (h1 * (h1 + h2)) * values[n - 3] - (h1 + h2) / (h1 * h2) * values[n - 2]
        + (2.0 * h2 + h1) / (h2 * (h1 + h2)) * values[n - 1];
    Ok(d)
}

fn per_channel(traj: &Trajectory, f: impl Fn(&[f64]) -> Result<Vec<f64>>) -> Result<Tensor> {
    let (n, l) = (traj.len(), traj.n_states());
    let mut out = Tensor::zeros(&[n, l]);
    for j in 0..l {
        for (i, v) in f(&traj.channel(j))?.into_iter().enumerate() {
            out.set(i, j, v);
        }
    }
    Ok(out)
}

/// Central differences on a uniform grid with one-sided second-order
/// endpoints. Returns an `N × l` derivative matrix.
pub fn central_difference(traj: &Trajectory) -> Result<Tensor> {
    if traj.len() < 3 {
        return Err(Error::usage("central difference needs at least 3 samples"));
    }
    if !is_uniform(&traj.times) {
        return Err(Error::usage(
            "time grid is not uniform; use central_difference_nonuniform",
        ));
    }
    let h = (traj.times[traj.len() - 1] - traj.times[0]) / (traj.len() - 1) as f64;
    per_channel(traj, |v| Ok(uniform_series(v, h)))
}

/// Three-point differences valid on any increasing grid.
pub fn central_difference_nonuniform(traj: &Trajectory) -> Result<Tensor> {
    per_channel(traj, |v| differentiate_series(v, &traj.times))
}

/// Cumulative trapezoidal integral starting from `initial`.
pub fn cumtrapz(derivs: &[f64], times: &[f64], initial: f64) -> Result<Vec<f64>> {
    if derivs.len() != times.len() {
        return Err(Error::dim(format!(
            "{} derivatives for {} times",
            derivs.len(),
            times.len()
        )));
    }
    let mut out = Vec::with_capacity(derivs.len());
    let mut acc = initial;
    if !derivs.is_empty() {
        out.push(acc);
    }
    for k in 1..derivs.len() {
        acc += 0.5 * (times[k] - times[k - 1]) * (derivs[k] + derivs[k - 1]);
        out.push(acc);
    }
    Ok(out)
}
