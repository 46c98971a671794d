//! Adaptive Dormand–Prince 5(4) integration with 4th-order dense output.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OdeOptions {
    pub rtol: f64,
    pub atol: f64,
    /// Initial step; chosen automatically when absent.
    pub h0: Option<f64>,
    pub max_steps: usize,
    /// Abort with a divergence error once any |state| exceeds this.
    pub bound: Option<f64>,
}

impl Default for OdeOptions {
    fn default() -> Self {
        Self {
            rtol: 1e-8,
            atol: 1e-10,
            h0: None,
            max_steps: 1_000_000,
            bound: None,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct OdeStats {
    pub accepted: usize,
    pub rejected: usize,
    pub evaluations: usize,
}

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

fn axpy(out: &mut [f64], y: &[f64], h: f64, terms: &[(f64, &[f64])]) {
    for i in 0..out.len() {
        let mut s = 0.0;
        for (c, k) in terms {
            s += c * k[i];
        }
        out[i] = y[i] + h * s;
    }
}

/// Integrates `dy/dt = f(t, y)` and returns the state at every point of
/// `t_grid` (the first row is `y0` at `t_grid[0]`).
pub fn integrate<F>(mut f: F, y0: &[f64], t_grid: &[f64], opts: &OdeOptions) -> Result<(Vec<Vec<f64>>, OdeStats)>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    if t_grid.is_empty() {
        return Ok((Vec::new(), OdeStats::default()));
    }
    if t_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::usage("time grid must be strictly increasing"));
    }
    if !(opts.rtol > 0.0 && opts.atol >= 0.0) {
        return Err(Error::config("tolerances must be positive"));
    }
    let n = y0.len();
    let t_end = *t_grid.last().unwrap();
    let mut out = Vec::with_capacity(t_grid.len());
    out.push(y0.to_vec());
    let mut stats = OdeStats::default();
    if t_grid.len() == 1 {
        return Ok((out, stats));
    }

    let mut t = t_grid[0];
    let mut y = y0.to_vec();
    let mut k: Vec<Vec<f64>> = vec![vec![0.0; n]; 7];
    let mut ytmp = vec![0.0; n];
    let mut ynew = vec![0.0; n];
    let mut err = vec![0.0; n];
    f(t, &y, &mut k[0]);
    stats.evaluations += 1;

    let mut h = match opts.h0 {
        Some(h) => h,
        None => initial_step(&mut f, t, &y, &k[0], opts, &mut stats),
    }
    .min(t_end - t);
    let mut next = 1;
    let mut steps = 0;

    while next < t_grid.len() {
        if steps >= opts.max_steps {
            return Err(Error::Divergence {
                last_time: t,
                reason: format!("step limit {} reached", opts.max_steps),
            });
        }
        steps += 1;
        let h_min = 16.0 * f64::EPSILON * t.abs().max(1e-300);
        if !h.is_finite() || (h < h_min && t_end - t > h_min) {
            return Err(Error::Divergence {
                last_time: t,
                reason: "step size underflow".into(),
            });
        }
        if t + h >= t_end || t_end - t <= h_min {
            h = t_end - t;
        }

        let (k1, rest) = k.split_first_mut().unwrap();
        let k1: &[f64] = k1;
        axpy(&mut ytmp, &y, h, &[(A21, k1)]);
        f(t + C2 * h, &ytmp, &mut rest[0]);
        axpy(&mut ytmp, &y, h, &[(A31, k1), (A32, &rest[0])]);
        f(t + C3 * h, &ytmp, &mut rest[1]);
        axpy(&mut ytmp, &y, h, &[(A41, k1), (A42, &rest[0]), (A43, &rest[1])]);
        f(t + C4 * h, &ytmp, &mut rest[2]);
        axpy(
            &mut ytmp,
            &y,
            h,
            &[(A51, k1), (A52, &rest[0]), (A53, &rest[1]), (A54, &rest[2])],
        );
        f(t + C5 * h, &ytmp, &mut rest[3]);
        axpy(
            &mut ytmp,
            &y,
            h,
            &[
                (A61, k1),
                (A62, &rest[0]),
                (A63, &rest[1]),
                (A64, &rest[2]),
                (A65, &rest[3]),
            ],
        );
        f(t + h, &ytmp, &mut rest[4]);
        axpy(
            &mut ynew,
            &y,
            h,
            &[
                (A71, k1),
                (A73, &rest[1]),
                (A74, &rest[2]),
                (A75, &rest[3]),
                (A76, &rest[4]),
            ],
        );
        f(t + h, &ynew, &mut rest[5]);
        stats.evaluations += 6;

        let mut acc = 0.0;
        for i in 0..n {
            err[i] = h
                * (E1 * k1[i]
                    + E3 * rest[1][i]
                    + E4 * rest[2][i]
                    + E5 * rest[3][i]
                    + E6 * rest[4][i]
                    + E7 * rest[5][i]);
            let sc = opts.atol + opts.rtol * y[i].abs().max(ynew[i].abs());
            acc += (err[i] / sc).powi(2);
        }
        let enorm = (acc / n.max(1) as f64).sqrt();

        if !enorm.is_finite() || ynew.iter().any(|v| !v.is_finite()) {
            h *= 0.2;
            stats.rejected += 1;
            continue;
        }

        if enorm <= 1.0 {
            stats.accepted += 1;
            let t_new = if t + h >= t_end || h == t_end - t { t_end } else { t + h };
            // Dense output on every grid point inside (t, t_new].
            while next < t_grid.len() && t_grid[next] <= t_new {
                let tg = t_grid[next];
                let row = if tg == t_new {
                    ynew.clone()
                } else {
                    let theta = (tg - t) / h;
                    let theta1 = 1.0 - theta;
                    (0..n)
                        .map(|i| {
                            let r2 = ynew[i] - y[i];
                            let r3 = h * k1[i] - r2;
                            let r4 = r2 - h * rest[5][i] - r3;
                            let r5 = h
                                * (D1 * k1[i]
                                    + D3 * rest[1][i]
                                    + D4 * rest[2][i]
                                    + D5 * rest[3][i]
                                    + D6 * rest[4][i]
                                    + D7 * rest[5][i]);
                            y[i] + theta * (r2 + theta1 * (r3 + theta * (r4 + theta1 * r5)))
                        })
                        .collect()
                };
                out.push(row);
                next += 1;
            }
            if let Some(bound) = opts.bound {
                if ynew.iter().any(|v| v.abs() > bound) {
                    return Err(Error::Divergence {
                        last_time: t,
                        reason: format!("state exceeded bound {bound:e}"),
                    });
                }
            }
            t = t_new;
            y.copy_from_slice(&ynew);
            // FSAL: the last stage is the first of the next step.
            k.swap(0, 6);
            let fac = if enorm == 0.0 {
                10.0
            } else {
                (0.9 * enorm.powf(-0.2)).clamp(0.2, 10.0)
            };
            h *= fac;
        } else {
            stats.rejected += 1;
            h *= (0.9 * enorm.powf(-0.2)).clamp(0.2, 1.0);
        }
    }
    Ok((out, stats))
}

/// Starting step heuristic after Hairer, Nørsett and Wanner.
fn initial_step<F>(f: &mut F, t: f64, y: &[f64], f0: &[f64], opts: &OdeOptions, stats: &mut OdeStats) -> f64
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    let n = y.len().max(1) as f64;
    let sc: Vec<f64> = y.iter().map(|v| opts.atol + opts.rtol * v.abs()).collect();
    let norm = |v: &[f64]| (v.iter().zip(&sc).map(|(a, s)| (a / s).powi(2)).sum::<f64>() / n).sqrt();
    let d0 = norm(y);
    let d1 = norm(f0);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let y1: Vec<f64> = y.iter().zip(f0).map(|(a, b)| a + h0 * b).collect();
    let mut f1 = vec![0.0; y.len()];
    f(t + h0, &y1, &mut f1);
    stats.evaluations += 1;
    let diff: Vec<f64> = f1.iter().zip(f0).map(|(a, b)| a - b).collect();
    let d2 = norm(&diff) / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(0.2)
    };
    (100.0 * h0).min(h1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decay(rtol: f64) -> f64 {
        let opts = OdeOptions {
            rtol,
            atol: rtol * 1e-2,
            ..Default::default()
        };
        let (y, _) = integrate(|_, y, dy| dy[0] = -y[0], &[1.0], &[0.0, 2.0], &opts).unwrap();
        (y[1][0] - (-2.0f64).exp()).abs()
    }

    #[test]
    fn exponential_decay_accuracy() {
        assert!(decay(1e-10) < 1e-9);
    }

    #[test]
    fn error_shrinks_with_tolerance() {
        // Error per unit tolerance stays within an order of magnitude as the
        // tolerance tightens, the signature of a consistent high-order method.
        let ratios: Vec<f64> = [1e-4, 1e-6, 1e-8, 1e-10].iter().map(|&tol| decay(tol) / tol).collect();
        for r in &ratios {
            assert!(*r < 10.0, "{ratios:?}");
        }
        assert!(decay(1e-10) < decay(1e-6) * 1e-2);
    }

    #[test]
    fn dense_output_on_fine_grid() {
        let grid: Vec<f64> = (0..=1000).map(|i| i as f64 * 0.01).collect();
        let (y, stats) = integrate(
            |_, y, dy| {
                dy[0] = y[1];
                dy[1] = -y[0];
            },
            &[0.0, 1.0],
            &grid,
            &OdeOptions::default(),
        )
        .unwrap();
        assert!(stats.accepted < 1000);
        for (t, row) in grid.iter().zip(&y) {
            assert!((row[0] - t.sin()).abs() < 1e-7, "t={t}");
        }
    }

    #[test]
    fn blow_up_reports_divergence() {
        // y' = y², y(0)=1 explodes at t = 1.
        let r = integrate(
            |_, y, dy| dy[0] = y[0] * y[0],
            &[1.0],
            &[0.0, 2.0],
            &OdeOptions::default(),
        );
        match r {
            Err(Error::Divergence { last_time, reason }) => {
                assert!((last_time - 1.0).abs() < 1e-3, "{last_time} {reason}")
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn bound_triggers_divergence() {
        let opts = OdeOptions {
            bound: Some(100.0),
            ..Default::default()
        };
        let r = integrate(|_, y, dy| dy[0] = y[0], &[1.0], &[0.0, 10.0], &opts);
        assert!(matches!(r, Err(Error::Divergence { .. })));
    }
}
