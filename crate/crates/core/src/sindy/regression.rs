use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::library::FeatureLibrary;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ξ with its support. Entries outside the mask are exactly zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientMatrix {
    /// `terms × targets`.
    pub coefficients: Tensor,
    /// Row-major, same layout as `coefficients`.
    pub mask: Vec<bool>,
    pub library_hash: Option<String>,
    /// Set when an active set was rank deficient or the support is empty.
    pub degenerate: bool,
}

impl CoefficientMatrix {
    pub fn terms(&self) -> usize {
        self.coefficients.rows()
    }

    pub fn targets(&self) -> usize {
        self.coefficients.cols()
    }

    pub fn get(&self, term: usize, target: usize) -> f64 {
        self.coefficients.get(term, target)
    }

    pub fn support(&self, target: usize) -> Vec<usize> {
        (0..self.terms())
            .filter(|&t| self.mask[t * self.targets() + target])
            .collect()
    }

    pub fn with_library(mut self, lib: &FeatureLibrary) -> Self {
        self.library_hash = Some(lib.hash());
        self
    }

    /// Human-readable equations, one per target.
    pub fn equations(&self, lib: &FeatureLibrary) -> Vec<String> {
        let names = lib.names();
        (0..self.targets())
            .map(|j| {
                let parts: Vec<String> = self
                    .support(j)
                    .into_iter()
                    .map(|t| format!("{:+.6} {}", self.get(t, j), names[t]))
                    .collect();
                let lhs = lib.channels.get(j).map_or(format!("d{j}"), |c| format!("d{c}/dt"));
                if parts.is_empty() {
                    format!("{lhs} = 0")
                } else {
                    format!("{lhs} = {}", parts.join(" "))
                }
            })
            .collect()
    }
}

/// Sparse regression `targets ≈ Θ Ξ`.
pub trait SparseRegressor {
    fn fit(&self, theta: &Tensor, targets: &Tensor) -> Result<CoefficientMatrix>;
}

fn check_inputs(theta: &Tensor, targets: &Tensor) -> Result<()> {
    if theta.rows() != targets.rows() {
        return Err(Error::dim(format!(
            "Θ has {} rows but targets have {}",
            theta.rows(),
            targets.rows()
        )));
    }
    if !theta.is_finite() || !targets.is_finite() {
        return Err(Error::numeric("non-finite entry in regression inputs"));
    }
    if theta.rows() < theta.cols() {
        log::debug!(
            "underdetermined regression: {} rows for {} terms",
            theta.rows(),
            theta.cols()
        );
    }
    Ok(())
}

/// Ridge least squares on the columns `cols` via SVD. Returns the
/// coefficients and whether the active matrix was rank deficient (in which
/// case the least-norm solution is returned).
fn ridge_solve(theta: &DMatrix<f64>, y: &DVector<f64>, cols: &[usize], ridge: f64) -> (Vec<f64>, bool) {
    if cols.is_empty() {
        return (Vec::new(), false);
    }
    let a = theta.select_columns(cols);
    let tol_scale = f64::EPSILON * a.nrows().max(a.ncols()) as f64;
    let svd = a.svd(true, true);
    let s = &svd.singular_values;
    let tol = s.max() * tol_scale;
    let u = svd.u.as_ref().expect("U requested");
    let vt = svd.v_t.as_ref().expect("Vᵀ requested");
    let uty = u.transpose() * y;
    let mut rank = 0;
    let mut z = DVector::zeros(s.len());
    for i in 0..s.len() {
        if s[i] > tol {
            rank += 1;
            z[i] = s[i] * uty[i] / (s[i] * s[i] + ridge);
        }
    }
    let x = vt.transpose() * z;
    (x.iter().copied().collect(), rank < cols.len())
}

fn to_dmatrix(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StlsqConfig {
    pub threshold: f64,
    pub ridge: f64,
    pub max_iter: usize,
}

impl Default for StlsqConfig {
    fn default() -> Self {
        Self {
            threshold: 0.05,
            ridge: 1e-10,
            max_iter: 20,
        }
    }
}

impl StlsqConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold >= 0.0) || !(self.ridge >= 0.0) {
            return Err(Error::config("threshold and ridge must be ≥ 0"));
        }
        Ok(())
    }
}

/// Sequentially thresholded ridge regression, one target column at a time.
pub fn stlsq(theta: &Tensor, targets: &Tensor, cfg: &StlsqConfig) -> Result<CoefficientMatrix> {
    cfg.validate()?;
    check_inputs(theta, targets)?;
    let (t, l) = (theta.cols(), targets.cols());
    let a = to_dmatrix(theta);
    let mut coef = Tensor::zeros(&[t, l]);
    let mut mask = vec![false; t * l];
    let mut degenerate = false;
    for j in 0..l {
        let y = DVector::from_iterator(targets.rows(), (0..targets.rows()).map(|i| targets.get(i, j)));
        let mut active: Vec<usize> = (0..t).collect();
        let (mut x, mut deficient) = ridge_solve(&a, &y, &active, cfg.ridge);
        for _ in 0..cfg.max_iter {
            let keep: Vec<usize> = active
                .iter()
                .zip(&x)
                .filter(|(_, v)| v.abs() >= cfg.threshold)
                .map(|(&c, _)| c)
                .collect();
            if keep.len() == active.len() {
                break;
            }
            active = keep;
            (x, deficient) = ridge_solve(&a, &y, &active, cfg.ridge);
        }
        if deficient || active.is_empty() {
            degenerate = true;
        }
        for (&c, &v) in active.iter().zip(&x) {
            coef.set(c, j, v);
            mask[c * l + j] = true;
        }
    }
    Ok(CoefficientMatrix {
        coefficients: coef,
        mask,
        library_hash: None,
        degenerate,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stlsq(pub StlsqConfig);

impl SparseRegressor for Stlsq {
    fn fit(&self, theta: &Tensor, targets: &Tensor) -> Result<CoefficientMatrix> {
        stlsq(theta, targets, &self.0)
    }
}

/// L1-penalized least squares by cyclic coordinate descent:
/// `min (1/2N)‖y − Θξ‖² + λ‖ξ‖₁`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Lasso {
    pub lambda: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for Lasso {
    fn default() -> Self {
        Self {
            lambda: 1e-3,
            max_iter: 10_000,
            tol: 1e-10,
        }
    }
}

impl SparseRegressor for Lasso {
    fn fit(&self, theta: &Tensor, targets: &Tensor) -> Result<CoefficientMatrix> {
        check_inputs(theta, targets)?;
        if !(self.lambda >= 0.0) {
            return Err(Error::config("lasso penalty must be ≥ 0"));
        }
        let (n, t, l) = (theta.rows(), theta.cols(), targets.cols());
        let nf = n as f64;
        let cols: Vec<Vec<f64>> = (0..t).map(|c| (0..n).map(|i| theta.get(i, c)).collect()).collect();
        let sq: Vec<f64> = cols.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>() / nf).collect();
        let mut coef = Tensor::zeros(&[t, l]);
        let mut mask = vec![false; t * l];
        let mut degenerate = sq.contains(&0.0);
        for j in 0..l {
            let mut r: Vec<f64> = (0..n).map(|i| targets.get(i, j)).collect();
            let mut x = vec![0.0; t];
            for _ in 0..self.max_iter {
                let mut delta: f64 = 0.0;
                for c in 0..t {
                    if sq[c] == 0.0 {
                        continue;
                    }
                    let rho = cols[c].iter().zip(&r).map(|(a, b)| a * b).sum::<f64>() / nf + sq[c] * x[c];
                    let new = rho.signum() * (rho.abs() - self.lambda).max(0.0) / sq[c];
                    let d = new - x[c];
                    if d != 0.0 {
                        for (ri, a) in r.iter_mut().zip(&cols[c]) {
                            *ri -= d * a;
                        }
                        x[c] = new;
                        delta = delta.max(d.abs() * sq[c].sqrt());
                    }
                }
                if delta < self.tol {
                    break;
                }
            }
            if x.iter().all(|&v| v == 0.0) {
                degenerate = true;
            }
            for (c, v) in x.into_iter().enumerate() {
                if v != 0.0 {
                    coef.set(c, j, v);
                    mask[c * l + j] = true;
                }
            }
        }
        Ok(CoefficientMatrix {
            coefficients: coef,
            mask,
            library_hash: None,
            degenerate,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_theta(n: usize, t: usize, seed: u64) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::matrix(n, t, (0..n * t).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn planted_support_is_recovered() {
        let theta = random_theta(200, 10, 1);
        let mut truth = Tensor::zeros(&[10, 2]);
        truth.set(1, 0, 0.7);
        truth.set(4, 0, -1.3);
        truth.set(8, 0, 0.2);
        truth.set(3, 1, 2.0);
        let y = crate::tensor::matmul(&theta, &truth).unwrap();
        let cfg = StlsqConfig {
            threshold: 0.1,
            ridge: 0.0,
            max_iter: 20,
        };
        let xi = stlsq(&theta, &y, &cfg).unwrap();
        assert!(!xi.degenerate);
        assert_eq!(xi.support(0), vec![1, 4, 8]);
        assert_eq!(xi.support(1), vec![3]);
        assert!(xi.coefficients.max_abs_diff(&truth) < 1e-8);
        for (v, m) in xi.coefficients.data().iter().zip(&xi.mask) {
            if !m {
                assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn huge_threshold_zeroes_everything() {
        let theta = random_theta(50, 4, 2);
        let y = Tensor::matrix(50, 1, (0..50).map(|i| theta.get(i, 0) * 0.5).collect()).unwrap();
        let xi = stlsq(
            &theta,
            &y,
            &StlsqConfig {
                threshold: 10.0,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(xi.coefficients.data().iter().all(|&v| v == 0.0));
        assert!(xi.degenerate);
    }

    #[test]
    fn duplicate_column_is_degenerate() {
        let mut theta = random_theta(30, 3, 3);
        for i in 0..30 {
            let v = theta.get(i, 0);
            theta.set(i, 2, v);
        }
        let y = Tensor::matrix(30, 1, (0..30).map(|i| theta.get(i, 0)).collect()).unwrap();
        let xi = stlsq(
            &theta,
            &y,
            &StlsqConfig {
                threshold: 0.0,
                ridge: 0.0,
                max_iter: 5,
            },
        )
        .unwrap();
        assert!(xi.degenerate);
        // Least-norm split across the duplicated pair.
        assert!((xi.get(0, 0) - 0.5).abs() < 1e-10 && (xi.get(2, 0) - 0.5).abs() < 1e-10);
    }

    #[test]
    fn lasso_shrinks_and_selects() {
        let theta = random_theta(400, 6, 4);
        let y = Tensor::matrix(
            400,
            1,
            (0..400).map(|i| 2.0 * theta.get(i, 1) - theta.get(i, 5)).collect(),
        )
        .unwrap();
        let xi = Lasso {
            lambda: 1e-3,
            ..Default::default()
        }
        .fit(&theta, &y)
        .unwrap();
        assert_eq!(xi.support(0), vec![1, 5]);
        assert!((xi.get(1, 0) - 2.0).abs() < 0.01);
        let none = Lasso {
            lambda: 10.0,
            ..Default::default()
        }
        .fit(&theta, &y)
        .unwrap();
        assert!(none.degenerate);
    }
}
