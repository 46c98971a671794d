use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A percentage metric together with the number of points left out because
/// it is undefined there.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Percentage {
    pub value: f64,
    pub excluded: usize,
}

fn check_lengths(pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::dim(format!(
            "{} predictions for {} observations",
            pred.len(),
            truth.len()
        )));
    }
    Ok(())
}

fn mean_over<F: Fn(f64, f64) -> Option<f64>>(name: &str, pred: &[f64], truth: &[f64], f: F) -> Result<Percentage> {
    check_lengths(pred, truth)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        if let Some(v) = f(p, t) {
            sum += v;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::UndefinedMetric(format!("{name}: every point was excluded")));
    }
    Ok(Percentage {
        value: sum / n as f64,
        excluded: pred.len() - n,
    })
}

/// Mean absolute percentage error, `mean 100·|p − t|/|t|`. Points with
/// `t = 0` are excluded.
pub fn mape(pred: &[f64], truth: &[f64]) -> Result<Percentage> {
    mean_over("MAPE", pred, truth, |p, t| {
        (t != 0.0).then(|| 100.0 * (p - t).abs() / t.abs())
    })
}

/// Symmetric MAPE, `mean 200·|p − t|/(|p| + |t|)`, bounded by 200. Points
/// where both are zero are excluded.
pub fn smape(pred: &[f64], truth: &[f64]) -> Result<Percentage> {
    mean_over("sMAPE", pred, truth, |p, t| {
        let d = p.abs() + t.abs();
        (d > 0.0).then(|| 200.0 * (p - t).abs() / d)
    })
}

/// Coefficient of determination `1 − SS_res / SS_tot`.
pub fn r2(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_lengths(pred, truth)?;
    if truth.len() < 2 {
        return Err(Error::UndefinedMetric("R² needs at least two points".into()));
    }
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let ss_tot: f64 = truth.iter().map(|t| (t - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::UndefinedMetric("R² of a constant series".into()));
    }
    let ss_res: f64 = pred.iter().zip(truth).map(|(p, t)| (t - p).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Weights `(1/nᵢ) / Σ 1/nⱼ`, favouring small windows.
pub fn inverse_size_weights(sizes: &[usize]) -> Result<Vec<f64>> {
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(Error::UndefinedMetric(
            "window sizes must be a non-empty list of positive counts".into(),
        ));
    }
    let total: f64 = sizes.iter().map(|&n| 1.0 / n as f64).sum();
    Ok(sizes.iter().map(|&n| (1.0 / n as f64) / total).collect())
}

/// Inverse-size weighted average of per-size R² scores.
pub fn weighted_r2(scores: &[f64], sizes: &[usize]) -> Result<f64> {
    if scores.len() != sizes.len() {
        return Err(Error::dim(format!("{} scores for {} sizes", scores.len(), sizes.len())));
    }
    Ok(inverse_size_weights(sizes)?
        .iter()
        .zip(scores)
        .map(|(w, s)| w * s)
        .sum())
}

/// Linear-interpolation percentile (`q` in `[0, 100]`) of sorted data.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "kebab-case")]
pub enum OutlierPolicy {
    /// Keep everything (the sMAPE path).
    Keep,
    /// Drop values whose z-score of `ln(value)` exceeds the threshold.
    LogZScore { threshold: f64 },
}

impl Default for OutlierPolicy {
    fn default() -> Self {
        OutlierPolicy::LogZScore { threshold: 3.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub p90: f64,
    /// Share of diverged results, in percent.
    pub divergence_pct: f64,
    pub outliers_removed: usize,
}

/// Statistics over per-result metric values, `None` marking a diverged
/// result. Divergence is counted over all results; the statistics cover
/// the finite values that survive the outlier policy. The result does not
/// depend on input order.
pub fn summarize(values: &[Option<f64>], policy: OutlierPolicy) -> Result<MetricSummary> {
    if values.is_empty() {
        return Err(Error::UndefinedMetric("nothing to summarize".into()));
    }
    let mut kept: Vec<f64> = values.iter().flatten().copied().filter(|v| v.is_finite()).collect();
    let diverged = values.len() - kept.len();
    kept.sort_by(f64::total_cmp);
    let mut removed = 0;
    if let OutlierPolicy::LogZScore { threshold } = policy {
        if kept.len() > 2 {
            let logs: Vec<f64> = kept.iter().map(|v| v.max(1e-300).ln()).collect();
            let n = logs.len() as f64;
            let mean = logs.iter().sum::<f64>() / n;
            let sd = (logs.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / n).sqrt();
            if sd > 0.0 {
                let before = kept.len();
                kept = kept
                    .into_iter()
                    .zip(&logs)
                    .filter(|(_, l)| ((*l - mean) / sd).abs() <= threshold)
                    .map(|(v, _)| v)
                    .collect();
                removed = before - kept.len();
            }
        }
    }
    let count = kept.len();
    let mean = if count > 0 {
        kept.iter().sum::<f64>() / count as f64
    } else {
        f64::NAN
    };
    Ok(MetricSummary {
        count,
        mean,
        median: percentile(&kept, 50.0),
        p90: percentile(&kept, 90.0),
        divergence_pct: 100.0 * diverged as f64 / values.len() as f64,
        outliers_removed: removed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn naive_mape(p: &[f64], t: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..p.len() {
            s += 100.0 * ((p[i] - t[i]) / t[i]).abs();
        }
        s / p.len() as f64
    }

    fn naive_smape(p: &[f64], t: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..p.len() {
            s += 200.0 * (p[i] - t[i]).abs() / (p[i].abs() + t[i].abs());
        }
        s / p.len() as f64
    }

    fn naive_r2(p: &[f64], t: &[f64]) -> f64 {
        let mut mean = 0.0;
        for v in t {
            mean += v;
        }
        mean /= t.len() as f64;
        let (mut res, mut tot) = (0.0, 0.0);
        for i in 0..t.len() {
            res += (t[i] - p[i]) * (t[i] - p[i]);
            tot += (t[i] - mean) * (t[i] - mean);
        }
        1.0 - res / tot
    }

    #[test]
    fn closed_forms() {
        let t = [1.0, -2.0, 4.0];
        assert_eq!(mape(&t, &t).unwrap().value, 0.0);
        let p: Vec<f64> = t.iter().map(|v| 1.1 * v).collect();
        assert!((mape(&p, &t).unwrap().value - 10.0).abs() < 1e-12);
        assert_eq!(smape(&[0.0, 0.0], &[1.0, -3.0]).unwrap().value, 200.0);
        assert_eq!(r2(&t, &t).unwrap(), 1.0);
        let mean = t.iter().sum::<f64>() / 3.0;
        assert!(r2(&[mean; 3], &t).unwrap().abs() < 1e-15);
        assert!((weighted_r2(&[1.0, 0.0], &[100, 900]).unwrap() - 0.9).abs() < 1e-12);
        assert!((weighted_r2(&[0.7; 5], &[100, 300, 500, 700, 900]).unwrap() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn exclusions_and_undefined() {
        let m = mape(&[1.0, 2.0], &[0.0, 1.0]).unwrap();
        assert_eq!((m.value, m.excluded), (100.0, 1));
        assert!(matches!(mape(&[1.0], &[0.0]), Err(Error::UndefinedMetric(_))));
        assert!(matches!(smape(&[0.0], &[0.0]), Err(Error::UndefinedMetric(_))));
        assert!(matches!(r2(&[1.0, 2.0], &[3.0, 3.0]), Err(Error::UndefinedMetric(_))));
        assert!(matches!(weighted_r2(&[], &[]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn prefix_sizes_weights() {
        let w = inverse_size_weights(&[100, 300, 500, 700, 900]).unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(w.windows(2).all(|p| p[0] > p[1]));
        // 1/100 over Σ 1/nᵢ = 0.01 / 0.016746...
        assert!((w[0] - 0.01 / (0.01 + 1.0 / 300.0 + 0.002 + 1.0 / 700.0 + 1.0 / 900.0)).abs() < 1e-15);
    }

    #[test]
    fn oracles_on_random_inputs() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for _ in 0..1000 {
            let n = rng.gen_range(2..40);
            let t: Vec<f64> = (0..n)
                .map(|_| rng.gen_range(0.1..10.0) * if rng.gen() { 1.0 } else { -1.0 })
                .collect();
            let p: Vec<f64> = (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect();
            assert!((mape(&p, &t).unwrap().value - naive_mape(&p, &t)).abs() < 1e-12 * naive_mape(&p, &t).max(1.0));
            let s = smape(&p, &t).unwrap().value;
            assert!((s - naive_smape(&p, &t)).abs() < 1e-12 * s.max(1.0));
            assert!(s <= 200.0);
            let r = r2(&p, &t).unwrap();
            assert!((r - naive_r2(&p, &t)).abs() < 1e-12 * r.abs().max(1.0));
            assert!(r <= 1.0);
        }
    }

    #[test]
    fn summary_cases() {
        let same = summarize(&[Some(2.0); 6], OutlierPolicy::default()).unwrap();
        assert_eq!(
            (same.mean, same.median, same.p90, same.outliers_removed),
            (2.0, 2.0, 2.0, 0)
        );
        let mut v: Vec<Option<f64>> = (1..=9).map(|i| Some(i as f64)).collect();
        v.push(None);
        let s = summarize(&v, OutlierPolicy::default()).unwrap();
        assert_eq!(s.divergence_pct, 10.0);
        assert_eq!(s.count, 9);
        assert_eq!(s.mean, 5.0);
        assert!((s.p90 - 8.2).abs() < 1e-12);
    }

    #[test]
    fn outlier_policy_differs_by_path() {
        // 30 values with log-spread about 0.1 and one 10σ-high value.
        let mut v: Vec<Option<f64>> = (0..30).map(|i| Some((0.1 * ((i % 3) as f64 - 1.0)).exp())).collect();
        v.push(Some(1e6));
        let z = summarize(&v, OutlierPolicy::default()).unwrap();
        assert_eq!(z.outliers_removed, 1);
        assert!(z.mean < 2.0);
        let keep = summarize(&v, OutlierPolicy::Keep).unwrap();
        assert_eq!(keep.outliers_removed, 0);
        assert_eq!(keep.count, 31);
    }

    proptest! {
        #[test]
        fn smape_symmetric_and_bounded(pairs in prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 1..50)) {
            let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            if let (Ok(x), Ok(y)) = (smape(&a, &b), smape(&b, &a)) {
                prop_assert!((x.value - y.value).abs() <= 1e-12 * x.value.max(1.0));
                prop_assert!(x.value <= 200.0 && x.value >= 0.0);
            }
        }

        #[test]
        fn summary_ignores_order(mut v in prop::collection::vec(prop::option::of(0.01f64..100.0), 1..40), seed in 0u64..100) {
            let a = summarize(&v, OutlierPolicy::default()).unwrap();
            use rand::seq::SliceRandom;
            v.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let b = summarize(&v, OutlierPolicy::default()).unwrap();
            prop_assert!(a.count == b.count && a.outliers_removed == b.outliers_removed);
            prop_assert!(a.median.to_bits() == b.median.to_bits() || (a.median.is_nan() && b.median.is_nan()));
            prop_assert!((a.mean - b.mean).abs() <= 1e-12 * a.mean.abs().max(1.0) || (a.mean.is_nan() && b.mean.is_nan()));
        }
    }
}
