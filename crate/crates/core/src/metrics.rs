//! Error and calibration metrics, interval estimates and their pooling
//! across imputations (Rubin's rules) and across clusters (random effects).

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::quantile_sorted;
use crate::seed::{derive_seed, rng_from};

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959_963_984_540_054;
pub const DEFAULT_BOOTSTRAP: usize = 1000;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("vectors have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least {need} observations, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("non-finite input")]
    NonFinite,
    #[error("predictions are constant, so the calibration slope is undefined")]
    ConstantPrediction,
    #[error("bootstrap needs at least 100 resamples, got {0}")]
    TooFewResamples(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateMethod {
    Analytic,
    Bootstrap,
    Rubin,
    RandomEffects,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricEstimate {
    pub value: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Sampling variance used when this estimate is pooled further.
    pub variance: f64,
    pub method: EstimateMethod,
}

impl MetricEstimate {
    fn normal(value: f64, variance: f64, method: EstimateMethod) -> Self {
        let half = Z95 * variance.max(0.0).sqrt();
        MetricEstimate { value, ci_low: value - half, ci_high: value + half, variance, method }
    }
}

fn check_pair(y: &[f64], yhat: &[f64], need: usize) -> Result<(), MetricsError> {
    if y.len() != yhat.len() {
        return Err(MetricsError::LengthMismatch(y.len(), yhat.len()));
    }
    if y.len() < need {
        return Err(MetricsError::TooFew { need, got: y.len() });
    }
    if y.iter().chain(yhat).any(|v| !v.is_finite()) {
        return Err(MetricsError::NonFinite);
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorMetrics {
    pub rmse: f64,
    pub mae: f64,
}

pub fn error_metrics(y: &[f64], yhat: &[f64]) -> Result<ErrorMetrics, MetricsError> {
    check_pair(y, yhat, 1)?;
    let n = y.len() as f64;
    let mut sq = 0.0;
    let mut abs = 0.0;
    for (a, b) in y.iter().zip(yhat) {
        let d = a - b;
        sq += d * d;
        abs += d.abs();
    }
    Ok(ErrorMetrics { rmse: (sq / n).sqrt(), mae: abs / n })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub intercept: MetricEstimate,
    pub slope: MetricEstimate,
    /// R² of the calibration regression.
    pub r2: f64,
    pub n: usize,
}

/// Least squares of observed on predicted with classical standard errors.
pub fn calibration(y: &[f64], yhat: &[f64]) -> Result<Calibration, MetricsError> {
    check_pair(y, yhat, 3)?;
    let n = y.len() as f64;
    let xbar = yhat.iter().sum::<f64>() / n;
    let ybar = y.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for (a, b) in y.iter().zip(yhat) {
        let dx = b - xbar;
        let dy = a - ybar;
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    let scale = yhat.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    if !(sxx / n > (1e-10 * scale).powi(2)) {
        return Err(MetricsError::ConstantPrediction);
    }
    let slope = sxy / sxx;
    let intercept = ybar - slope * xbar;
    let rss = y.iter().zip(yhat).map(|(a, b)| (a - intercept - slope * b).powi(2)).sum::<f64>();
    let s2 = rss / (n - 2.0);
    let var_slope = s2 / sxx;
    let var_intercept = s2 * (1.0 / n + xbar * xbar / sxx);
    let r2 = if syy > 0.0 { 1.0 - rss / syy } else { 1.0 };
    Ok(Calibration {
        intercept: MetricEstimate::normal(intercept, var_intercept, EstimateMethod::Analytic),
        slope: MetricEstimate::normal(slope, var_slope, EstimateMethod::Analytic),
        r2,
        n: y.len(),
    })
}

/// `1 − (1 − R²)(n − 1)/(n − p − 1)` for the calibration regression.
pub fn adjusted_r2(y: &[f64], yhat: &[f64], p: usize) -> Result<f64, MetricsError> {
    if y.len() <= p + 1 {
        return Err(MetricsError::TooFew { need: p + 2, got: y.len() });
    }
    let r2 = calibration(y, yhat)?.r2;
    Ok(adjust_r2(r2, y.len(), p))
}

pub fn adjust_r2(r2: f64, n: usize, p: usize) -> f64 {
    1.0 - (1.0 - r2) * (n as f64 - 1.0) / (n as f64 - p as f64 - 1.0)
}

/// Rubin's rules: mean point estimate, total variance
/// `W̄ + (1 + 1/m)·B` and a normal 95% interval.
pub fn rubin_pool(estimates: &[f64], within_var: &[f64]) -> MetricEstimate {
    let m = estimates.len() as f64;
    let point = estimates.iter().sum::<f64>() / m;
    let w = within_var.iter().sum::<f64>() / m;
    let b = if estimates.len() > 1 { estimates.iter().map(|e| (e - point).powi(2)).sum::<f64>() / (m - 1.0) } else { 0.0 };
    MetricEstimate::normal(point, w + (1.0 + 1.0 / m) * b, EstimateMethod::Rubin)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomEffectsPool {
    pub estimate: MetricEstimate,
    pub tau2: f64,
    pub q: f64,
}

/// DerSimonian–Laird random-effects pooling of per-cluster estimates.
pub fn pool_clusters(rows: &[MetricEstimate]) -> Result<RandomEffectsPool, MetricsError> {
    if rows.len() < 2 {
        return Err(MetricsError::TooFew { need: 2, got: rows.len() });
    }
    if rows.iter().any(|r| !(r.variance > 0.0) || !r.value.is_finite()) {
        return Err(MetricsError::NonFinite);
    }
    let w: Vec<f64> = rows.iter().map(|r| 1.0 / r.variance).collect();
    let sw: f64 = w.iter().sum();
    let sw2: f64 = w.iter().map(|v| v * v).sum();
    let fixed = rows.iter().zip(&w).map(|(r, wi)| wi * r.value).sum::<f64>() / sw;
    let q: f64 = rows.iter().zip(&w).map(|(r, wi)| wi * (r.value - fixed).powi(2)).sum();
    let c = sw - sw2 / sw;
    let tau2 = ((q - (rows.len() as f64 - 1.0)) / c).max(0.0);
    let ws: Vec<f64> = rows.iter().map(|r| 1.0 / (r.variance + tau2)).collect();
    let sws: f64 = ws.iter().sum();
    let pooled = rows.iter().zip(&ws).map(|(r, wi)| wi * r.value).sum::<f64>() / sws;
    Ok(RandomEffectsPool { estimate: MetricEstimate::normal(pooled, 1.0 / sws, EstimateMethod::RandomEffects), tau2, q })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapInterval {
    pub ci_low: f64,
    pub ci_high: f64,
    /// Standard deviation of the replicate statistics.
    pub se: f64,
}

/// Replicate values of several statistics over `b` row resamples. Each
/// replicate draws from its own derived seed.
pub fn bootstrap_replicates<F>(n: usize, b: usize, seed: u64, statistic: F) -> Result<Vec<Vec<f64>>, MetricsError>
where
    F: Fn(&[usize]) -> Vec<f64> + Sync,
{
    if b < 100 {
        return Err(MetricsError::TooFewResamples(b));
    }
    if n == 0 {
        return Err(MetricsError::TooFew { need: 1, got: 0 });
    }
    Ok((0..b)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng_from(derive_seed(seed, "bootstrap", r as u64));
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            statistic(&idx)
        })
        .collect())
}

pub fn percentile_interval(values: &[f64]) -> BootstrapInterval {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (values.len() as f64 - 1.0).max(1.0);
    BootstrapInterval { ci_low: quantile_sorted(&sorted, 0.025), ci_high: quantile_sorted(&sorted, 0.975), se: var.sqrt() }
}

/// Nonparametric percentile bootstrap interval of one statistic.
pub fn bootstrap_ci<F>(statistic: F, n: usize, b: usize, seed: u64) -> Result<BootstrapInterval, MetricsError>
where
    F: Fn(&[usize]) -> f64 + Sync,
{
    let reps = bootstrap_replicates(n, b, seed, |idx| vec![statistic(idx)])?;
    Ok(percentile_interval(&reps.iter().map(|r| r[0]).collect::<Vec<_>>()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn error_metric_cases() {
        assert_eq!(error_metrics(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), ErrorMetrics { rmse: 0.0, mae: 0.0 });
        let m = error_metrics(&[0.0, 2.0], &[0.0, 0.0]).unwrap();
        assert_eq!(m.rmse, 2f64.sqrt());
        assert_eq!(m.mae, 1.0);
        assert!(error_metrics(&[], &[]).is_err());
        assert!(error_metrics(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn calibration_identity_and_affine_inverse() {
        let y: Vec<f64> = (0..50).map(|i| 4.0 + (i as f64 * 0.3).sin()).collect();
        let c = calibration(&y, &y).unwrap();
        assert_eq!(c.intercept.value, 0.0);
        assert_eq!(c.slope.value, 1.0);
        assert_eq!(adjusted_r2(&y, &y, 1).unwrap(), 1.0);
        let yhat: Vec<f64> = y.iter().map(|v| (v - 1.0) / 2.0).collect();
        let c = calibration(&y, &yhat).unwrap();
        assert!((c.slope.value - 2.0).abs() < 1e-12);
        assert!((c.intercept.value - 1.0).abs() < 1e-12);
        assert!(matches!(calibration(&y, &vec![1.0; 50]), Err(MetricsError::ConstantPrediction)));
    }

    #[test]
    fn adjusted_r2_formula_and_noise() {
        assert!((adjust_r2(0.5, 5, 1) - 1.0 / 3.0).abs() < 1e-15);
        let mut rng = rng_from(5);
        let y: Vec<f64> = (0..10_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let yhat: Vec<f64> = (0..10_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        assert!(adjusted_r2(&y, &yhat, 1).unwrap().abs() < 0.02);
        assert!(adjusted_r2(&y[..2], &yhat[..2], 1).is_err());
    }

    #[test]
    fn rubin_cases() {
        let r = rubin_pool(&[1.0, 2.0, 3.0], &[0.1, 0.1, 0.1]);
        assert!((r.value - 2.0).abs() <= 1e-12);
        assert!((r.variance - (0.1 + 4.0 / 3.0)).abs() <= 1e-12);
        let one = rubin_pool(&[0.7], &[0.02]);
        assert_eq!((one.value, one.variance), (0.7, 0.02));
        let same = rubin_pool(&[0.5, 0.5, 0.5], &[0.1, 0.2, 0.3]);
        assert!((same.variance - 0.2).abs() <= 1e-15);
    }

    #[test]
    fn dersimonian_laird_cases() {
        let row = |v: f64, var: f64| MetricEstimate::normal(v, var, EstimateMethod::Analytic);
        let same = pool_clusters(&[row(0.3, 0.01), row(0.3, 0.01), row(0.3, 0.01)]).unwrap();
        assert!((same.estimate.value - 0.3).abs() < 1e-15);
        assert_eq!(same.tau2, 0.0);
        // hand computation: fixed mean 0.05, Q = 2·1000·0.95² = 1805,
        // C = 2000 − 2·10⁶/2000 = 1000, τ² = 1.804, weights 1/1.805 each
        let two = pool_clusters(&[row(-0.9, 0.001), row(1.0, 0.001)]).unwrap();
        assert!((two.tau2 - 1.804).abs() <= 1e-9);
        assert!((two.estimate.value - 0.05).abs() <= 1e-9);
        assert!((two.estimate.variance - 1.805 / 2.0).abs() <= 1e-9);
        assert!(two.estimate.ci_low < -1.5 && two.estimate.ci_high > 1.5);
        assert!(pool_clusters(&[row(0.1, 0.1)]).is_err());
    }

    #[test]
    fn bootstrap_properties() {
        let constant = bootstrap_ci(|_| 3.0, 40, 200, 1).unwrap();
        assert_eq!((constant.ci_low, constant.ci_high), (3.0, 3.0));
        let data: Vec<f64> = (0..60).map(|i| (i as f64).sqrt()).collect();
        let mean = |idx: &[usize]| idx.iter().map(|&i| data[i]).sum::<f64>() / idx.len() as f64;
        assert_eq!(bootstrap_ci(mean, 60, 300, 7).unwrap(), bootstrap_ci(mean, 60, 300, 7).unwrap());
        assert_eq!(bootstrap_ci(mean, 60, 99, 7), Err(MetricsError::TooFewResamples(99)));
    }

    #[test]
    fn bootstrap_coverage_near_nominal() {
        let reps = 500;
        let mut covered = 0;
        for r in 0..reps {
            let mut rng = rng_from(derive_seed(77, "coverage", r));
            let x: Vec<f64> = (0..200).map(|_| StandardNormal.sample(&mut rng)).collect();
            let ci = bootstrap_ci(|idx| idx.iter().map(|&i| x[i]).sum::<f64>() / idx.len() as f64, 200, 200, r).unwrap();
            if ci.ci_low <= 0.0 && 0.0 <= ci.ci_high {
                covered += 1;
            }
        }
        let rate = covered as f64 / reps as f64;
        assert!((rate - 0.95).abs() <= 0.03, "{rate}");
    }

    proptest! {
        #[test]
        fn rmse_dominates_mae(pairs in prop::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 1..50)) {
            let (y, yhat): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let m = error_metrics(&y, &yhat).unwrap();
            prop_assert!(m.rmse >= m.mae * (1.0 - 1e-12));
            prop_assert!(m.mae >= 0.0);
        }

        #[test]
        fn intervals_contain_estimates(values in prop::collection::vec(-5.0f64..5.0, 2..8), w in 0.0f64..1.0) {
            let r = rubin_pool(&values, &vec![w; values.len()]);
            prop_assert!(r.ci_low <= r.value && r.value <= r.ci_high);
        }
    }
}
