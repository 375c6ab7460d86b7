use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::LearnerError;

const COEF_TOL: f64 = 1e-7;
const MAX_SWEEPS: usize = 100_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElasticNetModel {
    pub intercept: f64,
    /// Coefficients on the original column scale.
    pub coef: Vec<f64>,
    pub sweeps: usize,
}

impl ElasticNetModel {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        self.intercept + row.iter().zip(&self.coef).map(|(x, b)| x * b).sum::<f64>()
    }
}

pub fn soft_threshold(z: f64, gamma: f64) -> f64 {
    if z > gamma {
        z - gamma
    } else if z < -gamma {
        z + gamma
    } else {
        0.0
    }
}

/// Standardised problem shared by the fit and its optimality checks.
pub(crate) struct Standardized {
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
    pub y_mean: f64,
    /// `ZᵀZ / n` for the standardised columns.
    pub gram: DMatrix<f64>,
    /// `Zᵀ(y - ȳ) / n`.
    pub cross: DVector<f64>,
}

pub(crate) fn standardize(x: &DMatrix<f64>, y: &[f64]) -> Standardized {
    let (n, p) = x.shape();
    let nf = n as f64;
    let y_mean = y.iter().sum::<f64>() / nf;
    let mut z = x.clone();
    let mut means = vec![0.0; p];
    let mut sds = vec![0.0; p];
    for j in 0..p {
        let mut col = z.column_mut(j);
        let mean = col.sum() / nf;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nf;
        let sd = var.sqrt();
        means[j] = mean;
        sds[j] = sd;
        let scale = if sd > 0.0 { 1.0 / sd } else { 0.0 };
        for v in col.iter_mut() {
            *v = (*v - mean) * scale;
        }
    }
    let yc = DVector::from_iterator(n, y.iter().map(|v| v - y_mean));
    Standardized { gram: z.tr_mul(&z) / nf, cross: z.tr_mul(&yc) / nf, means, sds, y_mean }
}

/// Cyclic coordinate descent on standardised columns. Returns the
/// standardised coefficients and the number of sweeps used.
pub(crate) fn descend(s: &Standardized, lambda: f64, alpha: f64) -> (Vec<f64>, usize) {
    let p = s.cross.len();
    let mut beta = vec![0.0; p];
    // gram * beta, kept current as coordinates move
    let mut q = vec![0.0; p];
    let l1 = lambda * alpha;
    let l2 = lambda * (1.0 - alpha);
    for sweep in 1..=MAX_SWEEPS {
        let mut max_change: f64 = 0.0;
        for j in 0..p {
            let gjj = s.gram[(j, j)];
            if gjj <= 0.0 {
                continue;
            }
            let rho = s.cross[j] - q[j] + gjj * beta[j];
            let new = soft_threshold(rho, l1) / (gjj + l2);
            let delta = new - beta[j];
            if delta != 0.0 {
                for (k, qk) in q.iter_mut().enumerate() {
                    *qk += s.gram[(k, j)] * delta;
                }
                beta[j] = new;
                max_change = max_change.max(delta.abs());
            }
        }
        if max_change <= COEF_TOL {
            return (beta, sweep);
        }
    }
    (beta, MAX_SWEEPS)
}

/// Minimises `(1/2n)·|y − β0 − Xβ|² + λ[α|β|₁ + (1−α)/2·|β|²]` over
/// standardised columns; the intercept is unpenalised and coefficients are
/// returned on the original scale.
pub fn fit_elastic_net(x: &DMatrix<f64>, y: &[f64], lambda: f64, alpha: f64) -> Result<ElasticNetModel, LearnerError> {
    if !(lambda >= 0.0) || !lambda.is_finite() || !(0.0..=1.0).contains(&alpha) {
        return Err(LearnerError::InvalidSpec(format!("lambda {lambda} must be >= 0 and alpha {alpha} in [0, 1]")));
    }
    if x.nrows() < 2 {
        return Err(LearnerError::TooFewRows(x.nrows()));
    }
    let s = standardize(x, y);
    let (beta, sweeps) = descend(&s, lambda, alpha);
    let coef: Vec<f64> = beta.iter().zip(&s.sds).map(|(b, sd)| if *sd > 0.0 { b / sd } else { 0.0 }).collect();
    let intercept = s.y_mean - coef.iter().zip(&s.means).map(|(b, m)| b * m).sum::<f64>();
    Ok(ElasticNetModel { intercept, coef, sweeps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::ols_with_intercept;

    fn toy(n: usize) -> (DMatrix<f64>, Vec<f64>) {
        let x = DMatrix::from_fn(n, 3, |i, j| ((i * (j + 3) * 7919) % 101) as f64 / 10.0 + j as f64);
        let y: Vec<f64> = (0..n).map(|i| 1.5 + 0.3 * x[(i, 0)] - 0.7 * x[(i, 1)] + 0.1 * x[(i, 2)] + ((i * 31) % 7) as f64 * 0.05).collect();
        (x, y)
    }

    #[test]
    fn soft_threshold_values() {
        assert_eq!(soft_threshold(3.0, 1.0), 2.0);
        assert_eq!(soft_threshold(-3.0, 1.0), -2.0);
        assert_eq!(soft_threshold(0.5, 1.0), 0.0);
    }

    #[test]
    fn zero_penalty_matches_least_squares() {
        let (x, y) = toy(60);
        let m = fit_elastic_net(&x, &y, 0.0, 0.5).unwrap();
        let ols = ols_with_intercept(&x, &y).unwrap();
        assert!((m.intercept - ols[0]).abs() <= 1e-6);
        for j in 0..3 {
            assert!((m.coef[j] - ols[j + 1]).abs() <= 1e-6, "{j}: {} vs {}", m.coef[j], ols[j + 1]);
        }
    }

    #[test]
    fn huge_penalty_leaves_only_the_mean() {
        let (x, y) = toy(40);
        let m = fit_elastic_net(&x, &y, 1e6, 0.5).unwrap();
        assert!(m.coef.iter().all(|&b| b == 0.0));
        assert!((m.intercept - y.iter().sum::<f64>() / 40.0).abs() < 1e-12);
    }

    #[test]
    fn kkt_conditions_hold() {
        let (x, y) = toy(80);
        for &(lambda, alpha) in &[(0.01, 0.5), (0.1, 0.9), (0.05, 0.1)] {
            let s = standardize(&x, &y);
            let (beta, _) = descend(&s, lambda, alpha);
            let q = &s.gram * DVector::from_column_slice(&beta);
            for j in 0..3 {
                let grad = s.cross[j] - q[j];
                if beta[j] != 0.0 {
                    let expect = lambda * alpha * beta[j].signum() + lambda * (1.0 - alpha) * beta[j];
                    assert!((grad - expect).abs() <= 1e-5);
                } else {
                    assert!(grad.abs() <= lambda * alpha + 1e-5);
                }
            }
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        let (x, y) = toy(10);
        assert!(fit_elastic_net(&x, &y, -1.0, 0.5).is_err());
        assert!(fit_elastic_net(&x, &y, 1.0, 1.5).is_err());
    }
}
