//! Convex stacking of the base learners and the locked multi-pipeline model.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::learners::{self, FittedLearner, LearnerError, LearnerKind, LearnerSpec};
use crate::mice::{apply_imputer, impute_single, ImputationModelSet, MiceError};
use crate::schema::{EncodedDataset, EncodingMeta, Predictors};
use crate::seed::derive_seed;

pub const FORMAT_VERSION: u32 = 1;
/// Objective values closer than this are treated as tied.
const TIE_TOL: f64 = 1e-14;

#[derive(Debug, Error, PartialEq)]
pub enum StackError {
    #[error("stacking inputs must be finite")]
    NonFinite,
    #[error("stacking needs at least {need} rows, got {got}")]
    TooFewRows { need: usize, got: usize },
    #[error("pipeline {pipeline}, {kind}: {source}")]
    Refit { pipeline: usize, kind: LearnerKind, source: LearnerError },
    #[error("pipeline {pipeline}: {source}")]
    Imputation { pipeline: usize, source: MiceError },
    #[error("locked model is inconsistent: {0}")]
    Inconsistent(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackWeights {
    pub w: Vec<f64>,
}

impl StackWeights {
    pub fn is_valid(&self, tol: f64) -> bool {
        self.w.iter().all(|&v| v >= 0.0) && (self.w.iter().sum::<f64>() - 1.0).abs() <= tol
    }

    pub fn combine(&self, preds: &[f64]) -> f64 {
        self.w.iter().zip(preds).map(|(w, p)| w * p).sum()
    }
}

fn entropy(w: &[f64]) -> f64 {
    -w.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

/// Minimum-norm solution of the equality-constrained least squares problem
/// on the columns in `support`.
fn solve_on_support(gram: &DMatrix<f64>, cross: &DVector<f64>, support: &[usize]) -> Option<Vec<f64>> {
    let k = support.len();
    let mut kkt = DMatrix::<f64>::zeros(k + 1, k + 1);
    let mut rhs = DVector::<f64>::zeros(k + 1);
    for (a, &i) in support.iter().enumerate() {
        for (b, &j) in support.iter().enumerate() {
            kkt[(a, b)] = gram[(i, j)];
        }
        kkt[(a, k)] = 1.0;
        kkt[(k, a)] = 1.0;
        rhs[a] = cross[i];
    }
    rhs[k] = 1.0;
    let sol = kkt.svd(true, true).solve(&rhs, 1e-12).ok()?;
    sol.iter().all(|v| v.is_finite()).then(|| sol.iter().take(k).copied().collect())
}

/// Minimises `|y − P w|²` over the probability simplex by enumerating every
/// non-empty support, solving the equality-constrained problem on it and
/// keeping the feasible minimiser. Among tied minimisers the one with the
/// largest entropy wins.
pub fn fit_stack_weights(oof: &DMatrix<f64>, y: &[f64]) -> Result<StackWeights, StackError> {
    let (n, k) = oof.shape();
    if n < k.max(1) {
        return Err(StackError::TooFewRows { need: k.max(1), got: n });
    }
    if oof.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(StackError::NonFinite);
    }
    let nf = n as f64;
    let yv = DVector::from_column_slice(y);
    let gram = oof.tr_mul(oof) / nf;
    let cross = oof.tr_mul(&yv) / nf;
    let mse = |w: &[f64]| {
        let fit = oof * DVector::from_column_slice(w);
        (&yv - fit).norm_squared() / nf
    };
    let mut best: Option<(f64, f64, Vec<f64>)> = None;
    for mask in 1u32..(1 << k) {
        let support: Vec<usize> = (0..k).filter(|&j| mask & (1 << j) != 0).collect();
        let Some(ws) = solve_on_support(&gram, &cross, &support) else {
            continue;
        };
        if ws.iter().any(|&v| v < -1e-12) {
            continue;
        }
        let mut w = vec![0.0; k];
        for (&j, v) in support.iter().zip(ws) {
            w[j] = v.max(0.0);
        }
        let total: f64 = w.iter().sum();
        if !(total > 0.0) {
            continue;
        }
        w.iter_mut().for_each(|v| *v /= total);
        let obj = mse(&w);
        let ent = entropy(&w);
        let better = match &best {
            None => true,
            Some((b, e, _)) => obj < b - TIE_TOL || (obj <= b + TIE_TOL && ent > *e + 1e-12),
        };
        if better {
            best = Some((obj, ent, w));
        }
    }
    let (_, _, w) = best.ok_or(StackError::NonFinite)?;
    Ok(StackWeights { w })
}

/// One imputation stream's locked pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pipeline {
    pub imputer: ImputationModelSet,
    /// Base learners in [`LearnerKind::ALL`] order.
    pub learners: Vec<FittedLearner>,
    pub weights: StackWeights,
}

impl Pipeline {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let preds: Vec<f64> = self.learners.iter().map(|l| l.predict_row(row)).collect();
        self.weights.combine(&preds)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub base_seed: u64,
    pub m: usize,
    pub iterations: usize,
    /// Selected specification per pipeline, learners in canonical order.
    pub selected: Vec<Vec<String>>,
    /// sha256 of the serialised tuning results.
    pub tune_digest: String,
    pub development_rows: usize,
    pub clusters: Vec<String>,
    pub created_at: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LockedModel {
    pub format_version: u32,
    pub meta: EncodingMeta,
    pub pipelines: Vec<Pipeline>,
    pub provenance: Provenance,
}

/// Inputs for one pipeline of [`lock`].
pub struct PipelineInput {
    pub imputer: ImputationModelSet,
    pub completed: EncodedDataset,
    pub specs: Vec<LearnerSpec>,
    pub weights: StackWeights,
}

/// Refits every pipeline's tuned learners on its completed development
/// data and bundles them with its imputer and stack weights. Any failure
/// aborts the whole lock.
pub fn lock(meta: &EncodingMeta, inputs: Vec<PipelineInput>, provenance: Provenance) -> Result<LockedModel, StackError> {
    if inputs.is_empty() {
        return Err(StackError::Inconsistent("no pipelines".into()));
    }
    let pipelines = inputs
        .into_par_iter()
        .enumerate()
        .map(|(pi, input)| {
            if input.completed.meta != *meta {
                return Err(StackError::Inconsistent(format!("pipeline {pi} uses a different encoding")));
            }
            if !input.weights.is_valid(1e-12) || input.weights.w.len() != input.specs.len() {
                return Err(StackError::Inconsistent(format!("pipeline {pi} has invalid stack weights")));
            }
            let learners = input
                .specs
                .par_iter()
                .map(|spec| learners::fit(spec, &input.completed).map_err(|source| StackError::Refit { pipeline: pi, kind: spec.kind, source }))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(Pipeline { imputer: input.imputer, learners, weights: input.weights })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(LockedModel { format_version: FORMAT_VERSION, meta: meta.clone(), pipelines, provenance })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LockedPrediction {
    pub log_pred_per_pipeline: Vec<f64>,
    pub log_pred_mean: f64,
    pub predicted_minutes: f64,
    pub pipeline_spread: f64,
    pub imputed_fields: Vec<String>,
}

impl LockedModel {
    /// Completes and predicts one partial record with every pipeline.
    pub fn predict_one(&self, record: &Predictors, seed: u64) -> Result<LockedPrediction, StackError> {
        let mut logs = Vec::with_capacity(self.pipelines.len());
        let mut imputed_fields = Vec::new();
        for (pi, p) in self.pipelines.iter().enumerate() {
            let done = impute_single(&p.imputer, &self.meta, record, seed).map_err(|source| StackError::Imputation { pipeline: pi, source })?;
            logs.push(p.predict_row(&done.row));
            imputed_fields = done.imputed_fields;
        }
        let log_pred_mean = logs.iter().sum::<f64>() / logs.len() as f64;
        let lo = logs.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let predicted_minutes = log_pred_mean.exp();
        if !predicted_minutes.is_finite() || !(predicted_minutes > 0.0) {
            return Err(StackError::NonFinite);
        }
        Ok(LockedPrediction { log_pred_per_pipeline: logs, log_pred_mean, predicted_minutes, pipeline_spread: hi - lo, imputed_fields })
    }

    /// Per-record predictions; a failing record does not stop the batch.
    pub fn predict_locked(&self, records: &[Predictors], seed: u64) -> Vec<Result<LockedPrediction, StackError>> {
        records.par_iter().enumerate().map(|(i, r)| self.predict_one(r, derive_seed(seed, "predict-record", i as u64))).collect()
    }

    /// Log predictions of every pipeline for a whole encoded cohort: each
    /// pipeline completes the cohort with its own frozen imputer. Returns
    /// one vector per pipeline.
    pub fn predict_dataset(&self, data: &EncodedDataset, use_outcome: bool, seed: u64) -> Result<Vec<Vec<f64>>, StackError> {
        self.pipelines
            .par_iter()
            .enumerate()
            .map(|(pi, p)| {
                let completed = apply_imputer(&p.imputer, data, use_outcome, seed).map_err(|source| StackError::Imputation { pipeline: pi, source })?;
                let per_learner: Vec<Vec<f64>> = p.learners.iter().map(|l| l.predict_matrix(&completed.x)).collect();
                Ok((0..data.n())
                    .map(|i| {
                        let row: Vec<f64> = per_learner.iter().map(|v| v[i]).collect();
                        p.weights.combine(&row)
                    })
                    .collect())
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn noise(n: usize, salt: usize) -> Vec<f64> {
        (0..n).map(|i| (((i + salt) * 2654435761usize) % 1000) as f64 / 500.0 - 1.0).collect()
    }

    /// Simplex grid search: a 1/100 grid, then a 1e-3 grid within ±0.01
    /// of the coarse winner.
    fn grid_oracle(oof: &DMatrix<f64>, y: &[f64]) -> (Vec<f64>, f64) {
        let n = y.len() as f64;
        let eval = |w: &[f64; 4]| -> f64 { (0..y.len()).map(|i| (y[i] - (0..4).map(|k| oof[(i, k)] * w[k]).sum::<f64>()).powi(2)).sum::<f64>() / n };
        let mut best = ([0.0; 4], f64::INFINITY);
        for a in 0..=100 {
            for b in 0..=100 - a {
                for c in 0..=100 - a - b {
                    let w = [a as f64 / 100.0, b as f64 / 100.0, c as f64 / 100.0, (100 - a - b - c) as f64 / 100.0];
                    let v = eval(&w);
                    if v < best.1 {
                        best = (w, v);
                    }
                }
            }
        }
        let centre = best.0;
        for da in -10..=10 {
            for db in -10..=10 {
                for dc in -10..=10 {
                    let w0 = centre[0] + da as f64 * 1e-3;
                    let w1 = centre[1] + db as f64 * 1e-3;
                    let w2 = centre[2] + dc as f64 * 1e-3;
                    let w = [w0, w1, w2, 1.0 - w0 - w1 - w2];
                    if w.iter().all(|&v| v >= -1e-12) {
                        let v = eval(&w);
                        if v < best.1 {
                            best = (w, v);
                        }
                    }
                }
            }
        }
        (best.0.to_vec(), best.1)
    }

    #[test]
    fn exact_column_gets_all_weight() {
        let n = 200;
        let y: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin() + 4.0).collect();
        let oof = DMatrix::from_fn(n, 4, |i, k| if k == 0 { y[i] } else { 4.0 + noise(n, k * 17)[i] });
        let w = fit_stack_weights(&oof, &y).unwrap();
        assert!((w.w[0] - 1.0).abs() <= 1e-6);
        let (oracle, _) = grid_oracle(&oof, &y);
        assert!((oracle[0] - 1.0).abs() <= 1e-3);
    }

    #[test]
    fn identical_columns_give_uniform_weights() {
        let y: Vec<f64> = (0..50).map(|i| i as f64 / 10.0).collect();
        let col = noise(50, 3);
        let oof = DMatrix::from_fn(50, 4, |i, _| col[i]);
        let w = fit_stack_weights(&oof, &y).unwrap();
        for v in &w.w {
            assert!((v - 0.25).abs() <= 1e-12);
        }
    }

    #[test]
    fn matches_grid_oracle_on_mixed_problem() {
        let n = 300;
        let base: Vec<f64> = (0..n).map(|i| (i as f64 * 0.11).cos()).collect();
        let y: Vec<f64> = base.iter().zip(noise(n, 1)).map(|(b, e)| b + 0.3 * e).collect();
        let oof = DMatrix::from_fn(n, 4, |i, k| base[i] + 0.4 * noise(n, 10 + k * 7)[i] * (k as f64 + 1.0) / 2.0);
        let w = fit_stack_weights(&oof, &y).unwrap();
        let (_, oracle_mse) = grid_oracle(&oof, &y);
        let fit = &oof * DVector::from_column_slice(&w.w);
        let mse = (0..n).map(|i| (y[i] - fit[i]).powi(2)).sum::<f64>() / n as f64;
        assert!(mse <= oracle_mse + 1e-12);
    }

    #[test]
    fn rejects_bad_input() {
        let mut oof = DMatrix::from_element(10, 4, 1.0);
        let y = vec![1.0; 10];
        oof[(0, 0)] = f64::NAN;
        assert_eq!(fit_stack_weights(&oof, &y), Err(StackError::NonFinite));
        assert!(matches!(fit_stack_weights(&DMatrix::from_element(3, 4, 1.0), &y[..3]), Err(StackError::TooFewRows { .. })));
    }

    proptest! {
        #[test]
        fn weights_on_simplex_and_dominate_vertices(cols in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 12), 4), y in prop::collection::vec(-3.0f64..3.0, 12)) {
            let oof = DMatrix::from_fn(12, 4, |i, k| cols[k][i]);
            let w = fit_stack_weights(&oof, &y).unwrap();
            prop_assert!(w.w.iter().all(|&v| v >= 0.0));
            prop_assert!((w.w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            let mse = |f: &dyn Fn(usize) -> f64| (0..12).map(|i| (y[i] - f(i)).powi(2)).sum::<f64>() / 12.0;
            let stacked = mse(&|i| (0..4).map(|k| oof[(i, k)] * w.w[k]).sum());
            for k in 0..4 {
                prop_assert!(stacked <= mse(&|i| oof[(i, k)]) + 1e-12);
            }
        }
    }
}
