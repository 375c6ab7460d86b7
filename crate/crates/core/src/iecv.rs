//! Internal-external cross-validation: one fold per centre-year cluster,
//! fold-local imputation, grid tuning by pooled out-of-fold MSE and the
//! out-of-fold prediction matrix used for stacking.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::learners::{self, LearnerError, LearnerKind, LearnerSpec};
use crate::mice::{apply_imputer, fit_imputer, ImputationModelSet, ImputerOptions, MiceError};
use crate::schema::{ClusterKey, EncodedDataset};
use crate::seed::{derive_seed, stable_hash};

#[derive(Debug, Error, PartialEq)]
pub enum IecvError {
    #[error("LOCO requires ≥2 clusters, found {0}")]
    TooFewClusters(usize),
    #[error("tuning grid for {0} is empty")]
    EmptyGrid(LearnerKind),
    #[error("imputation for fold {fold}: {source}")]
    Imputation { fold: ClusterKey, source: MiceError },
    #[error("fold {fold}, {spec}: {source}")]
    Learner { fold: ClusterKey, spec: String, source: LearnerError },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fold {
    pub held_out: ClusterKey,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

impl Fold {
    /// Seed offset for this fold, independent of fold evaluation order.
    pub fn seed(&self, base: u64) -> u64 {
        base ^ stable_hash(self.held_out.to_string().as_bytes())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub n: usize,
    pub folds: Vec<Fold>,
}

/// One leave-one-cluster-out fold per distinct cluster, ordered by
/// (site, year).
pub fn make_folds(data: &EncodedDataset) -> Result<FoldPlan, IecvError> {
    let clusters = data.distinct_clusters();
    if clusters.len() < 2 {
        return Err(IecvError::TooFewClusters(clusters.len()));
    }
    let folds = clusters
        .into_iter()
        .map(|key| {
            let (validation, train): (Vec<usize>, Vec<usize>) = (0..data.n()).partition(|&i| data.clusters[i] == key);
            Fold { held_out: key, train, validation }
        })
        .collect();
    Ok(FoldPlan { n: data.n(), folds })
}

/// How fold-local imputation is run for one imputation stream.
#[derive(Clone, Debug, PartialEq)]
pub struct ImputerContext {
    /// `m` is ignored: each fold runs a single chain for `stream`.
    pub options: ImputerOptions,
    pub stream: usize,
    /// Whether validation rows are completed with the outcome-inclusive
    /// models (their outcome is known when scoring).
    pub validation_uses_outcome: bool,
}

/// Completed training and validation data of one fold.
#[derive(Clone, Debug)]
pub struct FoldImputation {
    pub models: ImputationModelSet,
    pub train: EncodedDataset,
    pub validation: EncodedDataset,
}

/// Fits an imputer on each fold's training rows only and applies it to the
/// fold's validation rows.
pub fn impute_folds(data: &EncodedDataset, plan: &FoldPlan, ctx: &ImputerContext) -> Result<Vec<FoldImputation>, IecvError> {
    plan.folds
        .par_iter()
        .map(|fold| {
            let fold_seed = derive_seed(fold.seed(ctx.options.seed), "fold-imputer", ctx.stream as u64);
            let opts = ImputerOptions { m: 1, seed: fold_seed, ..ctx.options.clone() };
            let wrap = |source| IecvError::Imputation { fold: fold.held_out.clone(), source };
            let train = data.subset(&fold.train);
            let (models, train) = fit_imputer(&train, &opts).map_err(wrap)?.remove(0);
            let validation = apply_imputer(&models, &data.subset(&fold.validation), ctx.validation_uses_outcome, fold_seed).map_err(wrap)?;
            Ok(FoldImputation { models, train, validation })
        })
        .collect()
}

/// Data that is already complete: every fold is a plain row split.
pub fn complete_folds(data: &EncodedDataset, plan: &FoldPlan) -> Vec<(EncodedDataset, EncodedDataset)> {
    plan.folds.iter().map(|f| (data.subset(&f.train), data.subset(&f.validation))).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPointResult {
    pub spec: LearnerSpec,
    /// Validation MSE of each fold, in plan order.
    pub fold_mse: Vec<f64>,
    pub pooled_mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub kind: LearnerKind,
    pub folds: Vec<ClusterKey>,
    pub fold_sizes: Vec<usize>,
    pub points: Vec<GridPointResult>,
    pub selected_index: usize,
    pub selected: LearnerSpec,
    /// Out-of-fold predictions of the selected point, in dataset row order.
    #[serde(skip)]
    pub selected_oof: Vec<f64>,
}

fn fold_spec(spec: &LearnerSpec, fold: &Fold) -> LearnerSpec {
    LearnerSpec { seed: fold.seed(spec.seed), ..spec.clone() }
}

fn fit_predict(spec: &LearnerSpec, fold: &Fold, train: &EncodedDataset, validation: &EncodedDataset) -> Result<Vec<f64>, IecvError> {
    let wrap = |source| IecvError::Learner { fold: fold.held_out.clone(), spec: spec.to_string(), source };
    let model = learners::fit(&fold_spec(spec, fold), train).map_err(wrap)?;
    learners::predict(&model, validation).map_err(wrap)
}

fn mse(y: &[f64], yhat: &[f64]) -> f64 {
    y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64
}

/// Row-weighted pooled MSE: `Σ n_f · MSE_f / Σ n_f`.
pub fn pooled_mse(fold_mse: &[f64], fold_sizes: &[usize]) -> f64 {
    let n: usize = fold_sizes.iter().sum();
    fold_mse.iter().zip(fold_sizes).map(|(m, &k)| m * k as f64).sum::<f64>() / n as f64
}

/// Scores every grid point on every fold and selects the lowest pooled
/// MSE; ties go to the earlier grid point.
pub fn tune(kind: LearnerKind, plan: &FoldPlan, folds: &[(&EncodedDataset, &EncodedDataset)], grid: &[LearnerSpec]) -> Result<TuneResult, IecvError> {
    if grid.is_empty() {
        return Err(IecvError::EmptyGrid(kind));
    }
    if let Some(other) = grid.iter().find(|s| s.kind != kind) {
        return Err(IecvError::Learner {
            fold: plan.folds[0].held_out.clone(),
            spec: other.to_string(),
            source: LearnerError::InvalidSpec(format!("grid for {kind} contains {}", other.kind)),
        });
    }
    let jobs: Vec<(usize, usize)> = (0..grid.len()).flat_map(|g| (0..plan.folds.len()).map(move |f| (g, f))).collect();
    let preds: Vec<Vec<f64>> = jobs
        .par_iter()
        .map(|&(g, f)| {
            let (train, validation) = folds[f];
            fit_predict(&grid[g], &plan.folds[f], train, validation)
        })
        .collect::<Result<_, IecvError>>()?;
    let scores: Vec<f64> = jobs.iter().zip(&preds).map(|(&(_, f), p)| mse(&folds[f].1.y, p)).collect();
    let fold_sizes: Vec<usize> = plan.folds.iter().map(|f| f.validation.len()).collect();
    let nf = plan.folds.len();
    let points: Vec<GridPointResult> = grid
        .iter()
        .enumerate()
        .map(|(g, spec)| {
            let fold_mse = scores[g * nf..(g + 1) * nf].to_vec();
            GridPointResult { pooled_mse: pooled_mse(&fold_mse, &fold_sizes), spec: spec.clone(), fold_mse }
        })
        .collect();
    let mut selected_index = 0;
    for (g, pt) in points.iter().enumerate() {
        if pt.pooled_mse < points[selected_index].pooled_mse {
            selected_index = g;
        }
    }
    let mut selected_oof = vec![0.0; plan.n];
    for (f, fold) in plan.folds.iter().enumerate() {
        for (&row, &v) in fold.validation.iter().zip(&preds[selected_index * nf + f]) {
            selected_oof[row] = v;
        }
    }
    Ok(TuneResult {
        kind,
        selected_oof,
        folds: plan.folds.iter().map(|f| f.held_out.clone()).collect(),
        fold_sizes,
        selected: points[selected_index].spec.clone(),
        selected_index,
        points,
    })
}

/// `n × k` matrix whose entry (i, k) is learner k's prediction for row i
/// from the fold that held row i out. Columns follow `specs`.
pub fn oof_predictions(plan: &FoldPlan, folds: &[(&EncodedDataset, &EncodedDataset)], specs: &[LearnerSpec]) -> Result<DMatrix<f64>, IecvError> {
    let jobs: Vec<(usize, usize)> = (0..specs.len()).flat_map(|k| (0..plan.folds.len()).map(move |f| (k, f))).collect();
    let preds: Vec<Vec<f64>> = jobs
        .par_iter()
        .map(|&(k, f)| {
            let (train, validation) = folds[f];
            fit_predict(&specs[k], &plan.folds[f], train, validation)
        })
        .collect::<Result<_, IecvError>>()?;
    let mut out = DMatrix::<f64>::zeros(plan.n, specs.len());
    for (&(k, f), p) in jobs.iter().zip(preds) {
        for (&row, v) in plan.folds[f].validation.iter().zip(p) {
            out[(row, k)] = v;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learners::{default_axes, expand_grid};
    use crate::schema::encode;
    use crate::synthdata::{generate, GeneratorConfig, MaskSpec};

    fn small(per_cell: usize, mask: MaskSpec) -> EncodedDataset {
        small_with_noise(per_cell, mask, 0.5)
    }

    fn small_with_noise(per_cell: usize, mask: MaskSpec, residual_sd: f64) -> EncodedDataset {
        let mut cfg = GeneratorConfig::default();
        cfg.residual_sd = residual_sd;
        cfg.cells.retain(|k, _| k.year != 2024);
        for v in cfg.cells.values_mut() {
            *v = per_cell;
        }
        cfg.mask = mask;
        encode(&generate(&cfg).unwrap().development, None).unwrap()
    }

    fn refs(v: &[(EncodedDataset, EncodedDataset)]) -> Vec<(&EncodedDataset, &EncodedDataset)> {
        v.iter().map(|(a, b)| (a, b)).collect()
    }

    #[test]
    fn folds_partition_rows_by_cluster() {
        let data = small(30, MaskSpec::default());
        let plan = make_folds(&data).unwrap();
        assert_eq!(plan.folds.len(), 5);
        let names: Vec<String> = plan.folds.iter().map(|f| f.held_out.to_string()).collect();
        assert_eq!(names, ["S1 at 2021", "S1 at 2022", "S1 at 2023", "S2 at 2022", "S2 at 2023"]);
        let mut seen = vec![0; data.n()];
        for f in &plan.folds {
            for &i in &f.validation {
                seen[i] += 1;
                assert_eq!(data.clusters[i], f.held_out);
            }
            assert!(f.train.iter().all(|&i| data.clusters[i] != f.held_out));
            assert_eq!(f.train.len() + f.validation.len(), data.n());
        }
        assert!(seen.iter().all(|&c| c == 1));
        let one = data.subset(&plan.folds[0].validation);
        assert_eq!(make_folds(&one).unwrap_err(), IecvError::TooFewClusters(1));
    }

    #[test]
    fn single_point_grid_and_pooling() {
        let data = small(40, MaskSpec::default());
        let plan = make_folds(&data).unwrap();
        let folds = complete_folds(&data, &plan);
        let spec = LearnerSpec::new(LearnerKind::ElasticNet, &[("lambda", 0.001), ("alpha", 0.5)], 1).unwrap();
        let r = tune(LearnerKind::ElasticNet, &plan, &refs(&folds), std::slice::from_ref(&spec)).unwrap();
        assert_eq!(r.selected, spec);
        let oof = oof_predictions(&plan, &refs(&folds), &[spec]).unwrap();
        let total = (0..data.n()).map(|i| (data.y[i] - oof[(i, 0)]).powi(2)).sum::<f64>() / data.n() as f64;
        assert!((r.points[0].pooled_mse - total).abs() <= 1e-12);
        assert_eq!(r.selected_oof, oof.column(0).iter().copied().collect::<Vec<_>>());
    }

    #[test]
    fn linear_truth_prefers_light_penalty() {
        let data = small_with_noise(200, MaskSpec::default(), 0.02);
        let plan = make_folds(&data).unwrap();
        let folds = complete_folds(&data, &plan);
        let grid = expand_grid(LearnerKind::ElasticNet, &vec![("lambda".into(), vec![0.0001, 0.1]), ("alpha".into(), vec![0.5])], 1).unwrap();
        let r = tune(LearnerKind::ElasticNet, &plan, &refs(&folds), &grid).unwrap();
        assert_eq!(r.selected.params["lambda"], 0.0001);
    }

    #[test]
    fn equal_scores_select_first_point() {
        let data = small(20, MaskSpec::default());
        let plan = make_folds(&data).unwrap();
        let folds = complete_folds(&data, &plan);
        let spec = LearnerSpec::new(LearnerKind::ElasticNet, &[("lambda", 1e6), ("alpha", 0.5)], 1).unwrap();
        let mut twin = spec.clone();
        twin.params.insert("alpha".into(), 0.9);
        let r = tune(LearnerKind::ElasticNet, &plan, &refs(&folds), &[spec.clone(), twin]).unwrap();
        assert_eq!(r.points[0].pooled_mse.to_bits(), r.points[1].pooled_mse.to_bits());
        assert_eq!(r.selected_index, 0);
    }

    #[test]
    fn constant_outcome_gives_constant_oof() {
        let mut data = small(25, MaskSpec::default());
        data.y.iter_mut().for_each(|v| *v = 4.5);
        let plan = make_folds(&data).unwrap();
        let folds = complete_folds(&data, &plan);
        let p = data.p();
        let specs: Vec<LearnerSpec> = LearnerKind::ALL
            .iter()
            .map(|&k| {
                let mut g = expand_grid(k, &default_axes(k, p), 3).unwrap().remove(0);
                if k == LearnerKind::RandomForest {
                    g.params.insert("n_trees".into(), 10.0);
                }
                g
            })
            .collect();
        let oof = oof_predictions(&plan, &refs(&folds), &specs).unwrap();
        assert_eq!(oof.shape(), (data.n(), 4));
        assert!(oof.iter().all(|v| (v - 4.5).abs() <= 1e-10));
    }

    #[test]
    fn fold_imputation_ignores_validation_outcomes() {
        let data = small(30, GeneratorConfig::default().mask);
        let plan = make_folds(&data).unwrap();
        let ctx = ImputerContext { options: ImputerOptions::new(1, 2, 5).with_scope(crate::mice::ImputeScope::OptionalOnly), stream: 0, validation_uses_outcome: true };
        let a = impute_folds(&data, &plan, &ctx).unwrap();
        let mut changed = data.clone();
        let row = plan.folds[2].validation[0];
        changed.y[row] += 2.0;
        let b = impute_folds(&changed, &plan, &ctx).unwrap();
        let bytes = |m: &ImputationModelSet| bincode::serde::encode_to_vec(m, bincode::config::standard()).unwrap();
        assert_eq!(bytes(&a[2].models), bytes(&b[2].models));
        assert_ne!(bytes(&a[0].models), bytes(&b[0].models));
        for f in &a {
            assert!(!f.train.has_missing_cells() && !f.validation.has_missing_cells());
        }
    }
}
