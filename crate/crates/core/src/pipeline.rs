//! End-to-end orchestration: develop (impute, tune, stack, lock, IECV
//! report), validate on a temporal test cohort, and batch prediction.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::RunConfig;
use crate::iecv::{impute_folds, make_folds, tune, IecvError, ImputerContext, TuneResult};
use crate::ingest::{select_cohort, ExclusionReport};
use crate::learners::{expand_grid, LearnerError, LearnerKind, LearnerSpec};
use crate::metrics::error_metrics;
use crate::mice::{fit_imputer, ImputerOptions, MiceError};
use crate::report::{cluster_report, CalibrationData, MetricReport, ReportContext, ReportError, ReportOptions};
use crate::schema::{encode, CaseRecord, EncodedDataset, SchemaError};
use crate::seed::derive_seed;
use crate::stack::{fit_stack_weights, lock, LockedModel, PipelineInput, Provenance, StackError};

/// Failure of one pipeline stage. `is_data` separates bad input (exit
/// code 3) from numerical failures (exit code 4).
#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("cohort: {0}")]
    Cohort(String),
    #[error("encode: {0}")]
    Encode(#[from] SchemaError),
    #[error("iecv: {0}")]
    Iecv(#[from] IecvError),
    #[error("imputation: {0}")]
    Imputation(#[from] MiceError),
    #[error("grid: {0}")]
    Grid(#[from] LearnerError),
    #[error("stacking: {0}")]
    Stack(#[from] StackError),
    #[error("report: {0}")]
    Report(#[from] ReportError),
}

impl PipelineError {
    pub fn is_data(&self) -> bool {
        matches!(self, PipelineError::Cohort(_) | PipelineError::Encode(_) | PipelineError::Iecv(IecvError::TooFewClusters(_)))
    }
}

/// Tuning record of one imputation stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamAudit {
    pub stream: usize,
    pub tuning: Vec<TuneResult>,
    pub weights: Vec<f64>,
    /// Out-of-fold MSE of each selected learner, canonical learner order.
    pub learner_oof_mse: Vec<f64>,
    pub stack_oof_mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneAudit {
    pub base_seed: u64,
    pub m: usize,
    pub iterations: usize,
    pub development_rows: usize,
    pub folds: Vec<String>,
    pub streams: Vec<StreamAudit>,
}

impl TuneAudit {
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("audit serialises")))
    }
}

pub struct DevelopOutput {
    pub model: LockedModel,
    pub audit: TuneAudit,
    pub iecv: MetricReport,
    pub iecv_plot: CalibrationData,
    /// Stacked out-of-fold log predictions, one vector per stream.
    pub stacked_oof: Vec<Vec<f64>>,
    /// Raw out-of-fold matrices (rows × learners), one per stream.
    pub oof: Vec<DMatrix<f64>>,
    pub exclusions: Option<ExclusionReport>,
}

fn mse(y: &[f64], yhat: &[f64]) -> f64 {
    error_metrics(y, yhat).map(|m| m.rmse * m.rmse).unwrap_or(f64::NAN)
}

/// Applies cohort selection and encodes the result with a fresh encoding.
pub fn prepare_development(records: Vec<CaseRecord>) -> Result<(EncodedDataset, ExclusionReport), PipelineError> {
    let (cohort, report) = select_cohort(records);
    if cohort.is_empty() {
        return Err(PipelineError::Cohort("no records remain after cohort selection".into()));
    }
    Ok((encode(&cohort, None)?, report))
}

pub fn develop(records: Vec<CaseRecord>, cfg: &RunConfig) -> Result<DevelopOutput, PipelineError> {
    let (data, exclusions) = prepare_development(records)?;
    let mut out = develop_encoded(&data, cfg)?;
    out.exclusions = Some(exclusions);
    Ok(out)
}

/// Runs the whole development lifecycle on an encoded cohort.
pub fn develop_encoded(data: &EncodedDataset, cfg: &RunConfig) -> Result<DevelopOutput, PipelineError> {
    let plan = make_folds(data)?;
    let opts = ImputerOptions { donors: cfg.donors, ridge: cfg.ridge, ..ImputerOptions::new(cfg.m, cfg.iterations, derive_seed(cfg.seed, "imputer", 0)) };
    let full = fit_imputer(data, &opts)?;
    let p = data.meta.n_features();
    let mut streams = Vec::with_capacity(cfg.m);
    let mut inputs = Vec::with_capacity(cfg.m);
    let mut stacked_oof = Vec::with_capacity(cfg.m);
    let mut oofs = Vec::with_capacity(cfg.m);
    for (j, (imputer, completed)) in full.into_iter().enumerate() {
        let ctx = ImputerContext { options: opts.clone(), stream: j, validation_uses_outcome: cfg.evaluation_uses_outcome };
        let folds = impute_folds(data, &plan, &ctx)?;
        let refs: Vec<(&EncodedDataset, &EncodedDataset)> = folds.iter().map(|f| (&f.train, &f.validation)).collect();
        let mut tuning = Vec::with_capacity(LearnerKind::ALL.len());
        for kind in LearnerKind::ALL {
            let seed = derive_seed(cfg.seed, &format!("learner:{}", kind.name()), j as u64);
            let grid = expand_grid(kind, &cfg.axes(kind, p), seed)?;
            tuning.push(tune(kind, &plan, &refs, &grid)?);
        }
        let oof = DMatrix::from_fn(data.n(), tuning.len(), |i, k| tuning[k].selected_oof[i]);
        let weights = fit_stack_weights(&oof, &data.y)?;
        let stacked: Vec<f64> = (0..data.n()).map(|i| weights.combine(&oof.row(i).iter().copied().collect::<Vec<_>>())).collect();
        streams.push(StreamAudit {
            stream: j,
            learner_oof_mse: tuning.iter().map(|t| mse(&data.y, &t.selected_oof)).collect(),
            stack_oof_mse: mse(&data.y, &stacked),
            weights: weights.w.clone(),
            tuning: tuning.clone(),
        });
        inputs.push(PipelineInput { imputer, completed, specs: tuning.into_iter().map(|t| t.selected).collect(), weights });
        stacked_oof.push(stacked);
        oofs.push(oof);
    }
    let audit = TuneAudit {
        base_seed: cfg.seed,
        m: cfg.m,
        iterations: cfg.iterations,
        development_rows: data.n(),
        folds: plan.folds.iter().map(|f| f.held_out.to_string()).collect(),
        streams,
    };
    let provenance = Provenance {
        base_seed: cfg.seed,
        m: cfg.m,
        iterations: cfg.iterations,
        selected: inputs.iter().map(|i| i.specs.iter().map(LearnerSpec::to_string).collect()).collect(),
        tune_digest: audit.digest(),
        development_rows: data.n(),
        clusters: data.distinct_clusters().iter().map(ToString::to_string).collect(),
        created_at: cfg.created_at(),
    };
    let model = lock(&data.meta, inputs, provenance)?;
    let report_opts = ReportOptions { context: ReportContext::Iecv, bootstrap: cfg.bootstrap, seed: derive_seed(cfg.seed, "iecv-report", 0) };
    let iecv = cluster_report(&data.y, &stacked_oof, &data.clusters, &report_opts)?;
    let iecv_plot = CalibrationData::from_imputations(&data.y, &stacked_oof);
    Ok(DevelopOutput { model, audit, iecv, iecv_plot, stacked_oof, oof: oofs, exclusions: None })
}

pub struct ValidateOutput {
    pub report: MetricReport,
    pub plot: CalibrationData,
    /// Log predictions on the test cohort, one vector per pipeline.
    pub predictions: Vec<Vec<f64>>,
    pub exclusions: ExclusionReport,
}

/// Applies the locked model to a temporal test cohort and reports its
/// performance per test cluster.
pub fn validate(model: &LockedModel, records: Vec<CaseRecord>, cfg: &RunConfig) -> Result<ValidateOutput, PipelineError> {
    let (cohort, exclusions) = select_cohort(records);
    if cohort.is_empty() {
        return Err(PipelineError::Cohort("test cohort is empty after cohort selection".into()));
    }
    let data = encode(&cohort, Some(&model.meta))?;
    let predictions = model.predict_dataset(&data, cfg.evaluation_uses_outcome, derive_seed(cfg.seed, "validate", 0))?;
    let opts = ReportOptions { context: ReportContext::TemporalTest, bootstrap: cfg.bootstrap, seed: derive_seed(cfg.seed, "temporal-report", 0) };
    let report = cluster_report(&data.y, &predictions, &data.clusters, &opts)?;
    let plot = CalibrationData::from_imputations(&data.y, &predictions);
    Ok(ValidateOutput { report, plot, predictions, exclusions })
}

/// One output line of batch prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub case_id: String,
    pub predicted_minutes: Option<f64>,
    pub log_prediction_mean: Option<f64>,
    pub pipeline_spread: Option<f64>,
    /// Semicolon-separated.
    pub imputed_fields: String,
    pub error: String,
}

/// Predicts every record without using any recorded outcome; a failing
/// record yields a row with its error message.
pub fn predict_records(model: &LockedModel, records: &[CaseRecord], seed: u64) -> Vec<PredictionRow> {
    let predictors: Vec<_> = records.iter().map(CaseRecord::predictors).collect();
    model
        .predict_locked(&predictors, seed)
        .into_iter()
        .zip(records)
        .map(|(res, rec)| match res {
            Ok(p) => PredictionRow {
                case_id: rec.case_id.clone(),
                predicted_minutes: Some(p.predicted_minutes),
                log_prediction_mean: Some(p.log_pred_mean),
                pipeline_spread: Some(p.pipeline_spread),
                imputed_fields: p.imputed_fields.join(";"),
                error: String::new(),
            },
            Err(e) => PredictionRow {
                case_id: rec.case_id.clone(),
                predicted_minutes: None,
                log_prediction_mean: None,
                pipeline_spread: None,
                imputed_fields: String::new(),
                error: e.to_string(),
            },
        })
        .collect()
}

/// Writes prediction rows as CSV with a header line.
pub fn write_predictions<W: std::io::Write>(rows: &[PredictionRow], out: W) -> Result<(), csv::Error> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
