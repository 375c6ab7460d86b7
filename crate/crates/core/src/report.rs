//! Cluster-level performance reports in the shape of a Table-2 style
//! summary, plus the plot data behind the per-cluster RMSE chart and the
//! calibration chart.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fsutil::write_atomic;
use crate::metrics::{
    adjust_r2, bootstrap_replicates, calibration, error_metrics, percentile_interval, pool_clusters, rubin_pool,
    MetricEstimate, MetricsError,
};
use crate::schema::ClusterKey;
use crate::seed::{derive_seed, rng_from};

pub const CSV_HEADER: &str = "cluster,n,rmse,rmse_lo,rmse_hi,mae,mae_lo,mae_hi,cal_intercept,ci_lo,ci_hi,cal_slope,ci_lo,ci_hi";
pub const OVERALL_LABEL: &str = "Overall";
pub const SCATTER_CAP: usize = 5000;
pub const CALIBRATION_BINS: usize = 10;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("cluster {cluster}: {source}")]
    Cluster { cluster: String, source: MetricsError },
    #[error("{0}")]
    Metrics(#[from] MetricsError),
    #[error("inputs are misaligned: {0}")]
    Misaligned(String),
    #[error("cannot write {path}: {source}")]
    Write { path: PathBuf, source: std::io::Error },
    #[error("malformed report: {0}")]
    Malformed(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportContext {
    Iecv,
    TemporalTest,
}

impl ReportContext {
    pub fn file_stem(self) -> &'static str {
        match self {
            ReportContext::Iecv => "iecv_report",
            ReportContext::TemporalTest => "temporal_report",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub cluster: String,
    pub n: usize,
    pub rmse: MetricEstimate,
    pub mae: MetricEstimate,
    pub cal_intercept: MetricEstimate,
    pub cal_slope: MetricEstimate,
}

/// Whole-cohort figures from concatenating every row, pooled across
/// imputations. This is the headline used for acceptance thresholds and
/// for the adjusted R² that the cluster table does not carry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortSummary {
    pub n: usize,
    pub rmse: MetricEstimate,
    pub mae: MetricEstimate,
    pub cal_intercept: MetricEstimate,
    pub cal_slope: MetricEstimate,
    /// Mean over imputations of the adjusted R² of the calibration regression.
    pub adjusted_r2: f64,
    pub adjusted_r2_per_imputation: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub context: ReportContext,
    pub imputations: usize,
    pub bootstrap_resamples: usize,
    pub rows: Vec<ReportRow>,
    pub overall: ReportRow,
    pub summary: CohortSummary,
}

#[derive(Clone, Debug)]
pub struct ReportOptions {
    pub context: ReportContext,
    pub bootstrap: usize,
    pub seed: u64,
}

struct Pooled {
    rmse: MetricEstimate,
    mae: MetricEstimate,
    intercept: MetricEstimate,
    slope: MetricEstimate,
    adj_r2: Vec<f64>,
}

/// Per-imputation metrics on one group of rows, combined with Rubin's rules.
fn pooled_metrics(y: &[f64], yhat: &[&[f64]], b: usize, seed: u64) -> Result<Pooled, MetricsError> {
    let m = yhat.len();
    let (mut rmse, mut mae, mut rmse_v, mut mae_v) = (vec![], vec![], vec![], vec![]);
    let (mut ic, mut icv, mut sl, mut slv, mut adj) = (vec![], vec![], vec![], vec![], vec![]);
    for (j, pred) in yhat.iter().enumerate() {
        let e = error_metrics(y, pred)?;
        let c = calibration(y, pred)?;
        let reps = bootstrap_replicates(y.len(), b, derive_seed(seed, "report-imputation", j as u64), |idx| {
            let (mut sq, mut ab) = (0.0, 0.0);
            for &i in idx {
                let d = y[i] - pred[i];
                sq += d * d;
                ab += d.abs();
            }
            let n = idx.len() as f64;
            vec![(sq / n).sqrt(), ab / n]
        })?;
        let r: Vec<f64> = reps.iter().map(|v| v[0]).collect();
        let a: Vec<f64> = reps.iter().map(|v| v[1]).collect();
        rmse.push(e.rmse);
        mae.push(e.mae);
        rmse_v.push(percentile_interval(&r).se.powi(2));
        mae_v.push(percentile_interval(&a).se.powi(2));
        ic.push(c.intercept.value);
        icv.push(c.intercept.variance);
        sl.push(c.slope.value);
        slv.push(c.slope.variance);
        adj.push(adjust_r2(c.r2, y.len(), 1));
    }
    debug_assert_eq!(adj.len(), m);
    Ok(Pooled {
        rmse: rubin_pool(&rmse, &rmse_v),
        mae: rubin_pool(&mae, &mae_v),
        intercept: rubin_pool(&ic, &icv),
        slope: rubin_pool(&sl, &slv),
        adj_r2: adj,
    })
}

/// Builds the report from observed log outcomes `y`, one prediction vector
/// per imputation and each row's cluster.
pub fn cluster_report(y: &[f64], yhat: &[Vec<f64>], clusters: &[ClusterKey], opts: &ReportOptions) -> Result<MetricReport, ReportError> {
    if yhat.is_empty() {
        return Err(ReportError::Misaligned("no prediction vectors".into()));
    }
    if clusters.len() != y.len() || yhat.iter().any(|p| p.len() != y.len()) {
        return Err(ReportError::Misaligned(format!("{} outcomes, {} cluster labels", y.len(), clusters.len())));
    }
    let mut groups: BTreeMap<&ClusterKey, Vec<usize>> = BTreeMap::new();
    for (i, c) in clusters.iter().enumerate() {
        groups.entry(c).or_default().push(i);
    }
    let mut rows = Vec::with_capacity(groups.len());
    for (key, idx) in &groups {
        let label = key.to_string();
        let ys: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
        let ps: Vec<Vec<f64>> = yhat.iter().map(|p| idx.iter().map(|&i| p[i]).collect()).collect();
        let refs: Vec<&[f64]> = ps.iter().map(Vec::as_slice).collect();
        let seed = derive_seed(opts.seed, &format!("report-cluster:{label}"), 0);
        let p = pooled_metrics(&ys, &refs, opts.bootstrap, seed).map_err(|source| ReportError::Cluster { cluster: label.clone(), source })?;
        rows.push(ReportRow { cluster: label, n: idx.len(), rmse: p.rmse, mae: p.mae, cal_intercept: p.intercept, cal_slope: p.slope });
    }
    let overall = if rows.len() >= 2 {
        let pool = |f: fn(&ReportRow) -> &MetricEstimate| -> Result<MetricEstimate, ReportError> {
            Ok(pool_clusters(&rows.iter().map(|r| f(r).clone()).collect::<Vec<_>>())?.estimate)
        };
        ReportRow {
            cluster: OVERALL_LABEL.into(),
            n: y.len(),
            rmse: pool(|r| &r.rmse)?,
            mae: pool(|r| &r.mae)?,
            cal_intercept: pool(|r| &r.cal_intercept)?,
            cal_slope: pool(|r| &r.cal_slope)?,
        }
    } else {
        ReportRow { cluster: OVERALL_LABEL.into(), ..rows[0].clone() }
    };
    let refs: Vec<&[f64]> = yhat.iter().map(Vec::as_slice).collect();
    let all = pooled_metrics(y, &refs, opts.bootstrap, derive_seed(opts.seed, "report-cohort", 0))?;
    let summary = CohortSummary {
        n: y.len(),
        rmse: all.rmse,
        mae: all.mae,
        cal_intercept: all.intercept,
        cal_slope: all.slope,
        adjusted_r2: all.adj_r2.iter().sum::<f64>() / all.adj_r2.len() as f64,
        adjusted_r2_per_imputation: all.adj_r2,
    };
    Ok(MetricReport { context: opts.context, imputations: yhat.len(), bootstrap_resamples: opts.bootstrap, rows, overall, summary })
}

fn estimate_cells(e: &MetricEstimate) -> [String; 3] {
    [e.value.to_string(), e.ci_low.to_string(), e.ci_high.to_string()]
}

/// The Table-2 style CSV. Floats use the shortest text that parses back
/// to the same value, so a report read back from JSON re-emits identically.
pub fn report_csv(report: &MetricReport) -> Result<String, ReportError> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    let io = |e: csv::Error| ReportError::Malformed(e.to_string());
    w.write_record(CSV_HEADER.split(',')).map_err(io)?;
    for row in report.rows.iter().chain(std::iter::once(&report.overall)) {
        let mut rec = vec![row.cluster.clone(), row.n.to_string()];
        for e in [&row.rmse, &row.mae, &row.cal_intercept, &row.cal_slope] {
            rec.extend(estimate_cells(e));
        }
        w.write_record(&rec).map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| ReportError::Malformed(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn report_json(report: &MetricReport) -> String {
    serde_json::to_string_pretty(report).expect("report serialises")
}

pub fn parse_report_json(text: &str) -> Result<MetricReport, ReportError> {
    serde_json::from_str(text).map_err(|e| ReportError::Malformed(e.to_string()))
}

/// Observed and predicted log durations behind the calibration chart.
/// `predicted` is the mean over imputations.
#[derive(Clone, Debug)]
pub struct CalibrationData {
    pub observed: Vec<f64>,
    pub predicted: Vec<f64>,
}

impl CalibrationData {
    pub fn from_imputations(y: &[f64], yhat: &[Vec<f64>]) -> Self {
        let m = yhat.len() as f64;
        let predicted = (0..y.len()).map(|i| yhat.iter().map(|p| p[i]).sum::<f64>() / m).collect();
        CalibrationData { observed: y.to_vec(), predicted }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DecileRow {
    pub bin: usize,
    pub n: usize,
    pub mean_predicted: f64,
    pub mean_observed: f64,
}

/// Ten equal-frequency bins of the predictions, ordered by prediction.
pub fn calibration_deciles(data: &CalibrationData) -> Result<Vec<DecileRow>, ReportError> {
    let n = data.predicted.len();
    if n < CALIBRATION_BINS || data.observed.len() != n {
        return Err(ReportError::Misaligned(format!("calibration bins need at least {CALIBRATION_BINS} aligned rows, got {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| data.predicted[a].total_cmp(&data.predicted[b]).then(a.cmp(&b)));
    Ok((0..CALIBRATION_BINS)
        .map(|k| {
            let bin = &order[k * n / CALIBRATION_BINS..(k + 1) * n / CALIBRATION_BINS];
            let len = bin.len() as f64;
            DecileRow {
                bin: k + 1,
                n: bin.len(),
                mean_predicted: bin.iter().map(|&i| data.predicted[i]).sum::<f64>() / len,
                mean_observed: bin.iter().map(|&i| data.observed[i]).sum::<f64>() / len,
            }
        })
        .collect())
}

/// Row indices of the scatter sample: everything when small, otherwise a
/// seeded sample of `SCATTER_CAP` rows in ascending index order.
pub fn scatter_sample(n: usize, seed: u64) -> Vec<usize> {
    if n <= SCATTER_CAP {
        return (0..n).collect();
    }
    let mut idx = sample(&mut rng_from(derive_seed(seed, "scatter", 0)), n, SCATTER_CAP).into_vec();
    idx.sort_unstable();
    idx
}

fn write(path: PathBuf, text: &str) -> Result<PathBuf, ReportError> {
    write_atomic(&path, text.as_bytes()).map_err(|source| ReportError::Write { path: path.clone(), source })?;
    Ok(path)
}

fn csv_lines(header: &str, rows: impl Iterator<Item = String>) -> String {
    let mut s = format!("{header}\n");
    for r in rows {
        s.push_str(&r);
        s.push('\n');
    }
    s
}

/// Writes `<stem>.csv` and `<stem>.json`, and with plot data also
/// `<stem>_cluster_rmse.csv`, `<stem>_calibration_deciles.csv` and `<stem>_calibration_scatter.csv`.
/// Returns the written paths.
pub fn emit_report(report: &MetricReport, plots: Option<&CalibrationData>, dir: &Path, seed: u64) -> Result<Vec<PathBuf>, ReportError> {
    let stem = report.context.file_stem();
    let mut out = vec![
        write(dir.join(format!("{stem}.csv")), &report_csv(report)?)?,
        write(dir.join(format!("{stem}.json")), &report_json(report))?,
    ];
    if let Some(data) = plots {
        let rmse_rows = csv_lines(
            "cluster,rmse,rmse_lo,rmse_hi",
            report.rows.iter().map(|r| format!("{},{},{},{}", csv_field(&r.cluster), r.rmse.value, r.rmse.ci_low, r.rmse.ci_high)),
        );
        out.push(write(dir.join(format!("{stem}_cluster_rmse.csv")), &rmse_rows)?);
        let deciles = calibration_deciles(data)?;
        let decile_rows = csv_lines(
            "bin,n,mean_predicted,mean_observed",
            deciles.iter().map(|d| format!("{},{},{},{}", d.bin, d.n, d.mean_predicted, d.mean_observed)),
        );
        out.push(write(dir.join(format!("{stem}_calibration_deciles.csv")), &decile_rows)?);
        let scatter = csv_lines(
            "predicted,observed",
            scatter_sample(data.predicted.len(), seed).into_iter().map(|i| format!("{},{}", data.predicted[i], data.observed[i])),
        );
        out.push(write(dir.join(format!("{stem}_calibration_scatter.csv")), &scatter)?);
    }
    Ok(out)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn synthetic(clusters: usize, per: usize, m: usize, seed: u64) -> (Vec<f64>, Vec<Vec<f64>>, Vec<ClusterKey>) {
        let mut rng = rng_from(seed);
        let noise = Normal::new(0.0, 0.3).unwrap();
        let mut y = vec![];
        let mut keys = vec![];
        let mut truth = vec![];
        for c in 0..clusters {
            for _ in 0..per {
                let t = 4.0 + noise.sample(&mut rng) * 2.0;
                truth.push(t);
                y.push(t + noise.sample(&mut rng) + 0.05 * c as f64);
                keys.push(ClusterKey::new(format!("S{}", c % 2 + 1), 2021 + c as i32));
            }
        }
        let yhat = (0..m).map(|_| truth.iter().map(|t| t + 0.01 * noise.sample(&mut rng)).collect()).collect();
        (y, yhat, keys)
    }

    fn opts() -> ReportOptions {
        ReportOptions { context: ReportContext::Iecv, bootstrap: 200, seed: 3 }
    }

    #[test]
    fn five_clusters_give_six_rows_and_counts_add_up() {
        let (y, yhat, keys) = synthetic(5, 120, 3, 1);
        let r = cluster_report(&y, &yhat, &keys, &opts()).unwrap();
        assert_eq!(r.rows.len(), 5);
        assert_eq!(r.rows.iter().map(|r| r.n).sum::<usize>(), r.overall.n);
        let csv = report_csv(&r).unwrap();
        assert_eq!(csv.lines().count(), 7);
        assert_eq!(csv.lines().next().unwrap(), CSV_HEADER);
        assert!(csv.lines().nth(1).unwrap().starts_with("S1 at 2021,120,"));
        assert!(csv.lines().last().unwrap().starts_with("Overall,600,"));
        for row in r.rows.iter().chain([&r.overall]) {
            for e in [&row.rmse, &row.mae, &row.cal_intercept, &row.cal_slope] {
                assert!(e.ci_low <= e.value && e.value <= e.ci_high);
            }
        }
    }

    #[test]
    fn json_round_trip_reemits_identical_csv() {
        let (y, yhat, keys) = synthetic(3, 80, 2, 2);
        let r = cluster_report(&y, &yhat, &keys, &opts()).unwrap();
        let back = parse_report_json(&report_json(&r)).unwrap();
        assert_eq!(report_csv(&back).unwrap(), report_csv(&r).unwrap());
        assert_eq!(back, r);
    }

    #[test]
    fn constant_cluster_predictions_name_the_cluster() {
        let (y, _, keys) = synthetic(2, 50, 1, 3);
        let mut yhat = vec![0.0; y.len()];
        for (k, chunk) in yhat.chunks_mut(50).enumerate() {
            let mean = y[k * 50..(k + 1) * 50].iter().sum::<f64>() / 50.0;
            chunk.fill(mean);
        }
        match cluster_report(&y, &[yhat], &keys, &opts()) {
            Err(ReportError::Cluster { cluster, source: MetricsError::ConstantPrediction }) => assert_eq!(cluster, "S1 at 2021"),
            other => panic!("expected a per-cluster slope error, got {other:?}"),
        }
    }

    #[test]
    fn emits_plot_files_with_ten_deciles_and_capped_scatter() {
        let (y, yhat, keys) = synthetic(2, 3000, 2, 4);
        let r = cluster_report(&y, &yhat, &keys, &ReportOptions { context: ReportContext::TemporalTest, ..opts() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let data = CalibrationData::from_imputations(&y, &yhat);
        let files = emit_report(&r, Some(&data), dir.path(), 9).unwrap();
        assert_eq!(files.len(), 5);
        let read = |name: &str| std::fs::read_to_string(dir.path().join(name)).unwrap();
        assert_eq!(read("temporal_report_calibration_deciles.csv").lines().count(), 1 + CALIBRATION_BINS);
        assert_eq!(read("temporal_report_calibration_scatter.csv").lines().count(), 1 + SCATTER_CAP);
        assert_eq!(read("temporal_report_cluster_rmse.csv").lines().count(), 3);
        let d = calibration_deciles(&data).unwrap();
        assert_eq!(d.iter().map(|d| d.n).sum::<usize>(), y.len());
        assert!(d.windows(2).all(|w| w[0].mean_predicted <= w[1].mean_predicted));
    }

    #[test]
    fn single_cluster_overall_repeats_the_row() {
        let (y, yhat, keys) = synthetic(1, 60, 2, 5);
        let r = cluster_report(&y, &yhat, &keys, &opts()).unwrap();
        assert_eq!(r.overall.rmse, r.rows[0].rmse);
        assert_eq!(r.overall.cluster, OVERALL_LABEL);
    }

    #[test]
    fn unwritable_destination_is_reported() {
        let (y, yhat, keys) = synthetic(2, 40, 1, 6);
        let r = cluster_report(&y, &yhat, &keys, &opts()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        std::fs::write(&blocker, b"x").unwrap();
        let err = emit_report(&r, None, &blocker.join("sub"), 1).unwrap_err();
        assert!(matches!(err, ReportError::Write { .. }));
    }
}
