//! Multiple imputation by chained equations.
//!
//! Each imputation stream initialises missing cells from observed marginals
//! and then cycles through the incomplete variables, refitting a conditional
//! model on the current completed data and redrawing that variable's missing
//! cells. Continuous variables use predictive mean matching, binary
//! variables logistic regression and multi-level variables softmax
//! regression. Conditional models use every other variable, centre-year
//! fixed effects and (for the primary models) the log outcome as predictors.
//! Once the sweeps finish, the models are refitted on the completed data and
//! frozen; frozen models fill holdout rows without ever being refitted.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::{ClusterKey, EncodedDataset, EncodingMeta, Predictors, VariableKind, PREDICTOR_FIELDS};
use crate::seed::{derive_seed, rng_from, Rng};

pub const DEFAULT_DONORS: usize = 5;
pub const DEFAULT_RIDGE: f64 = 1e-4;
const GRADIENT_TOL: f64 = 1e-6;
const MAX_NEWTON: usize = 100;

#[derive(Debug, Error, PartialEq)]
pub enum MiceError {
    #[error("invalid imputation options: {0}")]
    InvalidOptions(String),
    #[error("variable {0} has no observed values in the training data")]
    AllMissing(String),
    #[error("schema mismatch: models were fitted on encoding {expected}, data has {found}")]
    SchemaMismatch { expected: String, found: String },
    #[error("variable {0} is missing but was not modelled by this imputer")]
    OutOfScope(String),
    #[error("outcome-inclusive imputation needs an observed outcome on every row")]
    MissingOutcome,
    #[error("imputation model for {0} did not produce finite estimates")]
    Numeric(String),
}

/// Which variables get conditional models.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ImputeScope {
    /// Every variable, so any subset of fields can be imputed later.
    AllVariables,
    /// Only variables whose source field is optional in case records.
    OptionalOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImputerOptions {
    pub m: usize,
    pub iterations: usize,
    pub seed: u64,
    pub scope: ImputeScope,
    pub donors: usize,
    pub ridge: f64,
}

impl ImputerOptions {
    pub fn new(m: usize, iterations: usize, seed: u64) -> Self {
        ImputerOptions { m, iterations, seed, scope: ImputeScope::AllVariables, donors: DEFAULT_DONORS, ridge: DEFAULT_RIDGE }
    }

    pub fn with_scope(mut self, scope: ImputeScope) -> Self {
        self.scope = scope;
        self
    }
}

const OPTIONAL_SOURCES: [&str; 12] = [
    "admission",
    "scheduled_duration_min",
    "general_anaesthesia",
    "pos_supine",
    "pos_prone",
    "pos_sitting",
    "pos_lithotomy",
    "pos_lateral",
    "pos_other",
    "age_years",
    "bmi",
    "asa",
];

/// Column layout and frozen standardisation of a conditional model's
/// predictors: selected design columns, fixed-effect indicators for all
/// but the first training cluster, then (optionally) the log outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorLayout {
    pub x_columns: Vec<usize>,
    pub n_fixed_effects: usize,
    pub use_outcome: bool,
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
}

impl PredictorLayout {
    fn width(&self) -> usize {
        self.x_columns.len() + self.n_fixed_effects + usize::from(self.use_outcome)
    }

    /// Standardised design with a leading intercept column.
    fn build(&self, x: &DMatrix<f64>, rows: &[usize], fe: &[Option<usize>], y: &[f64]) -> DMatrix<f64> {
        let n = rows.len();
        let mut z = DMatrix::<f64>::zeros(n, self.width() + 1);
        z.column_mut(0).fill(1.0);
        let mut c = 1;
        for &xc in &self.x_columns {
            let (mu, s) = (self.center[c - 1], self.scale[c - 1]);
            let col = x.column(xc);
            for (r, &i) in rows.iter().enumerate() {
                z[(r, c)] = (col[i] - mu) / s;
            }
            c += 1;
        }
        for level in 0..self.n_fixed_effects {
            let (mu, s) = (self.center[c - 1], self.scale[c - 1]);
            for (r, &i) in rows.iter().enumerate() {
                let v = if fe[i] == Some(level) { 1.0 } else { 0.0 };
                z[(r, c)] = (v - mu) / s;
            }
            c += 1;
        }
        if self.use_outcome {
            let (mu, s) = (self.center[c - 1], self.scale[c - 1]);
            for (r, &i) in rows.iter().enumerate() {
                z[(r, c)] = (y[i] - mu) / s;
            }
        }
        z
    }

    fn fit(x_columns: Vec<usize>, n_fixed_effects: usize, use_outcome: bool, x: &DMatrix<f64>, rows: &[usize], fe: &[Option<usize>], y: &[f64]) -> Self {
        let mut layout = PredictorLayout { x_columns, n_fixed_effects, use_outcome, center: Vec::new(), scale: Vec::new() };
        let w = layout.width();
        layout.center = vec![0.0; w];
        layout.scale = vec![1.0; w];
        let raw = layout.build(x, rows, fe, y);
        let n = rows.len().max(1) as f64;
        for c in 0..w {
            let col = raw.column(c + 1);
            let mean = col.sum() / n;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            layout.center[c] = mean;
            layout.scale[c] = if var > 1e-24 { var.sqrt() } else { 1.0 };
        }
        layout
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ConditionalKind {
    /// Linear model for predictive mean matching. Donors are the observed
    /// training values sorted by their fitted means.
    Pmm { coef: Vec<f64>, donor_fitted: Vec<f64>, donor_values: Vec<f64> },
    /// Binary logistic regression, `P(value = 1)`.
    Logistic { coef: Vec<f64> },
    /// Softmax regression; one coefficient vector per non-reference level.
    Polytomous { coef: Vec<Vec<f64>> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionalModel {
    pub variable: usize,
    pub layout: PredictorLayout,
    pub kind: ConditionalKind,
}

/// Observed distribution used to initialise missing cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Marginal {
    Values(Vec<f64>),
    Classes(Vec<f64>),
}

/// Frozen chained-equation models for one imputation stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImputationModelSet {
    pub meta_fingerprint: String,
    /// Modelled variables, in visiting order (ascending missingness).
    pub visit_order: Vec<usize>,
    /// Outcome-inclusive models, indexed like `visit_order`.
    pub primary: Vec<ConditionalModel>,
    /// Outcome-free companions used when the outcome is unknown.
    pub companion: Vec<ConditionalModel>,
    pub marginals: Vec<Marginal>,
    /// Fixed-effect levels; the first is the reference.
    pub clusters: Vec<ClusterKey>,
    pub iterations: usize,
    pub donors: usize,
    pub stream: usize,
    pub seed: u64,
}

fn cluster_index(levels: &[ClusterKey], clusters: &[ClusterKey]) -> Vec<Option<usize>> {
    clusters
        .iter()
        .map(|c| match levels.binary_search(c) {
            Ok(0) | Err(_) => None,
            Ok(k) => Some(k - 1),
        })
        .collect()
}

/// Number of classes of a discrete variable (binary = 2).
fn n_classes(kind: &VariableKind, n_columns: usize) -> usize {
    match kind {
        VariableKind::Binary => 2,
        VariableKind::Categorical { .. } => n_columns + 1,
        VariableKind::Continuous => 0,
    }
}

fn class_of(x: &DMatrix<f64>, i: usize, kind: &VariableKind, first: usize, n_columns: usize) -> usize {
    match kind {
        VariableKind::Binary => usize::from(x[(i, first)] == 1.0),
        _ => (0..n_columns).find(|&k| x[(i, first + k)] == 1.0).map(|k| k + 1).unwrap_or(0),
    }
}

fn set_class(x: &mut DMatrix<f64>, i: usize, kind: &VariableKind, first: usize, n_columns: usize, class: usize) {
    match kind {
        VariableKind::Binary => x[(i, first)] = class as f64,
        _ => {
            for k in 0..n_columns {
                x[(i, first + k)] = if class == k + 1 { 1.0 } else { 0.0 };
            }
        }
    }
}

fn draw_class(probs: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    probs.len() - 1
}

/// Softmax probabilities over `1 + rows` classes for each row of `eta`
/// (reference class has linear predictor 0).
fn softmax_rows(eta: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, km1) = eta.shape();
    let mut p = DMatrix::<f64>::zeros(n, km1 + 1);
    for i in 0..n {
        let mx = (0..km1).map(|k| eta[(i, k)]).fold(0.0f64, f64::max);
        let mut total = (-mx).exp();
        p[(i, 0)] = total;
        for k in 0..km1 {
            let e = (eta[(i, k)] - mx).exp();
            p[(i, k + 1)] = e;
            total += e;
        }
        for k in 0..=km1 {
            p[(i, k)] /= total;
        }
    }
    p
}

/// Class probabilities from a softmax model for one design row set.
pub fn class_probabilities(coef: &[Vec<f64>], z: &DMatrix<f64>) -> DMatrix<f64> {
    let q = z.ncols();
    let b = DMatrix::from_fn(q, coef.len(), |j, k| coef[k][j]);
    softmax_rows(&(z * b))
}

/// Ridge-penalised softmax regression by Newton's method with step halving:
/// minimises mean negative log-likelihood + ridge/2 * |B|² (intercepts
/// unpenalised) until the gradient norm falls below 1e-6.
fn fit_softmax(z: &DMatrix<f64>, classes: &[usize], k: usize, ridge: f64, warm: Option<&[Vec<f64>]>) -> Option<Vec<Vec<f64>>> {
    let (n, q) = z.shape();
    let km1 = k - 1;
    let nf = n as f64;
    let dim = q * km1;
    let mut y = DMatrix::<f64>::zeros(n, k);
    for (i, &c) in classes.iter().enumerate() {
        y[(i, c)] = 1.0;
    }
    let mut b = match warm {
        Some(w) if w.len() == km1 && w.iter().all(|v| v.len() == q) => DMatrix::from_fn(q, km1, |j, c| w[c][j]),
        _ => DMatrix::<f64>::zeros(q, km1),
    };
    let objective = |b: &DMatrix<f64>| -> (f64, DMatrix<f64>) {
        let eta = z * b;
        let p = softmax_rows(&eta);
        let mut nll = 0.0;
        for (i, &c) in classes.iter().enumerate() {
            nll -= p[(i, c)].max(1e-300).ln();
        }
        let mut pen = 0.0;
        for c in 0..km1 {
            for j in 1..q {
                pen += b[(j, c)] * b[(j, c)];
            }
        }
        (nll / nf + 0.5 * ridge * pen, p)
    };
    let (mut f, mut p) = objective(&b);
    for _ in 0..MAX_NEWTON {
        // gradient, stacked class by class
        let resid = &p.columns(1, km1) - &y.columns(1, km1);
        let gmat = z.tr_mul(&resid) / nf;
        let mut g = DVector::<f64>::zeros(dim);
        for c in 0..km1 {
            for j in 0..q {
                let pen = if j > 0 { ridge * b[(j, c)] } else { 0.0 };
                g[c * q + j] = gmat[(j, c)] + pen;
            }
        }
        if g.norm() <= GRADIENT_TOL {
            break;
        }
        let mut h = DMatrix::<f64>::zeros(dim, dim);
        for a in 0..km1 {
            for c in a..km1 {
                let w: Vec<f64> = (0..n)
                    .map(|i| {
                        let pa = p[(i, a + 1)];
                        let delta = if a == c { 1.0 } else { 0.0 };
                        pa * (delta - p[(i, c + 1)]) / nf
                    })
                    .collect();
                let block = crate::linalg::weighted_gram(z, &w);
                h.view_mut((a * q, c * q), (q, q)).copy_from(&block);
                if a != c {
                    h.view_mut((c * q, a * q), (q, q)).copy_from(&block.transpose());
                }
            }
        }
        for c in 0..km1 {
            for j in 0..q {
                h[(c * q + j, c * q + j)] += if j > 0 { ridge } else { 1e-12 };
            }
        }
        let step = match h.clone().cholesky() {
            Some(ch) => ch.solve(&g),
            None => {
                let mut hj = h;
                for d in 0..dim {
                    hj[(d, d)] += 1e-8;
                }
                hj.cholesky()?.solve(&g)
            }
        };
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand = DMatrix::from_fn(q, km1, |j, c| b[(j, c)] - t * step[c * q + j]);
            let (fc, pc) = objective(&cand);
            if fc <= f - 1e-4 * t * g.dot(&step) || (fc <= f && t < 1e-6) {
                b = cand;
                f = fc;
                p = pc;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if b.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Some((0..km1).map(|c| b.column(c).iter().copied().collect()).collect())
}

/// Ridge-penalised least squares on a standardised design (intercept first,
/// unpenalised).
fn fit_linear(z: &DMatrix<f64>, target: &[f64], ridge: f64) -> Option<Vec<f64>> {
    let n = z.nrows() as f64;
    let mut gram = z.tr_mul(z) / n;
    for j in 1..gram.nrows() {
        gram[(j, j)] += ridge;
    }
    gram[(0, 0)] += 1e-12;
    let rhs = z.tr_mul(&DVector::from_column_slice(target)) / n;
    let coef = gram.cholesky()?.solve(&rhs);
    coef.iter().all(|v| v.is_finite()).then(|| coef.iter().copied().collect())
}

fn pmm_draw(fitted: &[f64], values: &[f64], mu: f64, k: usize, rng: &mut Rng) -> f64 {
    let n = fitted.len();
    let k = k.min(n).max(1);
    let mut hi = fitted.partition_point(|&f| f < mu);
    let mut lo = hi;
    while hi - lo < k {
        if lo == 0 {
            hi += 1;
        } else if hi == n || mu - fitted[lo - 1] <= fitted[hi] - mu {
            lo -= 1;
        } else {
            hi += 1;
        }
    }
    values[lo + rng.random_range(0..k)]
}

struct FitContext<'a> {
    meta: &'a EncodingMeta,
    fe: &'a [Option<usize>],
    n_fe: usize,
    y: &'a [f64],
    ridge: f64,
}

impl FitContext<'_> {
    fn other_columns(&self, variable: usize) -> Vec<usize> {
        let own = self.meta.variables[variable].columns();
        (0..self.meta.n_features()).filter(|c| !own.contains(c)).collect()
    }

    fn fit(&self, variable: usize, x: &DMatrix<f64>, observed: &[usize], use_outcome: bool, warm: Option<&ConditionalKind>) -> Result<ConditionalModel, MiceError> {
        let var = &self.meta.variables[variable];
        // year is determined by the cluster, so it gets no fixed effects
        let n_fe = if var.name == "year" { 0 } else { self.n_fe };
        let layout = PredictorLayout::fit(self.other_columns(variable), n_fe, use_outcome, x, observed, self.fe, self.y);
        let z = layout.build(x, observed, self.fe, self.y);
        let fail = || MiceError::Numeric(var.name.clone());
        let kind = match &var.kind {
            VariableKind::Continuous => {
                let target: Vec<f64> = observed.iter().map(|&i| x[(i, var.first_column)]).collect();
                let coef = fit_linear(&z, &target, self.ridge).ok_or_else(fail)?;
                let fitted = &z * DVector::from_column_slice(&coef);
                let mut donors: Vec<(f64, f64)> = fitted.iter().copied().zip(target).collect();
                donors.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
                ConditionalKind::Pmm {
                    coef,
                    donor_fitted: donors.iter().map(|d| d.0).collect(),
                    donor_values: donors.iter().map(|d| d.1).collect(),
                }
            }
            kind => {
                let k = n_classes(kind, var.n_columns);
                let classes: Vec<usize> = observed.iter().map(|&i| class_of(x, i, kind, var.first_column, var.n_columns)).collect();
                let warm_coef = match warm {
                    Some(ConditionalKind::Logistic { coef }) => Some(vec![coef.clone()]),
                    Some(ConditionalKind::Polytomous { coef }) => Some(coef.clone()),
                    _ => None,
                };
                let coef = fit_softmax(&z, &classes, k, self.ridge, warm_coef.as_deref()).ok_or_else(fail)?;
                if matches!(kind, VariableKind::Binary) {
                    ConditionalKind::Logistic { coef: coef.into_iter().next().expect("one class row") }
                } else {
                    ConditionalKind::Polytomous { coef }
                }
            }
        };
        Ok(ConditionalModel { variable, layout, kind })
    }
}

/// Redraws `rows` of the model's variable in `x`.
fn draw_cells(model: &ConditionalModel, meta: &EncodingMeta, x: &mut DMatrix<f64>, rows: &[usize], fe: &[Option<usize>], y: &[f64], donors: usize, rng: &mut Rng) {
    if rows.is_empty() {
        return;
    }
    let var = &meta.variables[model.variable];
    let z = model.layout.build(x, rows, fe, y);
    match &model.kind {
        ConditionalKind::Pmm { coef, donor_fitted, donor_values } => {
            let mu = &z * DVector::from_column_slice(coef);
            for (r, &i) in rows.iter().enumerate() {
                x[(i, var.first_column)] = pmm_draw(donor_fitted, donor_values, mu[r], donors, rng);
            }
        }
        ConditionalKind::Logistic { coef } => {
            let p = class_probabilities(std::slice::from_ref(coef), &z);
            for (r, &i) in rows.iter().enumerate() {
                let c = draw_class(&[p[(r, 0)], p[(r, 1)]], rng);
                set_class(x, i, &var.kind, var.first_column, var.n_columns, c);
            }
        }
        ConditionalKind::Polytomous { coef } => {
            let p = class_probabilities(coef, &z);
            for (r, &i) in rows.iter().enumerate() {
                let probs: Vec<f64> = p.row(r).iter().copied().collect();
                let c = draw_class(&probs, rng);
                set_class(x, i, &var.kind, var.first_column, var.n_columns, c);
            }
        }
    }
}

fn draw_from_marginal(marginal: &Marginal, var_kind: &VariableKind, first: usize, n_columns: usize, x: &mut DMatrix<f64>, i: usize, rng: &mut Rng) {
    match marginal {
        Marginal::Values(v) => x[(i, first)] = v[rng.random_range(0..v.len())],
        Marginal::Classes(p) => {
            let c = draw_class(p, rng);
            set_class(x, i, var_kind, first, n_columns, c);
        }
    }
}

fn in_scope(meta: &EncodingMeta, variable: usize, scope: ImputeScope) -> bool {
    let var = &meta.variables[variable];
    var.n_columns > 0
        && match scope {
            ImputeScope::AllVariables => true,
            ImputeScope::OptionalOnly => OPTIONAL_SOURCES.contains(&var.source.as_str()),
        }
}

fn missing_rows(data: &EncodedDataset, variable: usize) -> Vec<usize> {
    (0..data.n()).filter(|&i| data.is_missing(i, variable)).collect()
}

fn run_stream(train: &EncodedDataset, opts: &ImputerOptions, stream: usize) -> Result<(ImputationModelSet, EncodedDataset), MiceError> {
    let meta = &train.meta;
    let stream_seed = derive_seed(opts.seed, "mice-stream", stream as u64);
    let mut rng = rng_from(stream_seed);
    let clusters = train.distinct_clusters();
    let fe = cluster_index(&clusters, &train.clusters);
    let ctx = FitContext { meta, fe: &fe, n_fe: clusters.len().saturating_sub(1), y: &train.y, ridge: opts.ridge };

    let scope: Vec<usize> = (0..meta.variables.len()).filter(|&v| in_scope(meta, v, opts.scope)).collect();
    let missing: Vec<Vec<usize>> = scope.iter().map(|&v| missing_rows(train, v)).collect();
    let observed: Vec<Vec<usize>> = scope
        .iter()
        .zip(&missing)
        .map(|(_, miss)| {
            let mut is_missing = vec![false; train.n()];
            for &i in miss {
                is_missing[i] = true;
            }
            (0..train.n()).filter(|&i| !is_missing[i]).collect()
        })
        .collect();
    for (k, &v) in scope.iter().enumerate() {
        if observed[k].is_empty() {
            return Err(MiceError::AllMissing(meta.variables[v].name.clone()));
        }
    }
    let marginals: Vec<Marginal> = scope
        .iter()
        .enumerate()
        .map(|(k, &v)| {
            let var = &meta.variables[v];
            match &var.kind {
                VariableKind::Continuous => Marginal::Values(observed[k].iter().map(|&i| train.x[(i, var.first_column)]).collect()),
                kind => {
                    let mut counts = vec![0.0; n_classes(kind, var.n_columns)];
                    for &i in &observed[k] {
                        counts[class_of(&train.x, i, kind, var.first_column, var.n_columns)] += 1.0;
                    }
                    let total: f64 = counts.iter().sum();
                    Marginal::Classes(counts.into_iter().map(|c| c / total).collect())
                }
            }
        })
        .collect();

    let mut order: Vec<usize> = (0..scope.len()).collect();
    order.sort_by_key(|&k| (missing[k].len(), scope[k]));

    let mut x = train.x.clone();
    for &k in &order {
        let var = &meta.variables[scope[k]];
        for &i in &missing[k] {
            draw_from_marginal(&marginals[k], &var.kind, var.first_column, var.n_columns, &mut x, i, &mut rng);
        }
    }
    let mut warm: Vec<Option<ConditionalKind>> = vec![None; scope.len()];
    for _ in 0..opts.iterations {
        for &k in &order {
            if missing[k].is_empty() {
                continue;
            }
            let model = ctx.fit(scope[k], &x, &observed[k], true, warm[k].as_ref())?;
            draw_cells(&model, meta, &mut x, &missing[k], &fe, &train.y, opts.donors, &mut rng);
            warm[k] = Some(model.kind);
        }
    }
    let mut primary = Vec::with_capacity(order.len());
    let mut companion = Vec::with_capacity(order.len());
    for &k in &order {
        primary.push(ctx.fit(scope[k], &x, &observed[k], true, warm[k].as_ref())?);
        companion.push(ctx.fit(scope[k], &x, &observed[k], false, None)?);
    }
    let set = ImputationModelSet {
        meta_fingerprint: meta.fingerprint(),
        visit_order: order.iter().map(|&k| scope[k]).collect(),
        primary,
        companion,
        marginals: order.iter().map(|&k| marginals[k].clone()).collect(),
        clusters,
        iterations: opts.iterations,
        donors: opts.donors,
        stream,
        seed: stream_seed,
    };
    let completed = EncodedDataset { x, ..train.clone() };
    Ok((set, completed))
}

/// Fits `m` independent imputation streams on `train` and returns each
/// stream's frozen models with its completed copy of `train`.
pub fn fit_imputer(train: &EncodedDataset, opts: &ImputerOptions) -> Result<Vec<(ImputationModelSet, EncodedDataset)>, MiceError> {
    if opts.m == 0 || opts.iterations == 0 {
        return Err(MiceError::InvalidOptions("m and iterations must be at least 1".into()));
    }
    if opts.donors == 0 || !(opts.ridge > 0.0) {
        return Err(MiceError::InvalidOptions("donors must be positive and ridge > 0".into()));
    }
    if train.y.iter().any(|v| !v.is_finite()) {
        return Err(MiceError::MissingOutcome);
    }
    (0..opts.m).into_par_iter().map(|s| run_stream(train, opts, s)).collect()
}

/// Fills the missing cells of `holdout` with the frozen models: primary
/// models when `use_outcome`, companions otherwise. Observed cells are
/// never changed and no model is refitted.
pub fn apply_imputer(models: &ImputationModelSet, holdout: &EncodedDataset, use_outcome: bool, seed: u64) -> Result<EncodedDataset, MiceError> {
    let meta = &holdout.meta;
    let found = meta.fingerprint();
    if found != models.meta_fingerprint {
        return Err(MiceError::SchemaMismatch { expected: models.meta_fingerprint.clone(), found });
    }
    if use_outcome && holdout.y.iter().any(|v| !v.is_finite()) {
        return Err(MiceError::MissingOutcome);
    }
    let missing: Vec<Vec<usize>> = models.visit_order.iter().map(|&v| missing_rows(holdout, v)).collect();
    for v in 0..meta.variables.len() {
        if !models.visit_order.contains(&v) && (0..holdout.n()).any(|i| holdout.is_missing(i, v)) {
            return Err(MiceError::OutOfScope(meta.variables[v].name.clone()));
        }
    }
    let mut x = holdout.x.clone();
    if missing.iter().all(Vec::is_empty) {
        return Ok(holdout.clone());
    }
    let mut rng = rng_from(derive_seed(seed, "mice-apply", models.stream as u64));
    let fe = cluster_index(&models.clusters, &holdout.clusters);
    for (k, &v) in models.visit_order.iter().enumerate() {
        let var = &meta.variables[v];
        for &i in &missing[k] {
            draw_from_marginal(&models.marginals[k], &var.kind, var.first_column, var.n_columns, &mut x, i, &mut rng);
        }
    }
    let set = if use_outcome { &models.primary } else { &models.companion };
    for _ in 0..models.iterations {
        for (k, model) in set.iter().enumerate() {
            draw_cells(model, meta, &mut x, &missing[k], &fe, &holdout.y, models.donors, &mut rng);
        }
    }
    Ok(EncodedDataset { x, ..holdout.clone() })
}

/// A completed single record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SingleImputation {
    /// Completed design-matrix row.
    pub row: Vec<f64>,
    /// Completed value of each encoding variable, by name.
    pub values: Vec<(String, f64)>,
    /// Request fields that were absent and therefore imputed.
    pub imputed_fields: Vec<String>,
}

/// Completes one partial predictor record with the outcome-free companion
/// models. Any subset of fields may be absent.
pub fn impute_single(models: &ImputationModelSet, meta: &EncodingMeta, record: &Predictors, seed: u64) -> Result<SingleImputation, MiceError> {
    let values = meta.predictor_values(record);
    let (row, _) = meta
        .encode_values(&values)
        .map_err(|(v, _)| MiceError::OutOfScope(meta.variables[v].name.clone()))?;
    let x = DMatrix::from_row_slice(1, row.len(), &row);
    // no site is known at prediction time, which selects the reference
    // fixed-effect pattern
    let cluster = ClusterKey::new("", record.surgery_date.map(|d| chrono::Datelike::year(&d)).unwrap_or(0));
    let data = EncodedDataset {
        case_ids: vec!["request".into()],
        missing: x.map(f64::is_nan),
        x,
        y: vec![f64::NAN],
        clusters: vec![cluster],
        meta: meta.clone(),
    };
    let done = apply_imputer(models, &data, false, seed)?;
    let row: Vec<f64> = done.x.row(0).iter().copied().collect();
    let decoded = meta.decode_row(&row);
    Ok(SingleImputation {
        values: meta.variables.iter().map(|v| v.name.clone()).zip(decoded).collect(),
        row,
        imputed_fields: record.absent_fields().into_iter().map(str::to_string).collect(),
    })
}

/// Every field name a prediction request may carry.
pub fn request_fields() -> &'static [&'static str] {
    &PREDICTOR_FIELDS
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{encode, CaseRecord};
    use crate::synthdata::{generate, GeneratorConfig, MaskSpec, Mechanism, MissingSpec};
    use std::collections::BTreeSet;

    fn cohort(per_cell: usize, mask: MaskSpec, seed: u64) -> (Vec<CaseRecord>, Vec<CaseRecord>) {
        let mut cfg = GeneratorConfig::default();
        for v in cfg.cells.values_mut() {
            *v = per_cell;
        }
        cfg.seed = seed;
        cfg.mask = mask;
        let out = generate(&cfg).unwrap();
        (out.development, out.truth.complete)
    }

    fn default_mask() -> MaskSpec {
        GeneratorConfig::default().mask
    }

    #[test]
    fn softmax_matches_closed_form_for_saturated_binary() {
        // intercept-only logistic: fitted probability = observed share
        let z = DMatrix::from_element(10, 1, 1.0);
        let classes = [1, 1, 1, 0, 0, 0, 0, 0, 0, 0];
        let coef = fit_softmax(&z, &classes, 2, 0.0, None).unwrap();
        let p = 1.0 / (1.0 + (-coef[0][0]).exp());
        // the gradient of an intercept-only model is p - share
        assert!((p - 0.3).abs() <= 1e-6);
    }

    #[test]
    fn no_missing_gives_identical_copies() {
        let (dev, _) = cohort(30, MaskSpec::default(), 1);
        let data = encode(&dev, None).unwrap();
        let out = fit_imputer(&data, &ImputerOptions::new(3, 2, 7)).unwrap();
        assert_eq!(out.len(), 3);
        for (models, completed) in &out {
            assert_eq!(completed.x, data.x);
            assert_eq!(models.primary.len(), models.visit_order.len());
            assert!(!models.primary.is_empty());
        }
    }

    #[test]
    fn five_streams_have_distinct_seeds_and_differ() {
        let (dev, _) = cohort(40, default_mask(), 2);
        let data = encode(&dev, None).unwrap();
        let out = fit_imputer(&data, &ImputerOptions::new(5, 2, 11).with_scope(ImputeScope::OptionalOnly)).unwrap();
        assert_eq!(out.len(), 5);
        let seeds: BTreeSet<u64> = out.iter().map(|(m, _)| m.seed).collect();
        assert_eq!(seeds.len(), 5);
        let distinct: BTreeSet<Vec<u64>> = out.iter().map(|(_, d)| d.x.iter().map(|v| v.to_bits()).collect()).collect();
        assert!(distinct.len() >= 2);
        for (_, completed) in &out {
            assert!(!completed.has_missing_cells());
            for (a, b) in data.x.iter().zip(completed.x.iter()) {
                if !a.is_nan() {
                    assert_eq!(a.to_bits(), b.to_bits());
                }
            }
        }
    }

    #[test]
    fn imputed_bmi_values_come_from_observed_donors() {
        let mask = MaskSpec {
            fields: [("bmi".to_string(), MissingSpec { mechanism: Mechanism::Mcar, rate: 0.3 })].into_iter().collect(),
            ..Default::default()
        };
        let (dev, _) = cohort(40, mask, 3);
        let data = encode(&dev, None).unwrap();
        let j = data.meta.variables[data.meta.variable_index("bmi").unwrap()].first_column;
        let observed: BTreeSet<u64> = (0..data.n()).filter(|&i| !data.x[(i, j)].is_nan()).map(|i| data.x[(i, j)].to_bits()).collect();
        let out = fit_imputer(&data, &ImputerOptions::new(2, 3, 5)).unwrap();
        for (_, completed) in &out {
            for i in 0..data.n() {
                assert!(observed.contains(&completed.x[(i, j)].to_bits()));
            }
        }
    }

    #[test]
    fn option_and_data_errors() {
        let (dev, _) = cohort(10, MaskSpec::default(), 4);
        let data = encode(&dev, None).unwrap();
        assert!(matches!(fit_imputer(&data, &ImputerOptions::new(0, 5, 1)), Err(MiceError::InvalidOptions(_))));
        assert!(matches!(fit_imputer(&data, &ImputerOptions::new(1, 0, 1)), Err(MiceError::InvalidOptions(_))));
        let mut all_missing = data.clone();
        let j = data.meta.variables[data.meta.variable_index("bmi").unwrap()].first_column;
        for i in 0..all_missing.n() {
            all_missing.x[(i, j)] = f64::NAN;
        }
        assert_eq!(fit_imputer(&all_missing, &ImputerOptions::new(1, 1, 1)).unwrap_err(), MiceError::AllMissing("bmi".into()));
    }

    #[test]
    fn apply_leaves_complete_holdout_unchanged_and_checks_schema() {
        let (dev, _) = cohort(30, default_mask(), 5);
        let data = encode(&dev, None).unwrap();
        let (models, completed) = fit_imputer(&data, &ImputerOptions::new(1, 2, 3)).unwrap().remove(0);
        let same = apply_imputer(&models, &completed, true, 9).unwrap();
        assert_eq!(same.x, completed.x);
        let other_meta = EncodingMeta::standard(&[2019, 2020]);
        let mut wrong = completed.clone();
        wrong.meta = other_meta;
        assert!(matches!(apply_imputer(&models, &wrong, true, 9), Err(MiceError::SchemaMismatch { .. })));
    }

    #[test]
    fn apply_is_deterministic_and_preserves_observed_cells() {
        let (dev, _) = cohort(40, default_mask(), 6);
        let data = encode(&dev, None).unwrap();
        let half: Vec<usize> = (0..data.n()).filter(|i| i % 2 == 0).collect();
        let rest: Vec<usize> = (0..data.n()).filter(|i| i % 2 == 1).collect();
        let train = data.subset(&half);
        let hold = data.subset(&rest);
        let (models, _) = fit_imputer(&train, &ImputerOptions::new(1, 2, 3).with_scope(ImputeScope::OptionalOnly)).unwrap().remove(0);
        let a = apply_imputer(&models, &hold, true, 42).unwrap();
        let b = apply_imputer(&models, &hold, true, 42).unwrap();
        assert_eq!(a.x, b.x);
        assert!(!a.has_missing_cells());
        for (o, c) in hold.x.iter().zip(a.x.iter()) {
            if !o.is_nan() {
                assert_eq!(o.to_bits(), c.to_bits());
            }
        }
        let c = apply_imputer(&models, &hold, false, 42).unwrap();
        assert!(!c.has_missing_cells());
    }

    #[test]
    fn frozen_models_ignore_holdout_changes() {
        let (dev, _) = cohort(30, default_mask(), 7);
        let data = encode(&dev, None).unwrap();
        let train_rows: Vec<usize> = (0..data.n()).filter(|&i| data.clusters[i].site == "S2").collect();
        let train = data.subset(&train_rows);
        let (models, _) = fit_imputer(&train, &ImputerOptions::new(1, 2, 3).with_scope(ImputeScope::OptionalOnly)).unwrap().remove(0);
        let before = bincode::serde::encode_to_vec(&models, bincode::config::standard()).unwrap();
        let hold_rows: Vec<usize> = (0..data.n()).filter(|&i| data.clusters[i].site == "S1").collect();
        let mut hold = data.subset(&hold_rows);
        let _ = apply_imputer(&models, &hold, true, 1).unwrap();
        for v in hold.y.iter_mut() {
            *v += 1.0;
        }
        let _ = apply_imputer(&models, &hold, true, 1).unwrap();
        let after = bincode::serde::encode_to_vec(&models, bincode::config::standard()).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn single_record_paths() {
        let (dev, _) = cohort(30, default_mask(), 8);
        let data = encode(&dev, None).unwrap();
        let (models, _) = fit_imputer(&data, &ImputerOptions::new(1, 2, 3)).unwrap().remove(0);
        let full = dev.iter().find(|r| r.positions.is_some() && r.scheduled_duration_min.is_some() && r.bmi.is_some()).unwrap();
        let p = full.predictors();
        let done = impute_single(&models, &data.meta, &p, 1).unwrap();
        assert!(done.imputed_fields.is_empty());
        let (expect, _) = data.meta.encode_values(&data.meta.predictor_values(&p)).unwrap();
        assert_eq!(done.row, expect);

        let mut no_bmi = p.clone();
        no_bmi.bmi = None;
        let done = impute_single(&models, &data.meta, &no_bmi, 1).unwrap();
        assert_eq!(done.imputed_fields, vec!["bmi"]);
        let bmi = done.values.iter().find(|(n, _)| n == "bmi").unwrap().1;
        let donors: BTreeSet<u64> = dev.iter().filter_map(|r| r.bmi).map(f64::to_bits).collect();
        assert!(donors.contains(&bmi.to_bits()));
        assert_eq!(impute_single(&models, &data.meta, &no_bmi, 1).unwrap(), done);

        let empty = impute_single(&models, &data.meta, &Predictors::default(), 3).unwrap();
        assert_eq!(empty.imputed_fields.len(), PREDICTOR_FIELDS.len());
        assert!(empty.row.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn mcar_bmi_mean_is_recovered() {
        let mut cfg = GeneratorConfig::default();
        cfg.cells = [(ClusterKey::new("S1", 2022), 5_000), (ClusterKey::new("S2", 2022), 5_000)].into_iter().collect();
        cfg.mask = MaskSpec {
            fields: [("bmi".to_string(), MissingSpec { mechanism: Mechanism::Mcar, rate: 0.3 })].into_iter().collect(),
            ..Default::default()
        };
        let out = generate(&cfg).unwrap();
        let data = encode(&out.development, None).unwrap();
        let (_, completed) = fit_imputer(&data, &ImputerOptions::new(1, 5, 9).with_scope(ImputeScope::OptionalOnly)).unwrap().remove(0);
        let j = data.meta.variables[data.meta.variable_index("bmi").unwrap()].first_column;
        let truth: std::collections::BTreeMap<_, _> = out.truth.complete.iter().map(|r| (r.case_id.clone(), r.bmi.unwrap())).collect();
        let rows: Vec<usize> = (0..data.n()).filter(|&i| data.x[(i, j)].is_nan()).collect();
        let imputed = rows.iter().map(|&i| completed.x[(i, j)]).sum::<f64>() / rows.len() as f64;
        let actual = rows.iter().map(|&i| truth[&data.case_ids[i]]).sum::<f64>() / rows.len() as f64;
        assert!((imputed - actual).abs() <= 0.5, "{imputed} vs {actual}");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn class_probabilities_sum_to_one(coef in prop::collection::vec(prop::collection::vec(-30.0f64..30.0, 3), 1..5), rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 1..10)) {
                let z = DMatrix::from_fn(rows.len(), 3, |i, j| rows[i][j]);
                let p = class_probabilities(&coef, &z);
                for i in 0..rows.len() {
                    let s: f64 = p.row(i).iter().sum();
                    prop_assert!((s - 1.0).abs() <= 1e-12);
                    prop_assert!(p.row(i).iter().all(|v| *v >= 0.0));
                }
            }

            #[test]
            fn pmm_draws_lie_within_donor_range(fitted in prop::collection::vec(-10.0f64..10.0, 1..40), mu in -20.0f64..20.0, seed in any::<u64>()) {
                let mut fitted = fitted;
                fitted.sort_by(f64::total_cmp);
                let values: Vec<f64> = fitted.iter().map(|f| f * 2.0 + 1.0).collect();
                let mut rng = rng_from(seed);
                let v = pmm_draw(&fitted, &values, mu, 5, &mut rng);
                let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(v >= lo && v <= hi);
                prop_assert!(values.contains(&v));
            }
        }
    }
}
