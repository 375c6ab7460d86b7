//! The four base regression learners behind one fit/predict contract.
//!
//! Every learner sees the same encoded design matrix; cluster labels are
//! never features. A fitted learner remembers the fingerprint of the
//! encoding it was trained on and refuses data encoded differently.

pub mod elastic_net;
pub mod forest;
pub mod gam;
pub mod gbt;
pub mod tree;

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::{EncodedDataset, VariableKind};

pub use elastic_net::{fit_elastic_net, ElasticNetModel};
pub use forest::{fit_random_forest, ForestModel};
pub use gam::{fit_gam, GamModel};
pub use gbt::{fit_gbt, GbtModel};

#[derive(Debug, Error, PartialEq)]
pub enum LearnerError {
    #[error("invalid learner specification: {0}")]
    InvalidSpec(String),
    #[error("need at least 2 rows, got {0}")]
    TooFewRows(usize),
    #[error("data contains missing cells")]
    MissingCells,
    #[error("data contains non-finite values")]
    NonFinite,
    #[error("singular system: {0}")]
    Singular(String),
    #[error("model was fitted on encoding {expected}, data uses {found}")]
    FingerprintMismatch { expected: String, found: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnerKind {
    ElasticNet,
    Gam,
    RandomForest,
    Gbt,
}

impl LearnerKind {
    /// Canonical order, which is also the column order of stacking inputs.
    pub const ALL: [LearnerKind; 4] = [LearnerKind::ElasticNet, LearnerKind::Gam, LearnerKind::RandomForest, LearnerKind::Gbt];

    pub fn name(self) -> &'static str {
        match self {
            LearnerKind::ElasticNet => "elastic_net",
            LearnerKind::Gam => "gam",
            LearnerKind::RandomForest => "random_forest",
            LearnerKind::Gbt => "gbt",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        LearnerKind::ALL.into_iter().find(|k| k.name() == name)
    }

    /// Declared hyperparameter names.
    pub fn keys(self) -> &'static [&'static str] {
        match self {
            LearnerKind::ElasticNet => &["lambda", "alpha"],
            LearnerKind::Gam => &["lambda_s", "knots"],
            LearnerKind::RandomForest => &["n_trees", "mtry", "min_node"],
            LearnerKind::Gbt => &["n_rounds", "depth", "learning_rate", "subsample"],
        }
    }

    fn integer_keys(self) -> &'static [&'static str] {
        match self {
            LearnerKind::ElasticNet => &[],
            LearnerKind::Gam => &["knots"],
            LearnerKind::RandomForest => &["n_trees", "mtry", "min_node"],
            LearnerKind::Gbt => &["n_rounds", "depth"],
        }
    }
}

impl fmt::Display for LearnerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnerSpec {
    pub kind: LearnerKind,
    pub params: BTreeMap<String, f64>,
    /// Used by the tree learners only.
    pub seed: u64,
}

impl LearnerSpec {
    pub fn new(kind: LearnerKind, params: &[(&str, f64)], seed: u64) -> Result<Self, LearnerError> {
        let spec = LearnerSpec { kind, params: params.iter().map(|(k, v)| (k.to_string(), *v)).collect(), seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), LearnerError> {
        let keys = self.kind.keys();
        if self.params.len() != keys.len() || keys.iter().any(|k| !self.params.contains_key(*k)) {
            return Err(LearnerError::InvalidSpec(format!("{} expects exactly {:?}, got {:?}", self.kind, keys, self.params.keys().collect::<Vec<_>>())));
        }
        for (k, &v) in &self.params {
            if !v.is_finite() {
                return Err(LearnerError::InvalidSpec(format!("{k} must be finite")));
            }
            if self.kind.integer_keys().contains(&k.as_str()) && (v.fract() != 0.0 || v < 1.0) {
                return Err(LearnerError::InvalidSpec(format!("{k} must be a positive integer, got {v}")));
            }
        }
        let get = |k: &str| self.params[k];
        let ok = match self.kind {
            LearnerKind::ElasticNet => get("lambda") >= 0.0 && (0.0..=1.0).contains(&get("alpha")),
            LearnerKind::Gam => get("lambda_s") >= 0.0 && get("knots") >= 4.0,
            LearnerKind::RandomForest => true,
            LearnerKind::Gbt => get("learning_rate") > 0.0 && get("subsample") > 0.0 && get("subsample") <= 1.0,
        };
        if ok {
            Ok(())
        } else {
            Err(LearnerError::InvalidSpec(format!("{self} is outside the allowed ranges")))
        }
    }

    fn int(&self, key: &str) -> usize {
        self.params[key] as usize
    }
}

impl fmt::Display for LearnerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let body: Vec<String> = self.kind.keys().iter().filter_map(|k| self.params.get(*k).map(|v| format!("{k}={v}"))).collect();
        write!(f, "{}({})", self.kind, body.join(", "))
    }
}

/// Hyperparameter values per key, expanded in key order (first key
/// outermost) to give the canonical grid order.
pub type GridAxes = Vec<(String, Vec<f64>)>;

pub fn default_axes(kind: LearnerKind, p: usize) -> GridAxes {
    let axes: Vec<(&str, Vec<f64>)> = match kind {
        LearnerKind::ElasticNet => vec![("lambda", vec![0.0001, 0.001, 0.01, 0.1]), ("alpha", vec![0.1, 0.5, 0.9])],
        LearnerKind::Gam => vec![("lambda_s", vec![0.01, 1.0, 100.0]), ("knots", vec![10.0])],
        LearnerKind::RandomForest => {
            let third = (p as f64 / 3.0).ceil().max(1.0);
            let root = (p as f64).sqrt().ceil().max(1.0);
            let mut mtry = vec![third, root];
            mtry.dedup();
            vec![("n_trees", vec![300.0]), ("mtry", mtry), ("min_node", vec![5.0, 20.0])]
        }
        LearnerKind::Gbt => vec![
            ("n_rounds", vec![100.0, 300.0]),
            ("depth", vec![2.0, 4.0]),
            ("learning_rate", vec![0.05, 0.1]),
            ("subsample", vec![0.8]),
        ],
    };
    axes.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

pub fn expand_grid(kind: LearnerKind, axes: &GridAxes, seed: u64) -> Result<Vec<LearnerSpec>, LearnerError> {
    let mut points: Vec<BTreeMap<String, f64>> = vec![BTreeMap::new()];
    for (key, values) in axes {
        if values.is_empty() {
            return Err(LearnerError::InvalidSpec(format!("grid axis {key} is empty")));
        }
        points = points
            .into_iter()
            .flat_map(|pt| {
                values.iter().map(move |&v| {
                    let mut next = pt.clone();
                    next.insert(key.clone(), v);
                    next
                })
            })
            .collect();
    }
    points
        .into_iter()
        .map(|params| {
            let spec = LearnerSpec { kind, params, seed };
            spec.validate().map(|_| spec)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LearnerModel {
    ElasticNet(ElasticNetModel),
    Gam(GamModel),
    RandomForest(ForestModel),
    Gbt(GbtModel),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FittedLearner {
    pub spec: LearnerSpec,
    pub fingerprint: String,
    pub model: LearnerModel,
}

fn check_complete(data: &EncodedDataset) -> Result<(), LearnerError> {
    if data.has_missing_cells() {
        return Err(LearnerError::MissingCells);
    }
    if data.x.iter().chain(&data.y).any(|v| !v.is_finite()) {
        return Err(LearnerError::NonFinite);
    }
    Ok(())
}

/// Design columns that get spline smooths: the continuous variables.
pub fn continuous_columns(data: &EncodedDataset) -> Vec<usize> {
    data.meta.variables.iter().filter(|v| matches!(v.kind, VariableKind::Continuous)).map(|v| v.first_column).collect()
}

pub fn fit(spec: &LearnerSpec, data: &EncodedDataset) -> Result<FittedLearner, LearnerError> {
    spec.validate()?;
    check_complete(data)?;
    if data.n() < 2 {
        return Err(LearnerError::TooFewRows(data.n()));
    }
    let (x, y) = (&data.x, &data.y[..]);
    let p = &spec.params;
    let model = match spec.kind {
        LearnerKind::ElasticNet => LearnerModel::ElasticNet(fit_elastic_net(x, y, p["lambda"], p["alpha"])?),
        LearnerKind::Gam => LearnerModel::Gam(fit_gam(x, y, &continuous_columns(data), p["lambda_s"], spec.int("knots"))?),
        LearnerKind::RandomForest => {
            LearnerModel::RandomForest(fit_random_forest(x, y, spec.int("n_trees"), spec.int("mtry"), spec.int("min_node"), spec.seed)?)
        }
        LearnerKind::Gbt => LearnerModel::Gbt(fit_gbt(x, y, spec.int("n_rounds"), spec.int("depth"), p["learning_rate"], p["subsample"], spec.seed)?),
    };
    Ok(FittedLearner { spec: spec.clone(), fingerprint: data.fingerprint(), model })
}

impl FittedLearner {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        match &self.model {
            LearnerModel::ElasticNet(m) => m.predict_row(row),
            LearnerModel::Gam(m) => m.predict_row(row),
            LearnerModel::RandomForest(m) => m.predict_row(row),
            LearnerModel::Gbt(m) => m.predict_row(row),
        }
    }

    /// Predictions for every row of a complete design matrix.
    pub fn predict_matrix(&self, x: &DMatrix<f64>) -> Vec<f64> {
        let mut row = vec![0.0; x.ncols()];
        (0..x.nrows())
            .map(|i| {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = x[(i, j)];
                }
                self.predict_row(&row)
            })
            .collect()
    }
}

pub fn predict(model: &FittedLearner, data: &EncodedDataset) -> Result<Vec<f64>, LearnerError> {
    let found = data.fingerprint();
    if found != model.fingerprint {
        return Err(LearnerError::FingerprintMismatch { expected: model.fingerprint.clone(), found });
    }
    if data.has_missing_cells() || data.x.iter().any(|v| !v.is_finite()) {
        return Err(LearnerError::MissingCells);
    }
    let preds = model.predict_matrix(&data.x);
    if preds.iter().any(|v| !v.is_finite()) {
        return Err(LearnerError::NonFinite);
    }
    Ok(preds)
}
