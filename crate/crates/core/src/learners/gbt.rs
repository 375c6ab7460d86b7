use nalgebra::DMatrix;
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::tree::{grow, BinnedData, GrowParams, Tree};
use super::LearnerError;
use crate::seed::{derive_seed, rng_from};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GbtModel {
    pub base_score: f64,
    pub learning_rate: f64,
    pub trees: Vec<Tree>,
}

impl GbtModel {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        self.trees.iter().fold(self.base_score, |acc, t| acc + self.learning_rate * t.predict_row(row))
    }
}

/// Squared-error gradient boosting: each round fits a depth-limited tree
/// to the current residuals of a row subsample drawn from that round's own
/// seed.
pub fn fit_gbt(x: &DMatrix<f64>, y: &[f64], n_rounds: usize, depth: usize, learning_rate: f64, subsample: f64, seed: u64) -> Result<GbtModel, LearnerError> {
    if !(learning_rate > 0.0) || !learning_rate.is_finite() {
        return Err(LearnerError::InvalidSpec(format!("learning_rate {learning_rate} must be positive")));
    }
    if depth < 1 {
        return Err(LearnerError::InvalidSpec("depth must be at least 1".into()));
    }
    if !(subsample > 0.0 && subsample <= 1.0) {
        return Err(LearnerError::InvalidSpec(format!("subsample {subsample} must lie in (0, 1]")));
    }
    let n = x.nrows();
    let data = BinnedData::new(x, y);
    let target = data.canonical_targets(y);
    let base_score = match target.first() {
        Some(&first) if target.iter().all(|v| v.to_bits() == first.to_bits()) => first,
        _ => target.iter().sum::<f64>() / n as f64,
    };
    let mut fitted = vec![base_score; n];
    let params = GrowParams { max_depth: Some(depth), min_leaf: 1, mtry: None };
    let take = ((subsample * n as f64).round() as usize).clamp(1, n);
    let mut trees = Vec::with_capacity(n_rounds);
    let mut resid = vec![0.0; n];
    let canonical_rows: Vec<Vec<f64>> = data.canonical.iter().map(|&i| x.row(i).iter().copied().collect()).collect();
    for round in 0..n_rounds {
        let mut rng = rng_from(derive_seed(seed, "gbt-round", round as u64));
        for i in 0..n {
            resid[i] = target[i] - fitted[i];
        }
        let rows: Vec<u32> = if take == n {
            (0..n as u32).collect()
        } else {
            let mut r: Vec<u32> = sample(&mut rng, n, take).into_iter().map(|i| i as u32).collect();
            r.sort_unstable();
            r
        };
        let tree = grow(&data, rows, &resid, &params, &mut rng);
        for (f, row) in fitted.iter_mut().zip(&canonical_rows) {
            *f += learning_rate * tree.predict_row(row);
        }
        trees.push(tree);
    }
    Ok(GbtModel { base_score, learning_rate, trees })
}
