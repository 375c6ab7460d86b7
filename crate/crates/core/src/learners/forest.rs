use nalgebra::DMatrix;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tree::{grow, BinnedData, GrowParams, Tree};
use super::LearnerError;
use crate::seed::{derive_seed, rng_from};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub trees: Vec<Tree>,
}

impl ForestModel {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let preds: Vec<f64> = self.trees.iter().map(|t| t.predict_row(row)).collect();
        if preds.iter().all(|p| p.to_bits() == preds[0].to_bits()) {
            return preds[0];
        }
        preds.iter().sum::<f64>() / preds.len() as f64
    }
}

/// Bagged CART forest. Each tree draws its bootstrap sample and its
/// per-split feature subsets from its own derived seed, so trees can be
/// grown in any order.
pub fn fit_random_forest(x: &DMatrix<f64>, y: &[f64], n_trees: usize, mtry: usize, min_node: usize, seed: u64) -> Result<ForestModel, LearnerError> {
    let (n, p) = x.shape();
    if mtry == 0 || mtry > p {
        return Err(LearnerError::InvalidSpec(format!("mtry {mtry} must lie in 1..={p}")));
    }
    if min_node == 0 || min_node > n {
        return Err(LearnerError::InvalidSpec(format!("min_node {min_node} must lie in 1..={n}")));
    }
    if n_trees == 0 {
        return Err(LearnerError::InvalidSpec("n_trees must be positive".into()));
    }
    let data = BinnedData::new(x, y);
    let g = data.canonical_targets(y);
    let params = GrowParams { max_depth: None, min_leaf: min_node, mtry: Some(mtry) };
    let trees = (0..n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = rng_from(derive_seed(seed, "forest-tree", t as u64));
            let mut rows: Vec<u32> = (0..n).map(|_| rng.random_range(0..n as u32)).collect();
            rows.sort_unstable();
            grow(&data, rows, &g, &params, &mut rng)
        })
        .collect();
    Ok(ForestModel { trees })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_target_predicts_constant_exactly() {
        let x = DMatrix::from_fn(40, 3, |i, j| ((i * 7 + j * 3) % 11) as f64);
        let y = vec![4.844_187_086_458_591; 40];
        let f = fit_random_forest(&x, &y, 25, 2, 3, 9).unwrap();
        for i in 0..40 {
            let row: Vec<f64> = x.row(i).iter().copied().collect();
            assert_eq!(f.predict_row(&row), y[0]);
        }
    }

    #[test]
    fn one_tree_one_binary_feature() {
        let x = DMatrix::from_column_slice(8, 1, &[0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        let y: Vec<f64> = x.iter().map(|v| v * 10.0).collect();
        let f = fit_random_forest(&x, &y, 1, 1, 1, 4).unwrap();
        assert_eq!(f.predict_row(&[0.0]), 0.0);
        assert_eq!(f.predict_row(&[1.0]), 10.0);
    }

    #[test]
    fn argument_errors() {
        let x = DMatrix::from_element(5, 2, 1.0);
        let y = [1.0; 5];
        assert!(fit_random_forest(&x, &y, 10, 3, 1, 0).is_err());
        assert!(fit_random_forest(&x, &y, 10, 1, 6, 0).is_err());
    }
}
