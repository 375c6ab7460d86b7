//! Small dense linear-algebra and summary helpers shared by the learners,
//! the imputation models and the metrics.

use nalgebra::{DMatrix, DVector};

/// Mean computed relative to the first element, so a constant slice returns
/// that constant bit-for-bit.
pub fn stable_mean(values: &[f64]) -> f64 {
    match values.first() {
        None => f64::NAN,
        Some(&first) => {
            let shift: f64 = values.iter().map(|v| v - first).sum();
            first + shift / values.len() as f64
        }
    }
}

/// Same as [`stable_mean`] over an index subset.
pub fn stable_mean_indexed(values: &[f64], idx: &[usize]) -> f64 {
    match idx.first() {
        None => f64::NAN,
        Some(&i0) => {
            let first = values[i0];
            let shift: f64 = idx.iter().map(|&i| values[i] - first).sum();
            first + shift / idx.len() as f64
        }
    }
}

/// Quantile with linear interpolation between order statistics
/// (Hyndman–Fan type 7). `sorted` must be ascending and non-empty.
pub fn quantile_sorted(sorted: &[f64], prob: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty slice");
    let h = (sorted.len() - 1) as f64 * prob.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn quantile(values: &[f64], prob: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    quantile_sorted(&sorted, prob)
}

/// `Xᵀ diag(w) X` through one dense product.
pub fn weighted_gram(x: &DMatrix<f64>, w: &[f64]) -> DMatrix<f64> {
    let mut xw = x.clone();
    for mut col in xw.column_iter_mut() {
        for (v, wi) in col.iter_mut().zip(w) {
            *v *= wi;
        }
    }
    xw.tr_mul(x)
}

/// Result of a symmetric positive semi-definite solve in which numerically
/// dependent columns are aliased (their coefficient is fixed at zero),
/// mirroring how linear-model software reports non-estimable terms.
#[derive(Debug, Clone)]
pub struct AliasedSolution {
    pub coef: DVector<f64>,
    pub aliased: Vec<bool>,
}

/// Solves `A x = b` for symmetric PSD `A` with an in-order Cholesky sweep.
/// A column whose remaining pivot falls below `tol` times its original
/// diagonal is declared aliased and dropped from the system.
pub fn solve_psd_aliased(a: &DMatrix<f64>, b: &DVector<f64>, tol: f64) -> AliasedSolution {
    let n = a.nrows();
    let mut l = DMatrix::<f64>::zeros(n, n);
    let mut aliased = vec![false; n];
    for j in 0..n {
        let diag = a[(j, j)];
        let mut d = diag;
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(diag > 0.0) || d <= tol * diag {
            aliased[j] = true;
            continue;
        }
        let ljj = d.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    // forward: L z = b over active columns
    let mut z = DVector::<f64>::zeros(n);
    for i in 0..n {
        if aliased[i] {
            continue;
        }
        let mut s = b[i];
        for k in 0..i {
            if !aliased[k] {
                s -= l[(i, k)] * z[k];
            }
        }
        z[i] = s / l[(i, i)];
    }
    let mut x = DVector::<f64>::zeros(n);
    for i in (0..n).rev() {
        if aliased[i] {
            continue;
        }
        let mut s = z[i];
        for k in (i + 1)..n {
            if !aliased[k] {
                s -= l[(k, i)] * x[k];
            }
        }
        x[i] = s / l[(i, i)];
    }
    AliasedSolution { coef: x, aliased }
}

/// Ordinary least squares with an intercept, solved by SVD.
/// Returns `[intercept, slopes...]`.
pub fn ols_with_intercept(x: &DMatrix<f64>, y: &[f64]) -> Option<Vec<f64>> {
    let n = x.nrows();
    let mut design = DMatrix::<f64>::from_element(n, x.ncols() + 1, 1.0);
    design.view_mut((0, 1), (n, x.ncols())).copy_from(x);
    let rhs = DVector::from_column_slice(y);
    let svd = design.svd(true, true);
    let sol = svd.solve(&rhs, 1e-12).ok()?;
    Some(sol.iter().copied().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn type7_quantiles() {
        let v = [50.0, 60.0, 70.0];
        assert_eq!(quantile(&v, 0.5), 60.0);
        assert_eq!(quantile(&v, 0.25), 55.0);
        assert_eq!(quantile(&v, 0.75), 65.0);
        assert_eq!(quantile(&[3.0], 0.9), 3.0);
    }

    #[test]
    fn stable_mean_of_constant_is_exact() {
        let v = vec![0.1; 7];
        assert_eq!(stable_mean(&v), 0.1);
        assert_eq!(stable_mean_indexed(&v, &[0, 3, 3, 6]), 0.1);
    }

    #[test]
    fn aliased_solve_drops_duplicate_column() {
        // columns 0 and 1 identical
        let x = DMatrix::from_row_slice(4, 3, &[
            1.0, 1.0, 0.0,
            2.0, 2.0, 1.0,
            3.0, 3.0, 0.0,
            4.0, 4.0, 1.0,
        ]);
        let y = DVector::from_vec(vec![1.0, 3.0, 3.0, 5.0]);
        let gram = x.tr_mul(&x);
        let rhs = x.tr_mul(&y);
        let sol = solve_psd_aliased(&gram, &rhs, 1e-10);
        assert_eq!(sol.aliased, vec![false, true, false]);
        let fit = &x * &sol.coef;
        for (f, t) in fit.iter().zip(y.iter()) {
            assert!((f - t).abs() < 1e-9);
        }
    }

    #[test]
    fn weighted_gram_matches_loop() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let w = [0.5, 1.0, 2.0];
        let g = weighted_gram(&x, &w);
        let mut expect = DMatrix::<f64>::zeros(2, 2);
        for i in 0..3 {
            for a in 0..2 {
                for b in 0..2 {
                    expect[(a, b)] += w[i] * x[(i, a)] * x[(i, b)];
                }
            }
        }
        assert!((g - expect).abs().max() < 1e-12);
    }

    #[test]
    fn ols_recovers_plane() {
        let x = DMatrix::from_row_slice(5, 2, &[
            0.0, 1.0, 1.0, 0.0, 2.0, 1.0, 3.0, 5.0, 4.0, 2.0,
        ]);
        let y: Vec<f64> = (0..5).map(|i| 1.5 + 2.0 * x[(i, 0)] - 0.5 * x[(i, 1)]).collect();
        let b = ols_with_intercept(&x, &y).unwrap();
        assert!((b[0] - 1.5).abs() < 1e-10);
        assert!((b[1] - 2.0).abs() < 1e-10);
        assert!((b[2] + 0.5).abs() < 1e-10);
    }
}
