//! Penalised additive model: cubic B-spline smooths for the continuous
//! columns and linear terms for every other column.
//!
//! Each continuous column is mapped onto [0, 1] with its training range.
//! Knots sit at training quantiles. The penalty takes second differences
//! of the spline coefficients divided by the spacing of their Greville
//! abscissae, so its null space is exactly the straight lines and a very
//! large penalty leaves a linear model. Basis columns are centred and the
//! last one is dropped, which fixes the level shared with the intercept.
//! Beyond the training range a smooth continues along its boundary tangent.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::LearnerError;
use crate::linalg::{quantile_sorted, solve_psd_aliased};

const DEGREE: usize = 3;
const ALIAS_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Smooth {
    pub column: usize,
    pub lo: f64,
    pub hi: f64,
    /// Full knot vector on the unit scale, boundary knots repeated.
    pub knots: Vec<f64>,
    /// Training means of the retained basis columns.
    pub center: Vec<f64>,
    pub coef: Vec<f64>,
}

impl Smooth {
    fn n_basis(&self) -> usize {
        self.knots.len() - DEGREE - 1
    }

    fn centred_basis(&self, x: f64) -> Vec<f64> {
        let u = (x - self.lo) / (self.hi - self.lo);
        let uc = u.clamp(0.0, 1.0);
        let mut b = basis(&self.knots, DEGREE, uc);
        if u != uc {
            let d = basis_derivative(&self.knots, uc);
            for (bi, di) in b.iter_mut().zip(d) {
                *bi += (u - uc) * di;
            }
        }
        b.truncate(self.n_basis() - 1);
        for (bi, c) in b.iter_mut().zip(&self.center) {
            *bi -= c;
        }
        b
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.centred_basis(x).iter().zip(&self.coef).map(|(b, c)| b * c).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GamModel {
    pub intercept: f64,
    pub linear_columns: Vec<usize>,
    /// Linear coefficients on the original column scale.
    pub linear_coef: Vec<f64>,
    pub smooths: Vec<Smooth>,
    /// Linear columns whose coefficient is not identifiable from the
    /// training data (constant or collinear); fixed at zero.
    pub aliased_columns: Vec<usize>,
}

impl GamModel {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let lin: f64 = self.linear_columns.iter().zip(&self.linear_coef).map(|(&c, b)| row[c] * b).sum();
        let smooth: f64 = self.smooths.iter().map(|s| s.eval(row[s.column])).sum();
        self.intercept + lin + smooth
    }
}

/// Cox–de Boor evaluation of all B-splines of `degree` at `x` in [t0, t_last].
pub fn basis(t: &[f64], degree: usize, x: f64) -> Vec<f64> {
    let m = t.len() - 1;
    let last = t[m];
    // degree-0 indicators over half-open spans; x at the right boundary
    // belongs to the last non-empty span
    let mut b: Vec<f64> = (0..m)
        .map(|i| {
            let inside = t[i] <= x && x < t[i + 1];
            let closing = x == last && t[i] < t[i + 1] && t[i + 1] == last;
            if inside || closing { 1.0 } else { 0.0 }
        })
        .collect();
    for k in 1..=degree {
        let next: Vec<f64> = (0..m - k)
            .map(|i| {
                let a = if t[i + k] > t[i] { (x - t[i]) / (t[i + k] - t[i]) * b[i] } else { 0.0 };
                let c = if t[i + k + 1] > t[i + 1] { (t[i + k + 1] - x) / (t[i + k + 1] - t[i + 1]) * b[i + 1] } else { 0.0 };
                a + c
            })
            .collect();
        b = next;
    }
    b
}

fn basis_derivative(t: &[f64], x: f64) -> Vec<f64> {
    let lower = basis(t, DEGREE - 1, x);
    let n = t.len() - DEGREE - 1;
    let k = DEGREE as f64;
    (0..n)
        .map(|i| {
            let a = if t[i + DEGREE] > t[i] { lower[i] / (t[i + DEGREE] - t[i]) } else { 0.0 };
            let c = if i + 1 < lower.len() && t[i + DEGREE + 1] > t[i + 1] { lower[i + 1] / (t[i + DEGREE + 1] - t[i + 1]) } else { 0.0 };
            k * (a - c)
        })
        .collect()
}

fn greville(t: &[f64]) -> Vec<f64> {
    let n = t.len() - DEGREE - 1;
    (0..n).map(|i| t[i + 1..=i + DEGREE].iter().sum::<f64>() / DEGREE as f64).collect()
}

/// `DᵀD` for Greville-divided second differences.
pub fn penalty_matrix(t: &[f64]) -> DMatrix<f64> {
    let g = greville(t);
    let n = g.len();
    let mut d = DMatrix::<f64>::zeros(n.saturating_sub(2), n);
    for i in 0..n.saturating_sub(2) {
        let a = 1.0 / (g[i + 1] - g[i]);
        let b = 1.0 / (g[i + 2] - g[i + 1]);
        d[(i, i)] = a;
        d[(i, i + 1)] = -a - b;
        d[(i, i + 2)] = b;
    }
    d.tr_mul(&d)
}

fn knot_vector(unit_sorted: &[f64], knots: usize) -> Vec<f64> {
    let mut interior: Vec<f64> = (1..knots - 1).map(|j| quantile_sorted(unit_sorted, j as f64 / (knots - 1) as f64)).filter(|&q| q > 0.0 && q < 1.0).collect();
    interior.dedup();
    let mut t = vec![0.0; DEGREE + 1];
    t.extend(interior);
    t.extend(std::iter::repeat_n(1.0, DEGREE + 1));
    t
}

/// Penalised least squares minimising `(1/n)·RSS + λ_s·Σ cᵀPc`.
pub fn fit_gam(x: &DMatrix<f64>, y: &[f64], continuous: &[usize], lambda_s: f64, knots: usize) -> Result<GamModel, LearnerError> {
    if knots < 4 {
        return Err(LearnerError::InvalidSpec(format!("knots {knots} must be at least 4")));
    }
    if !(lambda_s >= 0.0) || !lambda_s.is_finite() {
        return Err(LearnerError::InvalidSpec(format!("lambda_s {lambda_s} must be >= 0")));
    }
    let (n, p) = x.shape();
    let nf = n as f64;
    let mut smooths = Vec::new();
    let mut linear_columns = Vec::new();
    for j in 0..p {
        if !continuous.contains(&j) {
            linear_columns.push(j);
            continue;
        }
        let col = x.column(j);
        let lo = col.min();
        let hi = col.max();
        if hi > lo {
            let mut unit: Vec<f64> = col.iter().map(|v| (v - lo) / (hi - lo)).collect();
            unit.sort_by(f64::total_cmp);
            let t = knot_vector(&unit, knots);
            smooths.push(Smooth { column: j, lo, hi, knots: t, center: Vec::new(), coef: Vec::new() });
        }
    }

    // design: intercept | standardised linear columns | centred smooth bases
    let lin_stats: Vec<(f64, f64)> = linear_columns
        .iter()
        .map(|&j| {
            let col = x.column(j);
            let mean = col.sum() / nf;
            let sd = (col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nf).sqrt();
            (mean, sd)
        })
        .collect();
    let widths: Vec<usize> = smooths.iter().map(|s| s.n_basis() - 1).collect();
    let q = 1 + linear_columns.len() + widths.iter().sum::<usize>();
    let mut z = DMatrix::<f64>::zeros(n, q);
    z.column_mut(0).fill(1.0);
    for (k, (&j, &(mean, sd))) in linear_columns.iter().zip(&lin_stats).enumerate() {
        let scale = if sd > 0.0 { 1.0 / sd } else { 0.0 };
        for i in 0..n {
            z[(i, 1 + k)] = (x[(i, j)] - mean) * scale;
        }
    }
    let mut offset = 1 + linear_columns.len();
    let mut offsets = Vec::with_capacity(smooths.len());
    for (s, &w) in smooths.iter_mut().zip(&widths) {
        s.center = vec![0.0; w];
        for i in 0..n {
            let b = s.centred_basis(x[(i, s.column)]);
            for k in 0..w {
                z[(i, offset + k)] = b[k];
            }
        }
        for k in 0..w {
            let mean = z.column(offset + k).sum() / nf;
            s.center[k] = mean;
            for i in 0..n {
                z[(i, offset + k)] -= mean;
            }
        }
        offsets.push(offset);
        offset += w;
    }

    // rotate each smooth into the eigenbasis of its penalty: the penalty
    // becomes diagonal and its null-space (linear) direction keeps a
    // data-scale pivot however large the penalty is
    let mut rotations = Vec::with_capacity(smooths.len());
    let mut pen_diag = vec![0.0; q];
    for (s, &off) in smooths.iter().zip(&offsets) {
        let w = s.n_basis() - 1;
        let pen = penalty_matrix(&s.knots).view((0, 0), (w, w)).into_owned();
        let eig = pen.symmetric_eigen();
        let top = eig.eigenvalues.iter().copied().fold(0.0f64, f64::max);
        let block = z.view((0, off), (n, w)) * &eig.eigenvectors;
        z.view_mut((0, off), (n, w)).copy_from(&block);
        for k in 0..w {
            let ev = eig.eigenvalues[k];
            pen_diag[off + k] = if ev > 1e-9 * top { lambda_s * ev } else { 0.0 };
        }
        rotations.push(eig.eigenvectors);
    }
    let mut a = z.tr_mul(&z) / nf;
    for (k, d) in pen_diag.iter().enumerate() {
        a[(k, k)] += d;
    }
    let rhs = z.tr_mul(&DVector::from_column_slice(y)) / nf;
    let sol = solve_psd_aliased(&a, &rhs, ALIAS_TOL);
    let smooth_start = 1 + linear_columns.len();
    if sol.aliased[0] || (lambda_s == 0.0 && sol.aliased[smooth_start..].iter().any(|&al| al)) {
        return Err(LearnerError::Singular("unpenalised spline system is singular".into()));
    }
    if sol.coef.iter().any(|v| !v.is_finite()) {
        return Err(LearnerError::Singular("non-finite spline solution".into()));
    }
    let mut intercept = sol.coef[0];
    let mut linear_coef = Vec::with_capacity(linear_columns.len());
    let mut aliased_columns = Vec::new();
    for (k, (&j, &(mean, sd))) in linear_columns.iter().zip(&lin_stats).enumerate() {
        let b = if sd > 0.0 && !sol.aliased[1 + k] { sol.coef[1 + k] / sd } else { 0.0 };
        if sd == 0.0 || sol.aliased[1 + k] {
            aliased_columns.push(j);
        }
        intercept -= b * mean;
        linear_coef.push(b);
    }
    for ((s, &off), rot) in smooths.iter_mut().zip(&offsets).zip(&rotations) {
        let w = s.n_basis() - 1;
        let gamma = DVector::from_iterator(w, (0..w).map(|k| sol.coef[off + k]));
        s.coef = (rot * gamma).iter().copied().collect();
    }
    Ok(GamModel { intercept, linear_columns, linear_coef, smooths, aliased_columns })
}
