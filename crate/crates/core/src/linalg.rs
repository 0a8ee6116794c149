//! Small dense helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

/// `[1 | X]`.
pub fn with_intercept(x: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, p) = x.shape();
    DMatrix::from_fn(n, p + 1, |r, c| if c == 0 { 1.0 } else { x[(r, c - 1)] })
}

/// Row `r` of `[1 | X]`.
pub fn design_row(x: &DMatrix<f64>, r: usize) -> DVector<f64> {
    DVector::from_fn(x.ncols() + 1, |c, _| if c == 0 { 1.0 } else { x[(r, c - 1)] })
}

/// `(1, v)`.
pub fn prepend_one(v: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(v.len() + 1, |c, _| if c == 0 { 1.0 } else { v[c - 1] })
}

/// Solves `a x = b` for symmetric positive definite `a`; `None` when the
/// factorization fails or the matrix is numerically rank deficient.
pub fn spd_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let chol = spd_factor(a)?;
    Some(chol.solve(b))
}

pub fn spd_inverse(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    spd_factor(a).map(|c| c.inverse())
}

fn spd_factor(a: &DMatrix<f64>) -> Option<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    if a.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let chol = a.clone().cholesky()?;
    let max_diag = a.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let min_pivot = chol.l_dirty().diagonal().iter().fold(f64::INFINITY, |m, v| m.min(v * v));
    if max_diag == 0.0 || min_pivot <= 1e-13 * max_diag {
        return None;
    }
    Some(chol)
}

/// General square solve via LU, used where symmetry is not guaranteed.
pub fn lu_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let x = a.clone().lu().solve(b)?;
    x.iter().all(|v| v.is_finite()).then_some(x)
}

pub fn expit(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^t)` without overflow.
pub fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

pub fn linspace(start: f64, end: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![start],
        _ => (0..n)
            .map(|i| start + (end - start) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

/// Type-7 sample quantile (linear interpolation between order statistics).
pub fn quantile_type7(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let h = (v.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}
