//! Exponential-tilt density ratio between a source site and the target.
//!
//! `ω(x) = exp(γᵀψ(x))` with `ψ(x) = (1, x)`. γ solves
//! `n⁻¹ Σ ψ(xᵢ) ω(xᵢ) = (1, target means)` so the reweighted source sample
//! reproduces the target's covariate means.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{design_row, spd_solve, with_intercept};

pub const TILT_TOL: f64 = 1e-9;
pub const TILT_MAX_ITER: usize = 200;
const MAX_HALVINGS: usize = 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetMoments {
    pub means: DVector<f64>,
    pub n_target: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TiltFit {
    /// Intercept first.
    pub gamma: DVector<f64>,
    pub converged: bool,
    /// Sup-norm of the estimating equations at `gamma`.
    pub residual_norm: f64,
}

/// `(1, target means)`.
pub fn target_psi(target: &TargetMoments) -> DVector<f64> {
    crate::linalg::prepend_one(&target.means)
}

fn residual(d: &DMatrix<f64>, gamma: &DVector<f64>, tau: &DVector<f64>) -> Option<(DVector<f64>, DVector<f64>)> {
    let w = (d * gamma).map(f64::exp);
    if w.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let h = d.tr_mul(&w) / d.nrows() as f64 - tau;
    Some((h, w))
}

/// Damped Newton solve of the tilt estimating equations.
pub fn solve_tilt(source_x: &DMatrix<f64>, target: &TargetMoments, tol: f64, max_iter: usize) -> Result<TiltFit> {
    let (n, p) = source_x.shape();
    if target.means.len() != p {
        return Err(Error::Dimension(format!("target has {} means, source {} covariates", target.means.len(), p)));
    }
    if n == 0 {
        return Err(Error::TiltInfeasible("empty source".into()));
    }
    if target.means.iter().any(|m| !m.is_finite()) {
        return Err(Error::NonFinite("target means"));
    }
    for c in 0..p {
        let column = source_x.column(c);
        let lo = column.min();
        let hi = column.max();
        let m = target.means[c];
        if !(m > lo && m < hi) && !(lo == hi && m == lo) {
            return Err(Error::TiltInfeasible(format!(
                "target mean {m} of covariate {} outside source range [{lo}, {hi}]",
                c + 1
            )));
        }
    }
    let d = with_intercept(source_x);
    let tau = target_psi(target);
    let mut gamma = DVector::zeros(p + 1);
    let (mut h, mut w) = residual(&d, &gamma, &tau).ok_or(Error::NonFinite("tilt weights"))?;
    for _ in 0..max_iter {
        if h.amax() < tol {
            break;
        }
        let mut dw = d.clone();
        for (i, mut row) in dw.row_iter_mut().enumerate() {
            row *= w[i];
        }
        let jac = d.tr_mul(&dw) / n as f64;
        let step = spd_solve(&jac, &(-&h)).ok_or(Error::Singular("tilt jacobian"))?;
        let norm = h.norm();
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let cand = &gamma + &step * t;
            if let Some((hc, wc)) = residual(&d, &cand, &tau) {
                if hc.norm() <= norm {
                    accepted = Some((cand, hc, wc));
                    break;
                }
            }
            t *= 0.5;
        }
        match accepted {
            Some((g, hc, wc)) => {
                gamma = g;
                h = hc;
                w = wc;
            }
            None => break,
        }
    }
    let residual_norm = h.amax();
    if residual_norm < tol {
        Ok(TiltFit {
            gamma,
            converged: true,
            residual_norm,
        })
    } else {
        Err(Error::TiltNotConverged { residual_norm })
    }
}

/// `ω_i = exp(γᵀψ(x_i))`.
pub fn density_ratio_weights(fit: &TiltFit, x: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_fn(x.nrows(), |r, _| design_row(x, r).dot(&fit.gamma).exp())
}

/// Sup-norm of the tilt estimating equations at `fit.gamma`.
pub fn moment_residual(fit: &TiltFit, source_x: &DMatrix<f64>, target: &TargetMoments) -> f64 {
    let d = with_intercept(source_x);
    let w = density_ratio_weights(fit, source_x);
    (d.tr_mul(&w) / source_x.nrows() as f64 - target_psi(target)).amax()
}
