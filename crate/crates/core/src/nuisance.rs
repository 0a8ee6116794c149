//! Within-site propensity and outcome models.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::domain::{OutcomeKind, SiteDataset, TreatmentArm};
use crate::error::{Error, Result};
use crate::linalg::{expit, softplus, spd_solve, with_intercept};

pub const LOGISTIC_TOL: f64 = 1e-10;
pub const LOGISTIC_MAX_ITER: usize = 100;
pub const RIDGE_FALLBACK: f64 = 1e-4;
pub const DEFAULT_CLIP: f64 = 1e-3;
const MAX_HALVINGS: usize = 20;
const SEPARATION_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticFit {
    /// Intercept first.
    pub coefficients: DVector<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub ridge_used: f64,
}

impl LogisticFit {
    pub fn linear_predictor(&self, x: &DMatrix<f64>) -> DVector<f64> {
        linear_predictor(&self.coefficients, x)
    }

    /// Fitted probabilities `P(y = 1 | x)`.
    pub fn predict(&self, x: &DMatrix<f64>) -> DVector<f64> {
        self.linear_predictor(x).map(expit)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    /// Intercept first.
    pub coefficients: DVector<f64>,
    pub residual_variance: f64,
}

impl LinearFit {
    pub fn predict(&self, x: &DMatrix<f64>) -> DVector<f64> {
        linear_predictor(&self.coefficients, x)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum OutcomeModel {
    Linear(LinearFit),
    Logistic(LogisticFit),
}

impl OutcomeModel {
    pub fn coefficients(&self) -> &DVector<f64> {
        match self {
            OutcomeModel::Linear(f) => &f.coefficients,
            OutcomeModel::Logistic(f) => &f.coefficients,
        }
    }

    /// Mean-scale predictions.
    pub fn predict(&self, x: &DMatrix<f64>) -> DVector<f64> {
        match self {
            OutcomeModel::Linear(f) => f.predict(x),
            OutcomeModel::Logistic(f) => f.predict(x),
        }
    }

    /// Derivative of the mean with respect to the linear predictor, per row.
    pub fn mean_derivative(&self, x: &DMatrix<f64>) -> DVector<f64> {
        match self {
            OutcomeModel::Linear(_) => DVector::from_element(x.nrows(), 1.0),
            OutcomeModel::Logistic(f) => f.predict(x).map(|p| p * (1.0 - p)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeFits {
    pub fit_treated: OutcomeModel,
    pub fit_control: OutcomeModel,
}

impl OutcomeFits {
    pub fn arm(&self, arm: TreatmentArm) -> &OutcomeModel {
        match arm {
            TreatmentArm::Treated => &self.fit_treated,
            TreatmentArm::Control => &self.fit_control,
        }
    }
}

fn linear_predictor(coef: &DVector<f64>, x: &DMatrix<f64>) -> DVector<f64> {
    assert_eq!(coef.len(), x.ncols() + 1, "coefficient length must be p + 1");
    let mut eta = DVector::from_element(x.nrows(), coef[0]);
    if x.ncols() > 0 {
        eta += x * coef.rows(1, x.ncols());
    }
    eta
}

struct Irls {
    beta: DVector<f64>,
    converged: bool,
    iterations: usize,
}

/// Mean penalized log-likelihood.
fn penalized_loglik(d: &DMatrix<f64>, y: &[f64], beta: &DVector<f64>, ridge: f64) -> f64 {
    let eta = d * beta;
    let n = y.len() as f64;
    let ll: f64 = eta.iter().zip(y).map(|(&e, &yi)| yi * e - softplus(e)).sum::<f64>() / n;
    let pen: f64 = beta.iter().skip(1).map(|b| b * b).sum();
    ll - 0.5 * ridge * pen
}

fn irls(d: &DMatrix<f64>, y: &[f64], ridge: f64, max_iter: usize, tol: f64) -> Result<Irls> {
    let (n, q) = d.shape();
    let nf = n as f64;
    let mut beta = DVector::zeros(q);
    let mut ll = penalized_loglik(d, y, &beta, ridge);
    let mut iterations = 0;
    loop {
        let prob = (d * &beta).map(expit);
        let resid = DVector::from_fn(n, |i, _| y[i] - prob[i]);
        let mut score = d.tr_mul(&resid) / nf;
        for j in 1..q {
            score[j] -= ridge * beta[j];
        }
        if score.amax() < tol {
            return Ok(Irls {
                beta,
                converged: true,
                iterations,
            });
        }
        if iterations >= max_iter {
            break;
        }
        let w = prob.map(|p| p * (1.0 - p));
        let mut dw = d.clone();
        for (i, mut row) in dw.row_iter_mut().enumerate() {
            row *= w[i];
        }
        let mut hess = d.tr_mul(&dw) / nf;
        for j in 1..q {
            hess[(j, j)] += ridge;
        }
        let step = spd_solve(&hess, &score).ok_or(Error::Singular("logistic information"))?;
        iterations += 1;
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..=MAX_HALVINGS {
            let cand = &beta + &step * t;
            let ll_c = penalized_loglik(d, y, &cand, ridge);
            if ll_c.is_finite() && ll_c >= ll {
                beta = cand;
                ll = ll_c;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok(Irls {
        beta,
        converged: false,
        iterations,
    })
}

/// Logistic regression of `y` on `[1 | X]` by Newton/IRLS with step-halving.
///
/// Convergence is judged on the observation-averaged score. When some fitted
/// probability ends within 1e-8 of 0 or 1 (quasi-separation), the model is
/// refit with a small ridge penalty on the slopes and `ridge_used` records it.
pub fn fit_logistic(x: &DMatrix<f64>, y: &[f64], max_iter: usize, tol: f64) -> Result<LogisticFit> {
    if y.len() != x.nrows() {
        return Err(Error::Dimension(format!("{} rows but {} responses", x.nrows(), y.len())));
    }
    if y.is_empty() || y.iter().all(|&v| v == y[0]) {
        return Err(Error::DegenerateResponse);
    }
    let d = with_intercept(x);
    let first = irls(&d, y, 0.0, max_iter, tol);
    // A vanishing score with saturated fitted probabilities is the signature
    // of separation (the likelihood has no finite maximiser), not convergence.
    let needs_ridge = match &first {
        Ok(fit) => (&d * &fit.beta)
            .iter()
            .map(|&e| expit(e))
            .any(|p| !(SEPARATION_EPS..=1.0 - SEPARATION_EPS).contains(&p)),
        Err(_) => true,
    };
    if !needs_ridge {
        let fit = first?;
        return Ok(LogisticFit {
            coefficients: fit.beta,
            converged: fit.converged,
            iterations: fit.iterations,
            ridge_used: 0.0,
        });
    }
    let fit = irls(&d, y, RIDGE_FALLBACK, max_iter, tol)?;
    Ok(LogisticFit {
        coefficients: fit.beta,
        converged: fit.converged,
        iterations: fit.iterations,
        ridge_used: RIDGE_FALLBACK,
    })
}

/// Ordinary least squares of `y` on `[1 | X]` through the normal equations.
pub fn fit_linear(x: &DMatrix<f64>, y: &[f64]) -> Result<LinearFit> {
    if y.len() != x.nrows() {
        return Err(Error::Dimension(format!("{} rows but {} responses", x.nrows(), y.len())));
    }
    let d = with_intercept(x);
    let yv = DVector::from_column_slice(y);
    let xtx = d.tr_mul(&d);
    let xty = d.tr_mul(&yv);
    let coefficients = spd_solve(&xtx, &xty).ok_or(Error::SingularDesign)?;
    let resid = &yv - &d * &coefficients;
    let n = y.len();
    let q = d.ncols();
    let residual_variance = if n > q { resid.norm_squared() / (n - q) as f64 } else { 0.0 };
    Ok(LinearFit {
        coefficients,
        residual_variance,
    })
}

pub fn fit_propensity(ds: &SiteDataset) -> Result<LogisticFit> {
    fit_logistic(&ds.covariates, &ds.treatment_f64(), LOGISTIC_MAX_ITER, LOGISTIC_TOL)
}

/// `P(A = arm | x)`, clipped into `[clip, 1 - clip]`.
pub fn predict_propensity(fit: &LogisticFit, x: &DMatrix<f64>, arm: TreatmentArm, clip: f64) -> DVector<f64> {
    fit.predict(x).map(|p1| {
        let p = match arm {
            TreatmentArm::Treated => p1,
            TreatmentArm::Control => 1.0 - p1,
        };
        p.clamp(clip, 1.0 - clip)
    })
}

/// Per-arm outcome regressions: linear for continuous outcomes, logistic for
/// binary ones.
pub fn fit_outcomes(ds: &SiteDataset) -> Result<OutcomeFits> {
    let fit_arm = |arm: TreatmentArm| -> Result<OutcomeModel> {
        let rows = ds.arm_rows(arm);
        if rows.len() < ds.p() + 2 {
            return Err(Error::InsufficientArm {
                arm,
                n_arm: rows.len(),
            });
        }
        let sub = ds.subset(&rows);
        match ds.outcome_kind {
            OutcomeKind::Continuous => fit_linear(&sub.covariates, &sub.outcome).map(OutcomeModel::Linear),
            OutcomeKind::Binary => fit_logistic(&sub.covariates, &sub.outcome, LOGISTIC_MAX_ITER, LOGISTIC_TOL)
                .map(OutcomeModel::Logistic),
        }
    };
    Ok(OutcomeFits {
        fit_treated: fit_arm(TreatmentArm::Treated)?,
        fit_control: fit_arm(TreatmentArm::Control)?,
    })
}
