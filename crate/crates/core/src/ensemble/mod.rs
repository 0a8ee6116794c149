//! Adaptive site weights, λ selection, global combination and variance.

mod solver;
mod summaries;

pub use solver::{objective, project_capped_simplex, solve_weights, Penalty, WeightSolution};
pub use summaries::{build_summaries_compressed, build_summaries_raw, QSummaries, SourceTriplet, TargetGram};

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::TreatmentArm;
use crate::error::{Error, Result};
use crate::estimators::AnchorKind;

pub const Z95: f64 = 1.959_963_984_540_054;

/// The grid searched for λ by default.
pub const DEFAULT_LAMBDA_GRID: [f64; 11] = [0.0, 1e-4, 1e-3, 1e-2, 0.1, 0.25, 0.5, 1.0, 2.0, 5.0, 10.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalEstimate {
    pub arm: TreatmentArm,
    pub value: f64,
    pub se: f64,
    pub ci95: (f64, f64),
    pub weights: WeightSolution,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TateEstimate {
    pub value: f64,
    pub se: f64,
    pub ci95: (f64, f64),
}

impl TateEstimate {
    pub fn new(value: f64, se: f64) -> Self {
        TateEstimate {
            value,
            se,
            ci95: ci95(value, se),
        }
    }
}

pub fn ci95(value: f64, se: f64) -> (f64, f64) {
    (value - Z95 * se, value + Z95 * se)
}

/// `μ̂_T + Σ η_k (μ̂_k − μ̂_T)`.
pub fn combine(target_value: f64, source_values: &[f64], weights: &WeightSolution) -> f64 {
    target_value
        + source_values
            .iter()
            .zip(weights.source_weights())
            .map(|(mk, eta)| eta * (mk - target_value))
            .sum::<f64>()
}

/// Standard error of the combination from all-N influence vectors:
/// `sqrt(Σᵢ (Σ_k η_k ξ_{i,k})² / N²)`.
pub fn global_variance_raw(weights: &WeightSolution, target_if: &[f64], source_ifs: &[Vec<f64>]) -> Result<f64> {
    if source_ifs.len() + 1 != weights.eta.len() {
        return Err(Error::Dimension("weights and influence vectors".into()));
    }
    let n = target_if.len();
    let eta = &weights.eta;
    let mut total = 0.0;
    for i in 0..n {
        let mut v = eta[0] * target_if[i];
        for (k, s) in source_ifs.iter().enumerate() {
            v += eta[k + 1] * s[i];
        }
        total += v * v;
    }
    Ok(total.sqrt() / n as f64)
}

/// Same standard error from the target Gram matrix and source triplets.
pub fn global_variance_compressed(
    weights: &WeightSolution,
    target: &TargetGram,
    sources: &[SourceTriplet],
    anchor: AnchorKind,
) -> Result<f64> {
    if sources.len() + 1 != weights.eta.len() {
        return Err(Error::Dimension("weights and triplets".into()));
    }
    let q = target.gram.nrows();
    let theta = f64::from(u8::from(anchor == AnchorKind::TargetModel));
    let eta = &weights.eta;
    let mut w = DVector::zeros(q);
    w[0] = eta[0];
    for (k, s) in sources.iter().enumerate() {
        w[1] += theta * eta[k + 1];
        for j in 2..q {
            w[j] += eta[k + 1] * s.gamma_gradient[j - 1];
        }
    }
    let nt = target.n as f64;
    let mut var = w.dot(&(&target.gram * &w)) / (nt * nt);
    for (k, s) in sources.iter().enumerate() {
        let nk = s.n as f64;
        var += eta[k + 1] * eta[k + 1] * s.if_sumsq / (nk * nk);
    }
    Ok(var.max(0.0).sqrt())
}

/// `Δ̂ = μ̂^(1) − μ̂^(0)`, treating the arm estimates as independent.
pub fn global_tate(treated: &GlobalEstimate, control: &GlobalEstimate) -> TateEstimate {
    TateEstimate::new(treated.value - control.value, (treated.se.powi(2) + control.se.powi(2)).sqrt())
}

/// One half/half split seen from the processing site, for one arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitArm {
    /// Summaries of the training halves.
    pub summaries: QSummaries,
    pub target_value: f64,
    pub source_values: Vec<f64>,
    /// Target-only estimate on the target's validation half.
    pub validation_value: f64,
}

/// Mean over splits of `(combined training estimate − validation target-only
/// estimate)²`, for every λ in `grid`.
pub fn lambda_criteria(splits: &[SplitArm], grid: &[f64], penalty: Penalty) -> Result<Vec<f64>> {
    if splits.is_empty() {
        return Err(Error::Config("lambda selection needs at least one split".into()));
    }
    grid.par_iter()
        .map(|&lambda| {
            let mut acc = 0.0;
            for s in splits {
                let w = solve_weights(&s.summaries, lambda, penalty)?;
                let est = combine(s.target_value, &s.source_values, &w);
                acc += (est - s.validation_value).powi(2);
            }
            Ok(acc / splits.len() as f64)
        })
        .collect()
}

/// The first grid value whose criterion is within a relative 1e-9 of the
/// minimum, so near-ties resolve the same way for numerically equivalent
/// inputs.
pub fn pick_lambda(grid: &[f64], criteria: &[f64]) -> f64 {
    let min = criteria.iter().copied().fold(f64::INFINITY, f64::min);
    let cut = min + 1e-9 * min.abs();
    grid.iter()
        .zip(criteria)
        .find(|(_, &c)| c <= cut)
        .map(|(&l, _)| l)
        .unwrap_or(grid[0])
}

pub fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Config("empty lambda grid".into()));
    }
    if let Some(bad) = grid.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
        return Err(Error::Config(format!("lambda grid value {bad} is not a finite non-negative number")));
    }
    Ok(())
}
