//! Settings and results shared by the pooled and federated pipelines.

use serde::{Deserialize, Serialize};

use crate::domain::{OutcomeKind, PerArm, TreatmentArm};
use crate::ensemble::{
    ci95, combine, lambda_criteria, pick_lambda, solve_weights, validate_grid, GlobalEstimate, Penalty, QSummaries,
    SplitArm, TateEstimate, DEFAULT_LAMBDA_GRID,
};
use crate::error::{Error, Result};
use crate::site::SiteConfig;

pub const DEFAULT_SPLITS: usize = 10;
pub const DEFAULT_SPLIT_SEED: u64 = 20_240_601;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub site: SiteConfig,
    pub lambda_grid: Vec<f64>,
    pub penalty: Penalty,
    pub n_splits: usize,
    pub split_seed: u64,
}

impl PipelineConfig {
    pub fn for_kind(kind: OutcomeKind, penalty: Penalty) -> Self {
        PipelineConfig {
            site: SiteConfig::for_kind(kind),
            lambda_grid: DEFAULT_LAMBDA_GRID.to_vec(),
            penalty,
            n_splits: DEFAULT_SPLITS,
            split_seed: DEFAULT_SPLIT_SEED,
        }
    }

    pub fn validate(&self) -> Result<()> {
        validate_grid(&self.lambda_grid)?;
        if !(self.site.clip > 0.0 && self.site.clip < 0.5) {
            return Err(Error::Config(format!("clip must lie in (0, 0.5), got {}", self.site.clip)));
        }
        Ok(())
    }

    /// λ is cross-validated only when there is a choice to make.
    pub fn selects_lambda(&self) -> bool {
        self.lambda_grid.len() > 1 && self.n_splits > 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedSite {
    pub site_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmFit {
    pub estimate: GlobalEstimate,
    pub target_value: f64,
    /// `μ̂_k`, aligned with [`EnsembleFit::source_sites`].
    pub source_values: Vec<f64>,
    /// Split criterion per grid value; empty when λ was not selected.
    pub criteria: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleFit {
    pub target_site: String,
    /// Sources that entered the ensemble, sorted by id.
    pub source_sites: Vec<String>,
    pub dropped: Vec<DroppedSite>,
    pub arms: PerArm<ArmFit>,
    pub tate: TateEstimate,
}

impl EnsembleFit {
    /// `(site, η)` for the target, every included source and every dropped
    /// source (weight 0), in that order.
    pub fn weights_by_site(&self, arm: TreatmentArm) -> Vec<(String, f64)> {
        let eta = &self.arms.get(arm).estimate.weights.eta;
        let mut out = vec![(self.target_site.clone(), eta[0])];
        out.extend(self.source_sites.iter().zip(eta.iter().skip(1)).map(|(s, &e)| (s.clone(), e)));
        out.extend(self.dropped.iter().map(|d| (d.site_id.clone(), 0.0)));
        out
    }
}

/// λ choice, weights and point estimate for one arm; `se_of` maps the
/// chosen weights to a standard error.
pub(crate) fn fit_arm(
    arm: TreatmentArm,
    cfg: &PipelineConfig,
    full: &QSummaries,
    target_value: f64,
    source_values: Vec<f64>,
    splits: &[SplitArm],
    se_of: impl FnOnce(&crate::ensemble::WeightSolution) -> Result<f64>,
) -> Result<ArmFit> {
    let (lambda, criteria) = if cfg.selects_lambda() && !splits.is_empty() {
        let c = lambda_criteria(splits, &cfg.lambda_grid, cfg.penalty)?;
        (pick_lambda(&cfg.lambda_grid, &c), c)
    } else {
        (cfg.lambda_grid[0], Vec::new())
    };
    let weights = solve_weights(full, lambda, cfg.penalty)?;
    let value = combine(target_value, &source_values, &weights);
    let se = se_of(&weights)?;
    if !(value.is_finite() && se.is_finite()) {
        return Err(Error::NonFinite("global estimate"));
    }
    Ok(ArmFit {
        estimate: GlobalEstimate {
            arm,
            value,
            se,
            ci95: ci95(value, se),
            weights,
        },
        target_value,
        source_values,
        criteria,
    })
}

pub(crate) fn check_unique_ids<'a>(ids: impl IntoIterator<Item = &'a str>) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(Error::Config(format!("duplicate site id {id:?}")));
        }
    }
    Ok(())
}
