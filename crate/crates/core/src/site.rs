//! Everything one site computes from its own patients.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::domain::{covariate_means, validate_dataset, PerArm, SeedSpec, SiteDataset, TreatmentArm};
use crate::ensemble::{SourceTriplet, TargetGram};
use crate::error::{Error, Result};
use crate::estimators::{
    compute_target_if, source_influence_parts, source_terms, target_aipw, target_outcome_if, target_outcome_mean,
    AnchorKind, IfMode, SourceParts, SourceTerms,
};
use crate::linalg::prepend_one;
use crate::nuisance::{fit_outcomes, fit_propensity, LogisticFit, OutcomeFits, DEFAULT_CLIP};
use crate::tilt::{solve_tilt, TargetMoments, TiltFit, TILT_MAX_ITER, TILT_TOL};

pub const MAX_SPLIT_DRAWS: usize = 20;

/// Estimation settings every site must share.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SiteConfig {
    pub clip: f64,
    pub if_mode: IfMode,
    pub anchor: AnchorKind,
}

impl SiteConfig {
    /// Clip 1e-3, source-model anchor and the outcome kind's default IF mode.
    pub fn for_kind(kind: crate::domain::OutcomeKind) -> Self {
        SiteConfig {
            clip: DEFAULT_CLIP,
            if_mode: IfMode::default_for(kind),
            anchor: AnchorKind::SourceModel,
        }
    }
}

fn check_valid(ds: &SiteDataset) -> Result<()> {
    let v = validate_dataset(ds);
    if v.is_empty() {
        return Ok(());
    }
    Err(Error::InvalidDataset {
        site: ds.site_id.clone(),
        problems: v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetArm {
    pub mu_hat: f64,
    pub or_mean: f64,
    /// Target AIPW influence values (site-local).
    pub phi: Vec<f64>,
    /// Influence values of the target outcome-model mean (site-local); zero
    /// under the source-model anchor, where it is not used.
    pub t: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetAnalysis {
    pub site_id: String,
    pub n: usize,
    pub means: DVector<f64>,
    /// `xᵢ − x̄_T`, one row per patient.
    pub centered_x: DMatrix<f64>,
    pub ps: LogisticFit,
    pub or: OutcomeFits,
    pub arms: PerArm<TargetArm>,
}

impl TargetAnalysis {
    pub fn moments(&self) -> TargetMoments {
        TargetMoments {
            means: self.means.clone(),
            n_target: self.n,
        }
    }

    pub fn gram(&self, arm: TreatmentArm) -> Result<TargetGram> {
        let a = self.arms.get(arm);
        TargetGram::from_parts(&a.phi, &a.t, &self.centered_x)
    }
}

pub fn analyze_target(ds: &SiteDataset, cfg: &SiteConfig) -> Result<TargetAnalysis> {
    let run = || -> Result<TargetAnalysis> {
        check_valid(ds)?;
        let ps = fit_propensity(ds)?;
        let or = fit_outcomes(ds)?;
        let means = covariate_means(ds)?;
        let centered_x = DMatrix::from_fn(ds.n(), ds.p(), |r, c| ds.covariates[(r, c)] - means[c]);
        let arms = PerArm::try_build(|arm| -> Result<TargetArm> {
            let est = target_aipw(ds, &ps, &or, arm, cfg.clip)?;
            let phi = compute_target_if(ds, &ps, &or, arm, cfg.clip, cfg.if_mode)?;
            let t = match cfg.anchor {
                AnchorKind::TargetModel => target_outcome_if(ds, &or, arm, cfg.if_mode)?,
                AnchorKind::SourceModel => vec![0.0; ds.n()],
            };
            Ok(TargetArm {
                mu_hat: est.value,
                or_mean: target_outcome_mean(ds, &or, arm),
                phi,
                t,
            })
        })?;
        Ok(TargetAnalysis {
            site_id: ds.site_id.clone(),
            n: ds.n(),
            means,
            centered_x,
            ps,
            or,
            arms,
        })
    };
    run().map_err(|e| e.at_site(&ds.site_id))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceArm {
    pub terms: SourceTerms,
    pub parts: SourceParts,
}

impl SourceArm {
    pub fn triplet(&self, n: usize) -> SourceTriplet {
        SourceTriplet {
            n,
            if_sum: self.parts.source_part.iter().sum(),
            if_sumsq: self.parts.source_part.iter().map(|v| v * v).sum(),
            gamma_gradient: self.parts.gamma_gradient.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceAnalysis {
    pub site_id: String,
    pub n: usize,
    pub tilt: TiltFit,
    pub ps: LogisticFit,
    pub or: OutcomeFits,
    pub arms: PerArm<SourceArm>,
}

impl SourceAnalysis {
    /// `μ̂_k` for `arm`.
    pub fn value(&self, arm: TreatmentArm, anchor: AnchorKind, target_or_mean: f64) -> f64 {
        self.arms.get(arm).terms.value(anchor, target_or_mean)
    }
}

/// Fits a source site against the target's covariate means. Errors here
/// mean the site is dropped from the ensemble.
pub fn analyze_source(ds: &SiteDataset, target: &TargetMoments, cfg: &SiteConfig) -> Result<SourceAnalysis> {
    for arm in TreatmentArm::BOTH {
        if ds.arm_count(arm) == 0 {
            return Err(Error::EmptyArm { arm, context: "source" });
        }
    }
    check_valid(ds)?;
    let tilt = solve_tilt(&ds.covariates, target, TILT_TOL, TILT_MAX_ITER)?;
    let ps = fit_propensity(ds)?;
    let or = fit_outcomes(ds)?;
    let tau = prepend_one(&target.means);
    let arms = PerArm::try_build(|arm| -> Result<SourceArm> {
        Ok(SourceArm {
            terms: source_terms(ds, &tilt, &ps, &or, arm, cfg.clip)?,
            parts: source_influence_parts(cfg.anchor, ds, &tilt, &ps, &or, arm, cfg.clip, cfg.if_mode, &tau)?,
        })
    })?;
    Ok(SourceAnalysis {
        site_id: ds.site_id.clone(),
        n: ds.n(),
        tilt,
        ps,
        or,
        arms,
    })
}

/// Random half/half split of a site for λ selection; redrawn until both
/// halves hold at least `p + 2` patients per arm.
pub fn split_halves(ds: &SiteDataset, split_index: usize, seed: u64) -> Result<(SiteDataset, SiteDataset)> {
    let need = ds.p() + 2;
    let n = ds.n();
    for attempt in 0..MAX_SPLIT_DRAWS {
        let spec = SeedSpec::new(seed, split_index as u64, format!("split:{}:{attempt}", ds.site_id));
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut spec.rng());
        let (a, b) = idx.split_at(n / 2);
        let (mut train, mut valid) = (a.to_vec(), b.to_vec());
        train.sort_unstable();
        valid.sort_unstable();
        let ok = |rows: &[usize]| {
            TreatmentArm::BOTH
                .iter()
                .all(|&arm| rows.iter().filter(|&&i| arm.matches(ds.treatment[i])).count() >= need)
        };
        if ok(&train) && ok(&valid) {
            return Ok((ds.subset(&train), ds.subset(&valid)));
        }
    }
    Err(Error::SplitInfeasible {
        site: ds.site_id.clone(),
        attempts: MAX_SPLIT_DRAWS,
    })
}

/// Target-only AIPW value on a validation half, with nuisances refit there.
pub fn target_only_value(ds: &SiteDataset, cfg: &SiteConfig) -> Result<PerArm<f64>> {
    let ps = fit_propensity(ds)?;
    let or = fit_outcomes(ds)?;
    PerArm::try_build(|arm| Ok(target_aipw(ds, &ps, &or, arm, cfg.clip)?.value))
}
