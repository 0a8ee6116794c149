//! Site-level mean-potential-outcome estimators and their influence functions.
//!
//! Influence values returned here are on the site-local scale: for an
//! estimator built from the patients of one site of size n,
//! `μ̂ ≈ μ + n⁻¹ Σᵢ φᵢ`. Multiply by `N / n` to move to the all-N scale used
//! by the ensemble (`μ̂ ≈ μ + N⁻¹ Σᵢ ξᵢ` over all N patients).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::domain::{covariate_means, OutcomeKind, SiteDataset, TreatmentArm};
use crate::error::{Error, Result};
use crate::linalg::{design_row, prepend_one, spd_solve, with_intercept};
use crate::nuisance::{predict_propensity, LogisticFit, OutcomeFits, OutcomeModel};
use crate::tilt::{density_ratio_weights, TiltFit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IfMode {
    /// Both nuisance models treated as known.
    Simple,
    /// Adds first-order corrections for the estimated propensity, outcome
    /// and tilt parameters.
    General,
}

impl IfMode {
    pub fn default_for(kind: OutcomeKind) -> IfMode {
        match kind {
            OutcomeKind::Continuous => IfMode::General,
            OutcomeKind::Binary => IfMode::Simple,
        }
    }
}

/// Which outcome model supplies the conditional-mean term of a source
/// estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorKind {
    /// `n_k⁻¹ Σ_k ω m̂_{a,k}`: the source model averaged over the target
    /// population through the tilt. For linear models this equals
    /// `β̂_{a,k}ᵀ(1, X̄_T)`.
    SourceModel,
    /// `n_T⁻¹ Σ_T m̂_{a,T}`: the target's own outcome model.
    TargetModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmEstimate {
    pub arm: TreatmentArm,
    pub value: f64,
    /// Site-local influence values, one per patient of the site.
    pub per_patient_if: Vec<f64>,
    pub site_id: String,
    pub n_contributing: usize,
}

/// Per-patient quantities shared by every estimator of one arm at one site.
struct ArmTerms {
    x: DMatrix<f64>,
    /// Indicator of `A = arm`.
    ind: Vec<f64>,
    y: Vec<f64>,
    /// Outcome model predictions.
    m: DVector<f64>,
    /// Clipped arm propensity.
    pi: DVector<f64>,
    /// `∂(1/π_a)/∂α` scale factor per row (zero where clipped).
    dinv: Vec<f64>,
}

fn arm_terms(ds: &SiteDataset, ps: &LogisticFit, or: &OutcomeFits, arm: TreatmentArm, clip: f64) -> ArmTerms {
    let x = ds.covariates.clone();
    let pi = predict_propensity(ps, &x, arm, clip);
    let p1 = ps.predict(&x);
    let dinv = (0..ds.n())
        .map(|i| {
            let pa = match arm {
                TreatmentArm::Treated => p1[i],
                TreatmentArm::Control => 1.0 - p1[i],
            };
            if pa < clip || pa > 1.0 - clip {
                0.0
            } else {
                match arm {
                    TreatmentArm::Treated => -(1.0 - p1[i]) / p1[i],
                    TreatmentArm::Control => p1[i] / (1.0 - p1[i]),
                }
            }
        })
        .collect();
    ArmTerms {
        m: or.arm(arm).predict(&x),
        ind: ds.treatment.iter().map(|&a| f64::from(u8::from(arm.matches(a)))).collect(),
        y: ds.outcome.clone(),
        pi,
        dinv,
        x,
    }
}

fn require_arm(ds: &SiteDataset, arm: TreatmentArm, context: &'static str) -> Result<()> {
    if ds.arm_count(arm) == 0 {
        return Err(Error::EmptyArm { arm, context });
    }
    Ok(())
}

fn require_general_ok(ds: &SiteDataset, mode: IfMode) -> Result<()> {
    if mode == IfMode::General && ds.outcome_kind == OutcomeKind::Binary {
        return Err(Error::GeneralModeBinary);
    }
    Ok(())
}

/// Rows `φ_α(i)ᵀ` of the propensity MLE influence:
/// `(n⁻¹ Σ π(1-π) x̃x̃ᵀ)⁻¹ x̃ᵢ (Aᵢ − πᵢ)`.
fn propensity_if(ds: &SiteDataset, ps: &LogisticFit) -> Result<DMatrix<f64>> {
    let d = with_intercept(&ds.covariates);
    let p1 = ps.predict(&ds.covariates);
    let n = ds.n();
    let mut info = DMatrix::zeros(d.ncols(), d.ncols());
    for i in 0..n {
        let r = d.row(i);
        info += r.transpose() * r * (p1[i] * (1.0 - p1[i]));
    }
    info /= n as f64;
    for j in 1..d.ncols() {
        info[(j, j)] += ps.ridge_used;
    }
    let inv = crate::linalg::spd_inverse(&info).ok_or(Error::Singular("propensity information"))?;
    let mut out = DMatrix::zeros(n, d.ncols());
    for i in 0..n {
        let v = &inv * d.row(i).transpose() * (f64::from(ds.treatment[i]) - p1[i]);
        out.set_row(i, &v.transpose());
    }
    Ok(out)
}

/// Rows `φ_β(i)ᵀ` of the arm-specific least-squares influence, on the scale of
/// all n site patients: `(n⁻¹ Σ Iₐ x̃x̃ᵀ)⁻¹ Iₐ x̃ᵢ (Yᵢ − m̂ᵢ)`.
fn outcome_if(t: &ArmTerms) -> Result<DMatrix<f64>> {
    let d = with_intercept(&t.x);
    let n = d.nrows();
    let mut gram = DMatrix::zeros(d.ncols(), d.ncols());
    for i in 0..n {
        if t.ind[i] > 0.0 {
            let r = d.row(i);
            gram += r.transpose() * r;
        }
    }
    gram /= n as f64;
    let inv = crate::linalg::spd_inverse(&gram).ok_or(Error::SingularDesign)?;
    let mut out = DMatrix::zeros(n, d.ncols());
    for i in 0..n {
        if t.ind[i] > 0.0 {
            let v = &inv * d.row(i).transpose() * (t.y[i] - t.m[i]);
            out.set_row(i, &v.transpose());
        }
    }
    Ok(out)
}

fn ensure_linear(model: &OutcomeModel) -> Result<()> {
    match model {
        OutcomeModel::Linear(_) => Ok(()),
        OutcomeModel::Logistic(_) => Err(Error::GeneralModeBinary),
    }
}

/// Target-site AIPW estimate of `μ^(a)`.
pub fn target_aipw(ds: &SiteDataset, ps: &LogisticFit, or: &OutcomeFits, arm: TreatmentArm, clip: f64) -> Result<ArmEstimate> {
    require_arm(ds, arm, "target")?;
    let per_patient_if = compute_target_if(ds, ps, or, arm, clip, IfMode::default_for(ds.outcome_kind))?;
    Ok(ArmEstimate {
        arm,
        value: aipw_value(&arm_terms(ds, ps, or, arm, clip)),
        per_patient_if,
        site_id: ds.site_id.clone(),
        n_contributing: ds.n(),
    })
}

fn aipw_terms(t: &ArmTerms) -> Vec<f64> {
    (0..t.y.len())
        .map(|i| t.m[i] + t.ind[i] / t.pi[i] * (t.y[i] - t.m[i]))
        .collect()
}

fn aipw_value(t: &ArmTerms) -> f64 {
    let v = aipw_terms(t);
    v.iter().sum::<f64>() / v.len() as f64
}

/// Influence values of the target AIPW estimator (site-local scale).
pub fn compute_target_if(
    ds: &SiteDataset,
    ps: &LogisticFit,
    or: &OutcomeFits,
    arm: TreatmentArm,
    clip: f64,
    mode: IfMode,
) -> Result<Vec<f64>> {
    require_arm(ds, arm, "target")?;
    require_general_ok(ds, mode)?;
    let t = arm_terms(ds, ps, or, arm, clip);
    let terms = aipw_terms(&t);
    let n = terms.len();
    let mu = terms.iter().sum::<f64>() / n as f64;
    let mut phi: Vec<f64> = terms.iter().map(|v| v - mu).collect();
    if mode == IfMode::General {
        ensure_linear(or.arm(arm))?;
        let d = with_intercept(&t.x);
        let q = d.ncols();
        let mut g_alpha = DVector::zeros(q);
        let mut g_beta = DVector::zeros(q);
        for i in 0..n {
            let r = d.row(i).transpose();
            g_alpha += &r * (t.ind[i] * (t.y[i] - t.m[i]) * t.dinv[i]);
            g_beta += &r * (1.0 - t.ind[i] / t.pi[i]);
        }
        g_alpha /= n as f64;
        g_beta /= n as f64;
        let fa = propensity_if(ds, ps)?;
        let fb = outcome_if(&t)?;
        let corr = &fa * &g_alpha + &fb * &g_beta;
        for (v, c) in phi.iter_mut().zip(corr.iter()) {
            *v += c;
        }
    }
    Ok(phi)
}

/// `n_T⁻¹ Σ_T m̂_{a,T}(xᵢ)`.
pub fn target_outcome_mean(ds_t: &SiteDataset, or_t: &OutcomeFits, arm: TreatmentArm) -> f64 {
    or_t.arm(arm).predict(&ds_t.covariates).mean()
}

/// Influence values of `n_T⁻¹ Σ_T m̂_{a,T}(xᵢ)` over target patients
/// (site-local scale).
pub fn target_outcome_if(ds_t: &SiteDataset, or_t: &OutcomeFits, arm: TreatmentArm, mode: IfMode) -> Result<Vec<f64>> {
    require_general_ok(ds_t, mode)?;
    let model = or_t.arm(arm);
    let m = model.predict(&ds_t.covariates);
    let mean = m.mean();
    let mut out: Vec<f64> = m.iter().map(|v| v - mean).collect();
    if mode == IfMode::General {
        ensure_linear(model)?;
        let ind: Vec<f64> = ds_t.treatment.iter().map(|&a| f64::from(u8::from(arm.matches(a)))).collect();
        let t = ArmTerms {
            x: ds_t.covariates.clone(),
            pi: DVector::from_element(ds_t.n(), 1.0),
            dinv: vec![0.0; ds_t.n()],
            y: ds_t.outcome.clone(),
            m,
            ind,
        };
        let g_beta = prepend_one(&covariate_means(ds_t)?);
        let corr = outcome_if(&t)? * g_beta;
        for (v, c) in out.iter_mut().zip(corr.iter()) {
            *v += c;
        }
    }
    Ok(out)
}

/// Source-site pieces of `μ̂_k`: the source outcome model averaged over the
/// target population, and the weighted residual augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceTerms {
    pub conditional_mean: f64,
    pub augmentation: f64,
}

impl SourceTerms {
    pub fn value(&self, anchor: AnchorKind, target_or_mean: f64) -> f64 {
        match anchor {
            AnchorKind::SourceModel => self.conditional_mean + self.augmentation,
            AnchorKind::TargetModel => target_or_mean + self.augmentation,
        }
    }
}

pub fn source_terms(
    ds_k: &SiteDataset,
    tilt: &TiltFit,
    ps_k: &LogisticFit,
    or_k: &OutcomeFits,
    arm: TreatmentArm,
    clip: f64,
) -> Result<SourceTerms> {
    require_arm(ds_k, arm, "source")?;
    let t = arm_terms(ds_k, ps_k, or_k, arm, clip);
    let w = density_ratio_weights(tilt, &ds_k.covariates);
    let n = ds_k.n() as f64;
    let mut cm = 0.0;
    let mut aug = 0.0;
    for i in 0..ds_k.n() {
        cm += w[i] * t.m[i];
        aug += w[i] * t.ind[i] / t.pi[i] * (t.y[i] - t.m[i]);
    }
    Ok(SourceTerms {
        conditional_mean: cm / n,
        augmentation: aug / n,
    })
}

/// Source-augmented estimate of the target `μ^(a)`.
///
/// `per_patient_if` holds the simple-mode source-patient influence values;
/// [`compute_source_if`] gives the general form and the target-patient part.
pub fn source_augmented(
    anchor: AnchorKind,
    target_or_mean: f64,
    ds_k: &SiteDataset,
    tilt: &TiltFit,
    ps_k: &LogisticFit,
    or_k: &OutcomeFits,
    arm: TreatmentArm,
    clip: f64,
) -> Result<ArmEstimate> {
    let st = source_terms(ds_k, tilt, ps_k, or_k, arm, clip)?;
    let (values, _) = source_values(anchor, ds_k, tilt, ps_k, or_k, arm, clip);
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    Ok(ArmEstimate {
        arm,
        value: st.value(anchor, target_or_mean),
        per_patient_if: values.iter().map(|v| v - mean).collect(),
        site_id: ds_k.site_id.clone(),
        n_contributing: ds_k.n(),
    })
}

/// `vᵢ = ωᵢ[θ m̂ᵢ + Iₐ/π̂ᵢ (Yᵢ − m̂ᵢ)]` with θ = 1 under the source-model
/// anchor and 0 otherwise; the source-site summand of `μ̂_k`.
fn source_values(
    anchor: AnchorKind,
    ds_k: &SiteDataset,
    tilt: &TiltFit,
    ps_k: &LogisticFit,
    or_k: &OutcomeFits,
    arm: TreatmentArm,
    clip: f64,
) -> (Vec<f64>, (ArmTerms, DVector<f64>)) {
    let t = arm_terms(ds_k, ps_k, or_k, arm, clip);
    let w = density_ratio_weights(tilt, &ds_k.covariates);
    let theta = f64::from(u8::from(anchor == AnchorKind::SourceModel));
    let v = (0..ds_k.n())
        .map(|i| w[i] * (theta * t.m[i] + t.ind[i] / t.pi[i] * (t.y[i] - t.m[i])))
        .collect();
    (v, (t, w))
}

/// Source-patient influence values and the tilt gradient of a source
/// estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceParts {
    /// Site-local influence values for the source's own patients.
    pub source_part: Vec<f64>,
    /// `c = J⁻¹ ∂μ̂_k/∂γ`; target patient i contributes `cᵀ(x̃ᵢ − τ)`.
    /// Zero in simple mode.
    pub gamma_gradient: DVector<f64>,
}

/// Computes the source-patient side of the source estimator's influence
/// function given `tau = (1, target means)`.
#[allow(clippy::too_many_arguments)]
pub fn source_influence_parts(
    anchor: AnchorKind,
    ds_k: &SiteDataset,
    tilt: &TiltFit,
    ps_k: &LogisticFit,
    or_k: &OutcomeFits,
    arm: TreatmentArm,
    clip: f64,
    mode: IfMode,
    tau: &DVector<f64>,
) -> Result<SourceParts> {
    require_arm(ds_k, arm, "source")?;
    require_general_ok(ds_k, mode)?;
    let (values, (t, w)) = source_values(anchor, ds_k, tilt, ps_k, or_k, arm, clip);
    let n = values.len();
    let nf = n as f64;
    let mean = values.iter().sum::<f64>() / nf;
    let mut s: Vec<f64> = values.iter().map(|v| v - mean).collect();
    let q = ds_k.p() + 1;
    if mode == IfMode::Simple {
        return Ok(SourceParts {
            source_part: s,
            gamma_gradient: DVector::zeros(q),
        });
    }
    ensure_linear(or_k.arm(arm))?;
    let theta = f64::from(u8::from(anchor == AnchorKind::SourceModel));
    let d = with_intercept(&t.x);
    let mut g_alpha = DVector::zeros(q);
    let mut g_beta = DVector::zeros(q);
    let mut g_gamma = DVector::zeros(q);
    let mut jac = DMatrix::zeros(q, q);
    for i in 0..n {
        let r = d.row(i).transpose();
        g_alpha += &r * (w[i] * t.ind[i] * (t.y[i] - t.m[i]) * t.dinv[i]);
        g_beta += &r * (w[i] * (theta - t.ind[i] / t.pi[i]));
        g_gamma += &r * values[i];
        jac += &r * r.transpose() * w[i];
    }
    g_alpha /= nf;
    g_beta /= nf;
    g_gamma /= nf;
    jac /= nf;
    let c = spd_solve(&jac, &g_gamma).ok_or(Error::Singular("tilt jacobian"))?;
    let fa = propensity_if(ds_k, ps_k)?;
    let fb = outcome_if(&t)?;
    let corr = &fa * &g_alpha + &fb * &g_beta;
    for i in 0..n {
        let r = d.row(i).transpose();
        s[i] += corr[i] - c.dot(&(r * w[i] - tau));
    }
    Ok(SourceParts {
        source_part: s,
        gamma_gradient: c,
    })
}

/// Both halves of a source estimator's influence function, site-local scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceInfluence {
    /// One value per target patient; multiply by `N / n_T` for the all-N scale.
    pub target_part: Vec<f64>,
    /// One value per source patient; multiply by `N / n_k`.
    pub source_part: Vec<f64>,
    pub gamma_gradient: DVector<f64>,
}

/// Target-patient contributions `θ tᵢ + cᵀ(x̃ᵢ − τ)` given the target outcome
/// influence values `t` (used only under the target-model anchor).
pub fn source_target_part(
    anchor: AnchorKind,
    ds_t: &SiteDataset,
    target_or_if: &[f64],
    gamma_gradient: &DVector<f64>,
) -> Result<Vec<f64>> {
    let tau = prepend_one(&covariate_means(ds_t)?);
    let theta = f64::from(u8::from(anchor == AnchorKind::TargetModel));
    Ok((0..ds_t.n())
        .map(|i| theta * target_or_if[i] + gamma_gradient.dot(&(design_row(&ds_t.covariates, i) - &tau)))
        .collect())
}

#[allow(clippy::too_many_arguments)]
pub fn compute_source_if(
    anchor: AnchorKind,
    ds_t: &SiteDataset,
    or_t: &OutcomeFits,
    ds_k: &SiteDataset,
    tilt: &TiltFit,
    ps_k: &LogisticFit,
    or_k: &OutcomeFits,
    arm: TreatmentArm,
    clip: f64,
    mode: IfMode,
) -> Result<SourceInfluence> {
    let tau = prepend_one(&covariate_means(ds_t)?);
    let parts = source_influence_parts(anchor, ds_k, tilt, ps_k, or_k, arm, clip, mode, &tau)?;
    let t_if = match anchor {
        AnchorKind::TargetModel => target_outcome_if(ds_t, or_t, arm, mode)?,
        AnchorKind::SourceModel => vec![0.0; ds_t.n()],
    };
    Ok(SourceInfluence {
        target_part: source_target_part(anchor, ds_t, &t_if, &parts.gamma_gradient)?,
        source_part: parts.source_part,
        gamma_gradient: parts.gamma_gradient,
    })
}

/// `μ̂^(1) − μ̂^(0)`.
pub fn tate(mu1: &ArmEstimate, mu0: &ArmEstimate) -> f64 {
    mu1.value - mu0.value
}

/// Sample-size weighted average of per-target-site estimates.
pub fn pool_target_estimates(estimates: &[ArmEstimate]) -> f64 {
    let total: usize = estimates.iter().map(|e| e.n_contributing).sum();
    estimates
        .iter()
        .map(|e| e.value * e.n_contributing as f64 / total as f64)
        .sum()
}

/// Standard error of a site-local influence vector: `sqrt(Σ φ²) / n`.
pub fn local_se(phi: &[f64]) -> f64 {
    phi.iter().map(|v| v * v).sum::<f64>().sqrt() / phi.len() as f64
}
