//! Wire schemas. Every field is an aggregate over a site's patients.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::domain::PerArm;
use crate::ensemble::{Penalty, SourceTriplet, TargetGram};
use crate::estimators::{AnchorKind, IfMode, SourceTerms};
use crate::pipeline::DroppedSite;
use crate::site::SiteConfig;

/// Settings fixed by the target and shared with every site.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolSettings {
    pub anchor: AnchorKind,
    pub if_mode: IfMode,
    pub clip: f64,
    pub n_splits: u64,
    pub split_seed: u64,
}

impl ProtocolSettings {
    pub fn site_config(&self) -> SiteConfig {
        SiteConfig {
            clip: self.clip,
            if_mode: self.if_mode,
            anchor: self.anchor,
        }
    }
}

/// Target moments for one training half.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitBroadcast {
    pub n_target: u64,
    pub covariate_means: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetBroadcast {
    pub protocol_version: String,
    pub target_site: String,
    pub n_target: u64,
    pub covariate_means: Vec<f64>,
    /// `n_T⁻¹ Σ m̂_{a,T}(xᵢ)`.
    pub target_or_mean: PerArm<f64>,
    pub target_mu_hat: PerArm<f64>,
    pub settings: ProtocolSettings,
    pub splits: Vec<SplitBroadcast>,
}

/// Target aggregates for one arm on one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetArmSummary {
    pub mu_hat: f64,
    pub or_mean: f64,
    /// Row-major Gram matrix of the basis `(φᵢ, tᵢ, xᵢ − x̄_T)`.
    pub gram: Vec<Vec<f64>>,
    pub basis_sums: Vec<f64>,
}

impl TargetArmSummary {
    pub fn from_gram(mu_hat: f64, or_mean: f64, g: &TargetGram) -> Self {
        TargetArmSummary {
            mu_hat,
            or_mean,
            gram: g.gram.row_iter().map(|r| r.iter().copied().collect()).collect(),
            basis_sums: g.sums.iter().copied().collect(),
        }
    }

    pub fn to_gram(&self, n: usize) -> Option<TargetGram> {
        let q = self.basis_sums.len();
        if q < 2 || self.gram.len() != q || self.gram.iter().any(|r| r.len() != q) {
            return None;
        }
        Some(TargetGram {
            n,
            gram: DMatrix::from_fn(q, q, |r, c| self.gram[r][c]),
            sums: DVector::from_vec(self.basis_sums.clone()),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSplitSummary {
    pub n_target: u64,
    pub arms: PerArm<TargetArmSummary>,
    /// Target-only estimate on the validation half.
    pub validation_mu: PerArm<f64>,
}

/// What the target hands the processing site alongside its broadcast.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSummary {
    pub protocol_version: String,
    pub target_site: String,
    pub n_target: u64,
    pub arms: PerArm<TargetArmSummary>,
    pub splits: Vec<TargetSplitSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmStats {
    pub conditional_mean: f64,
    pub augmentation: f64,
    /// `Σ_{i∈k} ξ_{i,k}` on the site-local scale.
    pub if_sum: f64,
    pub if_sumsq: f64,
    pub gamma_gradient: Vec<f64>,
}

impl ArmStats {
    pub fn terms(&self) -> SourceTerms {
        SourceTerms {
            conditional_mean: self.conditional_mean,
            augmentation: self.augmentation,
        }
    }

    pub fn triplet(&self, n: usize) -> SourceTriplet {
        SourceTriplet {
            n,
            if_sum: self.if_sum,
            if_sumsq: self.if_sumsq,
            gamma_gradient: DVector::from_vec(self.gamma_gradient.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitStats {
    pub n_k: u64,
    pub arms: PerArm<ArmStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitReply {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dropped: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stats: Option<SplitStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSummary {
    pub n_k: u64,
    pub gamma: Vec<f64>,
    pub ps_coefficients: Vec<f64>,
    pub or_coefficients: PerArm<Vec<f64>>,
    pub arms: PerArm<ArmStats>,
    pub splits: Vec<SplitReply>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceReply {
    pub protocol_version: String,
    pub site_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dropped: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<SourceSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteWeight {
    pub site_id: String,
    pub eta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmResult {
    pub value: f64,
    pub se: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub lambda_opt: f64,
    pub objective_value: f64,
    /// Validation criterion per λ grid value; empty when λ was fixed.
    pub criteria: Vec<f64>,
    pub weights: Vec<SiteWeight>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TateResult {
    pub value: f64,
    pub se: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditEntry {
    pub message: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProcessingResult {
    pub protocol_version: String,
    pub target_site: String,
    pub penalty: Penalty,
    pub lambda_grid: Vec<f64>,
    pub arms: PerArm<ArmResult>,
    pub tate: TateResult,
    pub dropped_sites: Vec<DroppedSite>,
    pub audit: Vec<AuditEntry>,
}
