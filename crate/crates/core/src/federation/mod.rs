//! One-round message protocol between a target site, source sites and a
//! processing site.
//!
//! The target broadcasts its covariate means; each source answers once
//! without seeing any other reply; the processing site combines the
//! broadcast, the target's aggregate summary and the replies.

mod messages;
mod wire;

pub use messages::*;
pub use wire::{format_float, from_canonical, read_ndjson, to_canonical, wire_size, write_ndjson};

use rayon::prelude::*;

use crate::domain::{PerArm, SiteDataset, TreatmentArm};
use crate::ensemble::{build_summaries_compressed, global_tate, global_variance_compressed, SplitArm};
use crate::error::{Error, Result};
use crate::pipeline::{check_unique_ids, fit_arm, ArmFit, DroppedSite, EnsembleFit, PipelineConfig};
use crate::site::{analyze_source, analyze_target, split_halves, target_only_value, SourceAnalysis, TargetAnalysis};
use crate::tilt::TargetMoments;

pub const PROTOCOL_VERSION: &str = "fedtate/1";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProtocolError {
    #[error("malformed message at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("unsupported protocol version {found:?} (expected {PROTOCOL_VERSION:?})")]
    Version { found: String },
    #[error("inconsistent message: {0}")]
    Invalid(String),
}

fn check_version(found: &str) -> std::result::Result<(), ProtocolError> {
    if found == PROTOCOL_VERSION {
        Ok(())
    } else {
        Err(ProtocolError::Version { found: found.to_string() })
    }
}

fn invalid(msg: impl Into<String>) -> Error {
    ProtocolError::Invalid(msg.into()).into()
}

fn target_arm_summary(ta: &TargetAnalysis, arm: TreatmentArm) -> Result<TargetArmSummary> {
    let a = ta.arms.get(arm);
    Ok(TargetArmSummary::from_gram(a.mu_hat, a.or_mean, &ta.gram(arm)?))
}

/// Fits the target, returning the broadcast for sources and the summary
/// kept for the processing site.
pub fn run_target_round(ds: &SiteDataset, cfg: &PipelineConfig) -> Result<(TargetBroadcast, TargetSummary)> {
    cfg.validate()?;
    let ta = analyze_target(ds, &cfg.site)?;
    let n_splits = if cfg.selects_lambda() { cfg.n_splits } else { 0 };
    let halves: Vec<(TargetAnalysis, PerArm<f64>)> = (0..n_splits)
        .into_par_iter()
        .map(|s| {
            let (train, valid) = split_halves(ds, s, cfg.split_seed)?;
            let fit = analyze_target(&train, &cfg.site)?;
            let validation = target_only_value(&valid, &cfg.site).map_err(|e| e.at_site(&ds.site_id))?;
            Ok((fit, validation))
        })
        .collect::<Result<_>>()?;

    let broadcast = TargetBroadcast {
        protocol_version: PROTOCOL_VERSION.to_string(),
        target_site: ds.site_id.clone(),
        n_target: ta.n as u64,
        covariate_means: ta.means.iter().copied().collect(),
        target_or_mean: ta.arms.map(|_, a| a.or_mean),
        target_mu_hat: ta.arms.map(|_, a| a.mu_hat),
        settings: ProtocolSettings {
            anchor: cfg.site.anchor,
            if_mode: cfg.site.if_mode,
            clip: cfg.site.clip,
            n_splits: n_splits as u64,
            split_seed: cfg.split_seed,
        },
        splits: halves
            .iter()
            .map(|(h, _)| SplitBroadcast {
                n_target: h.n as u64,
                covariate_means: h.means.iter().copied().collect(),
            })
            .collect(),
    };
    let summary = TargetSummary {
        protocol_version: PROTOCOL_VERSION.to_string(),
        target_site: ds.site_id.clone(),
        n_target: ta.n as u64,
        arms: PerArm::try_build(|arm| target_arm_summary(&ta, arm))?,
        splits: halves
            .iter()
            .map(|(h, v)| {
                Ok(TargetSplitSummary {
                    n_target: h.n as u64,
                    arms: PerArm::try_build(|arm| target_arm_summary(h, arm))?,
                    validation_mu: *v,
                })
            })
            .collect::<Result<_>>()?,
    };
    Ok((broadcast, summary))
}

fn arm_stats(sa: &SourceAnalysis) -> PerArm<ArmStats> {
    sa.arms.map(|_, a| {
        let t = a.triplet(sa.n);
        ArmStats {
            conditional_mean: a.terms.conditional_mean,
            augmentation: a.terms.augmentation,
            if_sum: t.if_sum,
            if_sumsq: t.if_sumsq,
            gamma_gradient: t.gamma_gradient.iter().copied().collect(),
        }
    })
}

fn moments(n: u64, means: &[f64]) -> TargetMoments {
    TargetMoments {
        means: nalgebra::DVector::from_column_slice(means),
        n_target: n as usize,
    }
}

/// A source's single reply. Local failures become a dropped reply rather
/// than an error.
pub fn run_source_round(ds: &SiteDataset, b: &TargetBroadcast) -> SourceReply {
    let dropped = |reason: String| SourceReply {
        protocol_version: PROTOCOL_VERSION.to_string(),
        site_id: ds.site_id.clone(),
        dropped: Some(reason),
        summary: None,
    };
    if let Err(e) = check_version(&b.protocol_version) {
        return dropped(e.to_string());
    }
    if b.covariate_means.len() != ds.p() {
        return dropped(format!("expected {} covariates, site has {}", b.covariate_means.len(), ds.p()));
    }
    let cfg = b.settings.site_config();
    let sa = match analyze_source(ds, &moments(b.n_target, &b.covariate_means), &cfg) {
        Ok(sa) => sa,
        Err(e) => return dropped(e.to_string()),
    };
    let splits = b
        .splits
        .par_iter()
        .enumerate()
        .map(|(s, sb)| {
            let fit = split_halves(ds, s, b.settings.split_seed)
                .and_then(|(train, _)| analyze_source(&train, &moments(sb.n_target, &sb.covariate_means), &cfg));
            match fit {
                Ok(h) => SplitReply {
                    dropped: None,
                    stats: Some(SplitStats {
                        n_k: h.n as u64,
                        arms: arm_stats(&h),
                    }),
                },
                Err(e) => SplitReply {
                    dropped: Some(e.to_string()),
                    stats: None,
                },
            }
        })
        .collect();
    SourceReply {
        protocol_version: PROTOCOL_VERSION.to_string(),
        site_id: ds.site_id.clone(),
        dropped: None,
        summary: Some(SourceSummary {
            n_k: sa.n as u64,
            gamma: sa.tilt.gamma.iter().copied().collect(),
            ps_coefficients: sa.ps.coefficients.iter().copied().collect(),
            or_coefficients: PerArm::new(
                sa.or.fit_treated.coefficients().iter().copied().collect(),
                sa.or.fit_control.coefficients().iter().copied().collect(),
            ),
            arms: arm_stats(&sa),
            splits,
        }),
    }
}

fn check_arm_stats(site: &str, stats: &PerArm<ArmStats>, p: usize) -> Result<()> {
    for arm in TreatmentArm::BOTH {
        if stats.get(arm).gamma_gradient.len() != p + 1 {
            return Err(invalid(format!("reply {site}: gamma_gradient length")));
        }
    }
    Ok(())
}

fn check_inputs(b: &TargetBroadcast, ts: &TargetSummary, replies: &[SourceReply]) -> Result<()> {
    check_version(&b.protocol_version)?;
    check_version(&ts.protocol_version)?;
    let p = b.covariate_means.len();
    let n_splits = b.settings.n_splits as usize;
    if ts.target_site != b.target_site || ts.n_target != b.n_target {
        return Err(invalid("target summary does not match the broadcast"));
    }
    if ts.splits.len() != n_splits || b.splits.len() != n_splits {
        return Err(invalid("split count disagrees with the settings"));
    }
    for a in std::iter::once(&ts.arms).chain(ts.splits.iter().map(|s| &s.arms)) {
        for arm in TreatmentArm::BOTH {
            if a.get(arm).to_gram(1).is_none_or(|g| g.p() != p) {
                return Err(invalid("target gram matrix has the wrong shape"));
            }
        }
    }
    check_unique_ids(std::iter::once(b.target_site.as_str()).chain(replies.iter().map(|r| r.site_id.as_str())))
        .map_err(|e| invalid(e.to_string()))?;
    for r in replies {
        check_version(&r.protocol_version)?;
        match (&r.dropped, &r.summary) {
            (Some(_), None) => {}
            (None, Some(s)) => {
                if s.gamma.len() != p + 1 || s.ps_coefficients.len() != p + 1 {
                    return Err(invalid(format!("reply {}: coefficient length", r.site_id)));
                }
                if s.splits.len() != n_splits {
                    return Err(invalid(format!("reply {}: split count", r.site_id)));
                }
                check_arm_stats(&r.site_id, &s.arms, p)?;
                for sp in &s.splits {
                    match (&sp.dropped, &sp.stats) {
                        (Some(_), None) => {}
                        (None, Some(st)) => check_arm_stats(&r.site_id, &st.arms, p)?,
                        _ => return Err(invalid(format!("reply {}: split must be dropped or carry stats", r.site_id))),
                    }
                }
            }
            _ => return Err(invalid(format!("reply {}: exactly one of dropped and summary", r.site_id))),
        }
    }
    Ok(())
}

/// Processing-site computation from messages alone. `grid` and `penalty`
/// are the processing site's choices; everything else comes from the
/// broadcast.
pub fn aggregate_fit(
    b: &TargetBroadcast,
    ts: &TargetSummary,
    replies: &[SourceReply],
    grid: &[f64],
    penalty: crate::ensemble::Penalty,
) -> Result<EnsembleFit> {
    check_inputs(b, ts, replies)?;
    let cfg = PipelineConfig {
        site: b.settings.site_config(),
        lambda_grid: grid.to_vec(),
        penalty,
        n_splits: b.settings.n_splits as usize,
        split_seed: b.settings.split_seed,
    };
    cfg.validate()?;
    let anchor = cfg.site.anchor;
    let mut sorted: Vec<&SourceReply> = replies.iter().collect();
    sorted.sort_by(|x, y| x.site_id.cmp(&y.site_id));
    let included: Vec<(&str, &SourceSummary)> = sorted
        .iter()
        .filter_map(|r| r.summary.as_ref().map(|s| (r.site_id.as_str(), s)))
        .collect();
    let dropped: Vec<DroppedSite> = sorted
        .iter()
        .filter_map(|r| {
            r.dropped.as_ref().map(|reason| DroppedSite {
                site_id: r.site_id.clone(),
                reason: reason.clone(),
            })
        })
        .collect();
    let n_t = ts.n_target as usize;

    let arms = PerArm::try_build(|arm| -> Result<ArmFit> {
        let ta = ts.arms.get(arm);
        let gram = ta.to_gram(n_t).expect("shape checked");
        let triplets: Vec<_> = included.iter().map(|(_, s)| s.arms.get(arm).triplet(s.n_k as usize)).collect();
        let values: Vec<f64> = included
            .iter()
            .map(|(_, s)| s.arms.get(arm).terms().value(anchor, ta.or_mean))
            .collect();
        let deltas: Vec<f64> = values.iter().map(|v| v - ta.mu_hat).collect();
        let full = build_summaries_compressed(&gram, &triplets, &deltas, anchor)?;

        let splits: Vec<SplitArm> = ts
            .splits
            .iter()
            .enumerate()
            .map(|(s, tsplit)| {
                let th = tsplit.arms.get(arm);
                let g = th.to_gram(tsplit.n_target as usize).expect("shape checked");
                let mut trip = Vec::new();
                let mut vals = Vec::new();
                for (_, src) in &included {
                    if let Some(st) = &src.splits[s].stats {
                        let a = st.arms.get(arm);
                        trip.push(a.triplet(st.n_k as usize));
                        vals.push(a.terms().value(anchor, th.or_mean));
                    }
                }
                let d: Vec<f64> = vals.iter().map(|v| v - th.mu_hat).collect();
                Ok(SplitArm {
                    summaries: build_summaries_compressed(&g, &trip, &d, anchor)?,
                    target_value: th.mu_hat,
                    source_values: vals,
                    validation_value: *tsplit.validation_mu.get(arm),
                })
            })
            .collect::<Result<_>>()?;
        fit_arm(arm, &cfg, &full, ta.mu_hat, values, &splits, |w| {
            global_variance_compressed(w, &gram, &triplets, anchor)
        })
    })?;
    let tate = global_tate(&arms.treated.estimate, &arms.control.estimate);
    Ok(EnsembleFit {
        target_site: b.target_site.clone(),
        source_sites: included.iter().map(|(id, _)| id.to_string()).collect(),
        dropped,
        arms,
        tate,
    })
}

/// Byte size of every message the processing site received.
pub fn audit(b: &TargetBroadcast, ts: &TargetSummary, replies: &[SourceReply]) -> Result<Vec<AuditEntry>> {
    let mut out = vec![
        AuditEntry {
            message: "broadcast".into(),
            bytes: wire_size(b)? as u64,
        },
        AuditEntry {
            message: "target_summary".into(),
            bytes: wire_size(ts)? as u64,
        },
    ];
    let mut sorted: Vec<&SourceReply> = replies.iter().collect();
    sorted.sort_by(|x, y| x.site_id.cmp(&y.site_id));
    for r in sorted {
        out.push(AuditEntry {
            message: format!("reply:{}", r.site_id),
            bytes: wire_size(r)? as u64,
        });
    }
    Ok(out)
}

pub fn result_message(
    fit: &EnsembleFit,
    grid: &[f64],
    penalty: crate::ensemble::Penalty,
    audit: Vec<AuditEntry>,
) -> ProcessingResult {
    ProcessingResult {
        protocol_version: PROTOCOL_VERSION.to_string(),
        target_site: fit.target_site.clone(),
        penalty,
        lambda_grid: grid.to_vec(),
        arms: fit.arms.map(|arm, a| ArmResult {
            value: a.estimate.value,
            se: a.estimate.se,
            ci_lower: a.estimate.ci95.0,
            ci_upper: a.estimate.ci95.1,
            lambda_opt: a.estimate.weights.lambda,
            objective_value: a.estimate.weights.objective_value,
            criteria: a.criteria.clone(),
            weights: fit
                .weights_by_site(arm)
                .into_iter()
                .map(|(site_id, eta)| SiteWeight { site_id, eta })
                .collect(),
        }),
        tate: TateResult {
            value: fit.tate.value,
            se: fit.tate.se,
            ci_lower: fit.tate.ci95.0,
            ci_upper: fit.tate.ci95.1,
        },
        dropped_sites: fit.dropped.clone(),
        audit,
    }
}

/// [`aggregate_fit`] plus the wire result with its audit trail.
pub fn aggregate(
    b: &TargetBroadcast,
    ts: &TargetSummary,
    replies: &[SourceReply],
    grid: &[f64],
    penalty: crate::ensemble::Penalty,
) -> Result<ProcessingResult> {
    let fit = aggregate_fit(b, ts, replies, grid, penalty)?;
    Ok(result_message(&fit, grid, penalty, audit(b, ts, replies)?))
}

/// Every message of one protocol run.
#[derive(Debug, Clone)]
pub struct FederatedRun {
    pub broadcast: TargetBroadcast,
    pub target_summary: TargetSummary,
    pub replies: Vec<SourceReply>,
    pub fit: EnsembleFit,
    pub result: ProcessingResult,
}

/// Runs all three roles in process: one broadcast, one reply per source,
/// one aggregation.
pub fn run_federated(target: &SiteDataset, sources: &[SiteDataset], cfg: &PipelineConfig) -> Result<FederatedRun> {
    let (broadcast, target_summary) = run_target_round(target, cfg)?;
    let replies: Vec<SourceReply> = sources.par_iter().map(|ds| run_source_round(ds, &broadcast)).collect();
    let fit = aggregate_fit(&broadcast, &target_summary, &replies, &cfg.lambda_grid, cfg.penalty)?;
    let result = result_message(
        &fit,
        &cfg.lambda_grid,
        cfg.penalty,
        audit(&broadcast, &target_summary, &replies)?,
    );
    Ok(FederatedRun {
        broadcast,
        target_summary,
        replies,
        fit,
        result,
    })
}
