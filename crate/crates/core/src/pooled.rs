//! Reference pipeline with all patient-level data in one place.
//!
//! Builds every all-N influence vector explicitly, so it doubles as the
//! check on the compressed summaries the federated protocol exchanges.

use rayon::prelude::*;

use crate::domain::{PerArm, SiteDataset, TreatmentArm};
use crate::ensemble::{build_summaries_raw, global_tate, global_variance_raw, QSummaries, SplitArm, WeightSolution};
use crate::error::Result;
use crate::estimators::source_target_part;
use crate::pipeline::{check_unique_ids, fit_arm, ArmFit, DroppedSite, EnsembleFit, PipelineConfig};
use crate::site::{analyze_source, analyze_target, split_halves, target_only_value, SiteConfig, SourceAnalysis, TargetAnalysis};

/// All-N influence vectors for one arm. Patients are ordered target first,
/// then each included source in turn.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmInfluence {
    pub target_if: Vec<f64>,
    pub source_ifs: Vec<Vec<f64>>,
    pub deltas: Vec<f64>,
    pub site_sizes: Vec<usize>,
    pub target_value: f64,
    pub source_values: Vec<f64>,
}

impl ArmInfluence {
    pub fn summaries(&self) -> Result<QSummaries> {
        build_summaries_raw(&self.target_if, &self.source_ifs, &self.deltas, &self.site_sizes)
    }
}

/// Site analyses of one target and its usable sources.
#[derive(Debug, Clone)]
pub struct PooledAnalysis<'a> {
    pub config: SiteConfig,
    pub target_data: &'a SiteDataset,
    pub target: TargetAnalysis,
    /// Included sources sorted by id.
    pub sources: Vec<(&'a SiteDataset, SourceAnalysis)>,
    pub dropped: Vec<DroppedSite>,
}

impl<'a> PooledAnalysis<'a> {
    /// Fails only if the target cannot be analysed; failing sources are
    /// recorded as dropped.
    pub fn new(target: &'a SiteDataset, sources: &'a [SiteDataset], config: SiteConfig) -> Result<Self> {
        check_unique_ids(std::iter::once(target.site_id.as_str()).chain(sources.iter().map(|s| s.site_id.as_str())))?;
        let ta = analyze_target(target, &config)?;
        let moments = ta.moments();
        let mut order: Vec<&SiteDataset> = sources.iter().collect();
        order.sort_by(|a, b| a.site_id.cmp(&b.site_id));
        let fits: Vec<_> = order
            .par_iter()
            .map(|ds| (*ds, analyze_source(ds, &moments, &config)))
            .collect();
        let mut included = Vec::new();
        let mut dropped = Vec::new();
        for (ds, fit) in fits {
            match fit {
                Ok(sa) => included.push((ds, sa)),
                Err(e) => dropped.push(DroppedSite {
                    site_id: ds.site_id.clone(),
                    reason: e.to_string(),
                }),
            }
        }
        Ok(PooledAnalysis {
            config,
            target_data: target,
            target: ta,
            sources: included,
            dropped,
        })
    }

    pub fn n_total(&self) -> usize {
        self.target.n + self.sources.iter().map(|(_, s)| s.n).sum::<usize>()
    }

    pub fn influence(&self, arm: TreatmentArm) -> Result<ArmInfluence> {
        let anchor = self.config.anchor;
        let n_total = self.n_total();
        let nf = n_total as f64;
        let nt = self.target.n;
        let ta = self.target.arms.get(arm);
        let or_mean = ta.or_mean;
        let mut target_if = vec![0.0; n_total];
        for (i, v) in ta.phi.iter().enumerate() {
            target_if[i] = v * nf / nt as f64;
        }
        let mut source_ifs = Vec::with_capacity(self.sources.len());
        let mut source_values = Vec::with_capacity(self.sources.len());
        let mut offset = nt;
        for (_, sa) in &self.sources {
            let parts = &sa.arms.get(arm).parts;
            let tp = source_target_part(anchor, self.target_data, &ta.t, &parts.gamma_gradient)?;
            let mut xi = vec![0.0; n_total];
            for (i, v) in tp.iter().enumerate() {
                xi[i] = v * nf / nt as f64;
            }
            for (i, v) in parts.source_part.iter().enumerate() {
                xi[offset + i] = v * nf / sa.n as f64;
            }
            offset += sa.n;
            source_ifs.push(xi);
            source_values.push(sa.value(arm, anchor, or_mean));
        }
        let mut site_sizes = vec![nt];
        site_sizes.extend(self.sources.iter().map(|(_, s)| s.n));
        Ok(ArmInfluence {
            target_if,
            source_ifs,
            deltas: source_values.iter().map(|m| m - ta.mu_hat).collect(),
            site_sizes,
            target_value: ta.mu_hat,
            source_values,
        })
    }

    /// Point estimate and standard error for fixed weights (target first).
    pub fn estimate_with(&self, arm: TreatmentArm, weights: &WeightSolution) -> Result<(f64, f64)> {
        let inf = self.influence(arm)?;
        let value = crate::ensemble::combine(inf.target_value, &inf.source_values, weights);
        let se = global_variance_raw(weights, &inf.target_if, &inf.source_ifs)?;
        Ok((value, se))
    }

    /// Training-half summaries for each split, restricted to the included
    /// sources; a source whose half fails is left out of that split only.
    pub fn split_arms(&self, n_splits: usize, seed: u64) -> Result<Vec<PerArm<SplitArm>>> {
        (0..n_splits)
            .into_par_iter()
            .map(|s| {
                let (train, valid) = split_halves(self.target_data, s, seed)?;
                let ta = analyze_target(&train, &self.config)?;
                let validation = target_only_value(&valid, &self.config).map_err(|e| e.at_site(&train.site_id))?;
                let halves: Vec<SiteDataset> = self
                    .sources
                    .iter()
                    .filter_map(|(ds, _)| split_halves(ds, s, seed).ok().map(|(tr, _)| tr))
                    .collect();
                let moments = ta.moments();
                let kept: Vec<(&SiteDataset, SourceAnalysis)> = halves
                    .iter()
                    .filter_map(|ds| analyze_source(ds, &moments, &self.config).ok().map(|a| (ds, a)))
                    .collect();
                let split = PooledAnalysis {
                    config: self.config,
                    target_data: &train,
                    target: ta,
                    sources: kept,
                    dropped: Vec::new(),
                };
                PerArm::try_build(|arm| {
                    let inf = split.influence(arm)?;
                    Ok(SplitArm {
                        summaries: inf.summaries()?,
                        target_value: inf.target_value,
                        source_values: inf.source_values,
                        validation_value: *validation.get(arm),
                    })
                })
            })
            .collect()
    }
}

/// The full estimator on pooled data.
pub fn run_pooled(target: &SiteDataset, sources: &[SiteDataset], cfg: &PipelineConfig) -> Result<EnsembleFit> {
    cfg.validate()?;
    let pa = PooledAnalysis::new(target, sources, cfg.site)?;
    let splits = if cfg.selects_lambda() {
        pa.split_arms(cfg.n_splits, cfg.split_seed)?
    } else {
        Vec::new()
    };
    let arms = PerArm::try_build(|arm| -> Result<ArmFit> {
        let inf = pa.influence(arm)?;
        let full = inf.summaries()?;
        let per_split: Vec<SplitArm> = splits.iter().map(|s| s.get(arm).clone()).collect();
        fit_arm(arm, cfg, &full, inf.target_value, inf.source_values.clone(), &per_split, |w| {
            global_variance_raw(w, &inf.target_if, &inf.source_ifs)
        })
    })?;
    let tate = global_tate(&arms.treated.estimate, &arms.control.estimate);
    Ok(EnsembleFit {
        target_site: target.site_id.clone(),
        source_sites: pa.sources.iter().map(|(d, _)| d.site_id.clone()).collect(),
        dropped: pa.dropped,
        arms,
        tate,
    })
}
