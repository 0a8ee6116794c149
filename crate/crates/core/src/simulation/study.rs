//! Comparator estimators and the replicated study.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dgp::{generate_replication, true_tate, DgpConfig};
use crate::domain::{derive_seed, PerArm, SeedSpec, SiteDataset, TreatmentArm};
use crate::ensemble::{Penalty, TateEstimate, WeightSolution, DEFAULT_LAMBDA_GRID};
use crate::error::{Error, Result};
use crate::estimators::target_aipw;
use crate::federation::{aggregate_fit, run_source_round, run_target_round};
use crate::nuisance::{fit_outcomes, fit_propensity};
use crate::pipeline::{PipelineConfig, DEFAULT_SPLITS};
use crate::pooled::PooledAnalysis;
use crate::site::SiteConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Estimator {
    TargetOnly,
    SsNaive,
    Ss,
    GlobalL2,
    GlobalL1,
    FixedEffects,
}

impl Estimator {
    /// The five estimators reported by default, in report order.
    pub const STANDARD: [Estimator; 5] = [
        Estimator::TargetOnly,
        Estimator::SsNaive,
        Estimator::Ss,
        Estimator::GlobalL2,
        Estimator::GlobalL1,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Estimator::TargetOnly => "Target-Only",
            Estimator::SsNaive => "SS (naive)",
            Estimator::Ss => "SS",
            Estimator::GlobalL2 => "GLOBAL-l2",
            Estimator::GlobalL1 => "GLOBAL-l1",
            Estimator::FixedEffects => "Fixed-Effects",
        }
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Estimator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        Ok(match key.as_str() {
            "targetonly" | "target" => Estimator::TargetOnly,
            "ssnaive" => Estimator::SsNaive,
            "ss" => Estimator::Ss,
            "globall2" | "l2" => Estimator::GlobalL2,
            "globall1" | "l1" => Estimator::GlobalL1,
            "fixedeffects" | "fe" => Estimator::FixedEffects,
            _ => return Err(Error::Config(format!("unknown estimator {s:?}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmValue {
    pub value: f64,
    pub se: f64,
}

/// Difference of the arm values; the arm variances are added.
pub fn tate_from_arms(arms: &PerArm<ArmValue>) -> TateEstimate {
    TateEstimate::new(
        arms.treated.value - arms.control.value,
        arms.treated.se.hypot(arms.control.se),
    )
}

fn sum_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// AIPW on the target alone.
pub fn target_only_estimate(target: &SiteDataset, clip: f64) -> Result<PerArm<ArmValue>> {
    let ps = fit_propensity(target)?;
    let or = fit_outcomes(target)?;
    PerArm::try_build(|arm| {
        let e = target_aipw(target, &ps, &or, arm, clip)?;
        Ok(ArmValue {
            value: e.value,
            se: sum_sq(&e.per_patient_if).sqrt() / target.n() as f64,
        })
    })
}

/// Each site's own AIPW, averaged with weights `n_k / N`: no density-ratio
/// adjustment. A site that cannot be fitted fails the estimator.
pub fn ss_naive_estimate(sites: &[&SiteDataset], clip: f64) -> Result<PerArm<ArmValue>> {
    let total: usize = sites.iter().map(|s| s.n()).sum();
    let fits = sites
        .iter()
        .map(|ds| -> Result<_> {
            let run = || Ok((fit_propensity(ds)?, fit_outcomes(ds)?));
            run().map_err(|e: Error| e.at_site(&ds.site_id))
        })
        .collect::<Result<Vec<_>>>()?;
    PerArm::try_build(|arm| {
        let mut value = 0.0;
        let mut ss = 0.0;
        for (ds, (ps, or)) in sites.iter().zip(&fits) {
            let e = target_aipw(ds, ps, or, arm, clip).map_err(|e| e.at_site(&ds.site_id))?;
            value += e.value * ds.n() as f64 / total as f64;
            ss += sum_sq(&e.per_patient_if);
        }
        Ok(ArmValue {
            value,
            se: ss.sqrt() / total as f64,
        })
    })
}

/// Sample-size weights over the target and every source that could be
/// tilted and fitted.
pub fn ss_estimate(target: &SiteDataset, sources: &[SiteDataset], cfg: SiteConfig) -> Result<PerArm<ArmValue>> {
    let pa = PooledAnalysis::new(target, sources, cfg)?;
    ss_from_analysis(&pa)
}

pub fn ss_from_analysis(pa: &PooledAnalysis<'_>) -> Result<PerArm<ArmValue>> {
    let total = pa.n_total() as f64;
    let eta: Vec<f64> = std::iter::once(pa.target.n)
        .chain(pa.sources.iter().map(|(_, s)| s.n))
        .map(|n| n as f64 / total)
        .collect();
    let weights = WeightSolution {
        eta: DVector::from_vec(eta),
        lambda: 0.0,
        objective_value: f64::NAN,
        penalty: Penalty::L2,
        iterations: 0,
    };
    PerArm::try_build(|arm: TreatmentArm| {
        let (value, se) = pa.estimate_with(arm, &weights)?;
        Ok(ArmValue { value, se })
    })
}

/// OLS of `Y` on site intercepts, site-specific treatment effects and the
/// covariates, using every site's patients. Returns the target's
/// treatment coefficient with its OLS standard error.
pub fn fixed_effects_tate(target: &SiteDataset, sources: &[SiteDataset]) -> Result<TateEstimate> {
    let sites: Vec<&SiteDataset> = std::iter::once(target).chain(sources).collect();
    let k = sites.len();
    let p = target.p();
    if sites.iter().any(|s| s.p() != p) {
        return Err(Error::Dimension("sites disagree on covariate count".into()));
    }
    let n: usize = sites.iter().map(|s| s.n()).sum();
    let q = 2 * k + p;
    if n <= q {
        return Err(Error::SingularDesign);
    }
    let mut x = DMatrix::zeros(n, q);
    let mut y = DVector::zeros(n);
    let mut r = 0;
    for (s, ds) in sites.iter().enumerate() {
        for i in 0..ds.n() {
            x[(r, s)] = 1.0;
            x[(r, k + s)] = f64::from(ds.treatment[i]);
            for j in 0..p {
                x[(r, 2 * k + j)] = ds.covariates[(i, j)];
            }
            y[r] = ds.outcome[i];
            r += 1;
        }
    }
    let xtx = x.transpose() * &x;
    let inv = crate::linalg::spd_inverse(&xtx).ok_or(Error::SingularDesign)?;
    let beta = &inv * (x.transpose() * &y);
    let resid = &y - &x * &beta;
    let sigma2 = resid.norm_squared() / (n - q) as f64;
    Ok(TateEstimate::new(beta[k], (sigma2 * inv[(k, k)]).sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub dgp: DgpConfig,
    pub n_reps: usize,
    pub estimators: Vec<Estimator>,
    pub lambda_grid: Vec<f64>,
    pub n_splits: usize,
    /// Worker threads; `None` uses the global pool.
    pub workers: Option<usize>,
}

impl StudyConfig {
    pub fn new(dgp: DgpConfig, n_reps: usize) -> Self {
        StudyConfig {
            dgp,
            n_reps,
            estimators: Estimator::STANDARD.to_vec(),
            lambda_grid: DEFAULT_LAMBDA_GRID.to_vec(),
            n_splits: DEFAULT_SPLITS,
            workers: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dgp.validate()?;
        if self.n_reps == 0 {
            return Err(Error::Config("reps must be at least 1".into()));
        }
        if self.estimators.is_empty() {
            return Err(Error::Config("no estimators selected".into()));
        }
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        crate::ensemble::validate_grid(&self.lambda_grid)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub replication: u64,
    pub estimator: String,
    pub estimate: f64,
    pub se: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    /// Empty unless the estimator failed in this replication.
    pub error: String,
}

impl ReplicationRecord {
    fn ok(rep: u64, est: Estimator, t: TateEstimate) -> Self {
        ReplicationRecord {
            replication: rep,
            estimator: est.name().to_string(),
            estimate: t.value,
            se: t.se,
            ci_lower: t.ci95.0,
            ci_upper: t.ci95.1,
            error: String::new(),
        }
    }

    fn failed(rep: u64, est: Estimator, e: &Error) -> Self {
        ReplicationRecord {
            replication: rep,
            estimator: est.name().to_string(),
            estimate: f64::NAN,
            se: f64::NAN,
            ci_lower: f64::NAN,
            ci_upper: f64::NAN,
            error: e.to_string(),
        }
    }

    pub fn failed_run(&self) -> bool {
        !self.error.is_empty()
    }
}

fn global_fits(study: &StudyConfig, data: &super::GeneratedStudy, rep: u64, penalties: &[Penalty]) -> Result<Vec<TateEstimate>> {
    let mut cfg = PipelineConfig::for_kind(data.target.outcome_kind, Penalty::L2);
    cfg.lambda_grid = study.lambda_grid.clone();
    cfg.n_splits = study.n_splits;
    cfg.split_seed = derive_seed(&SeedSpec::new(study.dgp.seed, rep, "split"));
    let (broadcast, summary) = run_target_round(&data.target, &cfg)?;
    let replies: Vec<_> = data.sources.iter().map(|ds| run_source_round(ds, &broadcast)).collect();
    penalties
        .iter()
        .map(|&pen| Ok(aggregate_fit(&broadcast, &summary, &replies, &cfg.lambda_grid, pen)?.tate))
        .collect()
}

/// Every requested estimator on replication `rep`, in the order requested.
/// Failures are recorded, not propagated.
pub fn run_replication(study: &StudyConfig, rep: u64) -> Vec<ReplicationRecord> {
    let data = match generate_replication(&study.dgp, rep) {
        Ok(d) => d,
        Err(e) => return study.estimators.iter().map(|&est| ReplicationRecord::failed(rep, est, &e)).collect(),
    };
    let site_cfg = SiteConfig::for_kind(data.target.outcome_kind);
    let penalties: Vec<Penalty> = study
        .estimators
        .iter()
        .filter_map(|e| match e {
            Estimator::GlobalL2 => Some(Penalty::L2),
            Estimator::GlobalL1 => Some(Penalty::L1),
            _ => None,
        })
        .collect();
    let global = if penalties.is_empty() {
        Ok(Vec::new())
    } else {
        global_fits(study, &data, rep, &penalties)
    };
    study
        .estimators
        .iter()
        .map(|&est| {
            let r = match est {
                Estimator::TargetOnly => target_only_estimate(&data.target, site_cfg.clip).map(|a| tate_from_arms(&a)),
                Estimator::SsNaive => {
                    let sites: Vec<&SiteDataset> = std::iter::once(&data.target).chain(&data.sources).collect();
                    ss_naive_estimate(&sites, site_cfg.clip).map(|a| tate_from_arms(&a))
                }
                Estimator::Ss => ss_estimate(&data.target, &data.sources, site_cfg).map(|a| tate_from_arms(&a)),
                Estimator::GlobalL2 | Estimator::GlobalL1 => {
                    let pen = if est == Estimator::GlobalL2 { Penalty::L2 } else { Penalty::L1 };
                    match &global {
                        Ok(fits) => Ok(fits[penalties.iter().position(|&p| p == pen).expect("requested penalty")]),
                        Err(e) => Err(Error::Config(e.to_string())),
                    }
                }
                Estimator::FixedEffects => fixed_effects_tate(&data.target, &data.sources),
            };
            match r {
                Ok(t) if t.value.is_finite() && t.se.is_finite() => ReplicationRecord::ok(rep, est, t),
                Ok(_) => ReplicationRecord::failed(rep, est, &Error::NonFinite("estimate")),
                Err(e) => ReplicationRecord::failed(rep, est, &e),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub estimator: String,
    /// `|mean estimate − truth|`.
    pub bias: f64,
    pub rmse: f64,
    /// Percent of intervals containing the truth.
    pub coverage: f64,
    pub ci_length: f64,
    pub n_fail: usize,
}

/// Summary rows in estimator order; failed replications only count toward
/// `n_fail`.
pub fn summarize(records: &[ReplicationRecord], estimators: &[Estimator], truth: f64) -> Vec<MetricsRow> {
    estimators
        .iter()
        .map(|est| {
            let rows: Vec<&ReplicationRecord> = records.iter().filter(|r| r.estimator == est.name()).collect();
            let ok: Vec<&&ReplicationRecord> = rows.iter().filter(|r| !r.failed_run()).collect();
            let m = ok.len() as f64;
            let (bias, rmse, coverage, ci_length) = if ok.is_empty() {
                (f64::NAN, f64::NAN, f64::NAN, f64::NAN)
            } else {
                let mean = ok.iter().map(|r| r.estimate).sum::<f64>() / m;
                let mse = ok.iter().map(|r| (r.estimate - truth).powi(2)).sum::<f64>() / m;
                let hits = ok.iter().filter(|r| r.ci_lower <= truth && truth <= r.ci_upper).count();
                let len = ok.iter().map(|r| r.ci_upper - r.ci_lower).sum::<f64>() / m;
                ((mean - truth).abs(), mse.sqrt(), 100.0 * hits as f64 / m, len)
            };
            MetricsRow {
                estimator: est.name().to_string(),
                bias,
                rmse,
                coverage,
                ci_length,
                n_fail: rows.len() - ok.len(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    pub truth: f64,
    pub metrics: Vec<MetricsRow>,
    /// Replication-major, estimator order within a replication.
    pub replications: Vec<ReplicationRecord>,
}

impl StudyResult {
    pub fn row(&self, est: Estimator) -> Option<&MetricsRow> {
        self.metrics.iter().find(|r| r.estimator == est.name())
    }
}

/// Runs the replications in parallel. Each replication draws from its own
/// derived stream and results are collected in replication order, so the
/// output does not depend on the worker count.
pub fn run_study(study: &StudyConfig) -> Result<StudyResult> {
    study.validate()?;
    let run = || -> Vec<ReplicationRecord> {
        (0..study.n_reps as u64)
            .into_par_iter()
            .map(|rep| run_replication(study, rep))
            .collect::<Vec<_>>()
            .into_iter()
            .flatten()
            .collect()
    };
    let replications = match study.workers {
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?
            .install(run),
        None => run(),
    };
    let truth = true_tate(&study.dgp);
    Ok(StudyResult {
        truth,
        metrics: summarize(&replications, &study.estimators, truth),
        replications,
    })
}

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    Error::Csv {
        line,
        message: e.to_string(),
    }
}

pub fn write_metrics_csv<W: Write>(w: W, rows: &[MetricsRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_metrics_csv<R: Read>(r: R) -> Result<Vec<MetricsRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let expected = ["estimator", "bias", "rmse", "coverage", "ci_length", "n_fail"];
    if headers.iter().ne(expected) {
        return Err(Error::Csv {
            line: 1,
            message: format!("expected header {}", expected.join(",")),
        });
    }
    rdr.deserialize().map(|row| row.map_err(csv_err)).collect()
}

pub fn write_replications_csv<W: Write>(w: W, rows: &[ReplicationRecord]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}
