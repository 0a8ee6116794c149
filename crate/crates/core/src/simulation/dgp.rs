//! Skew-normal covariates, heterogeneous site sizes and the five outcome /
//! propensity specifications.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Bernoulli, Distribution, Gamma, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::domain::{OutcomeKind, SeedSpec, SiteDataset, SimRng};
use crate::error::{Error, Result};
use crate::linalg::{expit, linspace, quantile_type7};

pub const SITE_SIZE_SHAPE: f64 = 16.0;
pub const SITE_SIZE_SCALE: f64 = 12.5;
pub const MIN_SITE_SIZE: usize = 50;
pub const DEFAULT_TARGET_N: usize = 100;
pub const TRUE_EFFECT: f64 = 3.0;
const MAX_TREATMENT_DRAWS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SkewNormalParams {
    pub location: f64,
    pub scale: f64,
    pub skew: f64,
}

impl SkewNormalParams {
    pub fn new(location: f64, scale: f64, skew: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) || !location.is_finite() || !skew.is_finite() {
            return Err(Error::Config(format!("skew-normal scale must be positive, got {scale}")));
        }
        Ok(SkewNormalParams { location, scale, skew })
    }

    pub fn delta(&self) -> f64 {
        self.skew / (1.0 + self.skew * self.skew).sqrt()
    }

    pub fn mean(&self) -> f64 {
        self.location + self.scale * self.delta() * (2.0 / std::f64::consts::PI).sqrt()
    }

    pub fn second_moment(&self) -> f64 {
        let m = self.scale * self.delta() * (2.0 / std::f64::consts::PI).sqrt();
        self.location * self.location + 2.0 * self.location * m + self.scale * self.scale
    }
}

pub fn sample_skew_normal<R: Rng + ?Sized>(params: &SkewNormalParams, n: usize, rng: &mut R) -> Vec<f64> {
    let d = params.delta();
    let c = (1.0 - d * d).sqrt();
    (0..n)
        .map(|_| {
            let z0: f64 = rng.sample(StandardNormal);
            let z1: f64 = rng.sample(StandardNormal);
            params.location + params.scale * (d * z0.abs() + c * z1)
        })
        .collect()
}

/// `k − 1` source sizes: Gamma(16, scale 12.5) rounded, never below 50.
pub fn sample_site_sizes<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Vec<usize> {
    let g = Gamma::new(SITE_SIZE_SHAPE, SITE_SIZE_SCALE).expect("valid gamma");
    (1..k)
        .map(|_| (g.sample(rng).round() as usize).max(MIN_SITE_SIZE))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Density {
    Dense,
    Sparse,
}

impl fmt::Display for Density {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Density::Dense => "dense",
            Density::Sparse => "sparse",
        })
    }
}

impl FromStr for Density {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dense" => Ok(Density::Dense),
            "sparse" => Ok(Density::Sparse),
            _ => Err(Error::Config(format!("density must be dense or sparse, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Specification {
    I,
    II,
    III,
    IV,
    V,
}

impl Specification {
    pub const ALL: [Specification; 5] = [
        Specification::I,
        Specification::II,
        Specification::III,
        Specification::IV,
        Specification::V,
    ];

    /// Quadratic outcome terms, which the linear outcome fits miss.
    pub fn quadratic_outcome(self) -> bool {
        !matches!(self, Specification::I | Specification::III)
    }

    pub fn quadratic_propensity(self) -> bool {
        !matches!(self, Specification::I | Specification::II)
    }
}

impl fmt::Display for Specification {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for Specification {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Specification::ALL
            .into_iter()
            .find(|sp| sp.to_string().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("specification must be one of I..V, got {s:?}")))
    }
}

/// Centre of the linear outcome term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MuReference {
    /// Mean of the target covariate law.
    #[default]
    Population,
    /// Covariate mean of the generated target sample.
    Empirical,
}

impl FromStr for MuReference {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "population" => Ok(MuReference::Population),
            "empirical" => Ok(MuReference::Empirical),
            _ => Err(Error::Config(format!("mu reference must be population or empirical, got {s:?}"))),
        }
    }
}

impl fmt::Display for MuReference {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MuReference::Population => "population",
            MuReference::Empirical => "empirical",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpConfig {
    pub k: usize,
    pub p: usize,
    pub density: Density,
    pub specification: Specification,
    pub target_n: usize,
    pub seed: u64,
    pub mu_reference: MuReference,
    /// Covariates 3..P are Bernoulli instead of skew normal.
    pub binary_extra: bool,
}

impl DgpConfig {
    /// Binary extra covariates in the sparse design, continuous in the dense.
    pub fn new(k: usize, p: usize, density: Density, specification: Specification, seed: u64) -> Self {
        DgpConfig {
            k,
            p,
            density,
            specification,
            target_n: DEFAULT_TARGET_N,
            seed,
            mu_reference: MuReference::Population,
            binary_extra: density == Density::Sparse && p > 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config(format!("K must be at least 2, got {}", self.k)));
        }
        if self.p < 2 {
            return Err(Error::Config(format!("P must be at least 2, got {}", self.p)));
        }
        if self.target_n < 2 * (self.p + 2) {
            return Err(Error::Config(format!("target_n {} too small for P = {}", self.target_n, self.p)));
        }
        Ok(())
    }

    fn location(&self, j: usize) -> f64 {
        0.15 + 0.05 * (-(j as f64)) / (self.p - 1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficients {
    pub beta0: Vec<f64>,
    pub beta1: Vec<f64>,
    /// Quadratic outcome coefficients, shared by both arms.
    pub beta2: Vec<f64>,
    pub alpha1: Vec<f64>,
    pub alpha2: Vec<f64>,
}

pub fn coefficients(cfg: &DgpConfig) -> Coefficients {
    let p = cfg.p;
    let beta0: Vec<f64> = linspace(0.4, 1.2, p).into_iter().map(|b| b / p as f64).collect();
    let beta1 = beta0.iter().map(|b| 3.0 * b).collect();
    let sp = cfg.specification;
    Coefficients {
        beta0,
        beta1,
        beta2: if sp.quadratic_outcome() { linspace(1.0, 2.0, p) } else { vec![0.0; p] },
        alpha1: linspace(0.5, -0.5, p),
        alpha2: if sp.quadratic_propensity() { linspace(0.15, -0.15, p) } else { vec![0.0; p] },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum CovariateLaw {
    SkewNormal(SkewNormalParams),
    Bernoulli(f64),
}

impl CovariateLaw {
    pub fn mean(&self) -> f64 {
        match self {
            CovariateLaw::SkewNormal(s) => s.mean(),
            CovariateLaw::Bernoulli(t) => *t,
        }
    }

    pub fn second_moment(&self) -> f64 {
        match self {
            CovariateLaw::SkewNormal(s) => s.second_moment(),
            CovariateLaw::Bernoulli(t) => *t,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<f64> {
        match self {
            CovariateLaw::SkewNormal(s) => sample_skew_normal(s, n, rng),
            CovariateLaw::Bernoulli(t) => {
                let b = Bernoulli::new(*t).expect("probability in [0, 1]");
                (0..n).map(|_| f64::from(u8::from(b.sample(rng)))).collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteDesign {
    pub site_id: String,
    pub n: usize,
    pub laws: Vec<CovariateLaw>,
    pub quadratic_propensity: bool,
}

fn laws(cfg: &DgpConfig, skew: &dyn Fn(usize) -> f64, target: bool) -> Vec<CovariateLaw> {
    (0..cfg.p)
        .map(|j| {
            if cfg.binary_extra && j >= 2 {
                let theta = if target { 0.5 } else { 0.45 + 0.1 * (j as f64 - 2.0) / 7.0 };
                CovariateLaw::Bernoulli(theta)
            } else {
                CovariateLaw::SkewNormal(SkewNormalParams {
                    location: cfg.location(j),
                    scale: 1.0,
                    skew: skew(j),
                })
            }
        })
        .collect()
}

pub fn target_laws(cfg: &DgpConfig) -> Vec<CovariateLaw> {
    laws(cfg, &|_| 0.0, true)
}

pub fn site_id(k: usize) -> String {
    if k == 0 {
        "target".to_string()
    } else {
        format!("source-{k:02}")
    }
}

/// Site designs, target first, for the given source sizes.
pub fn site_designs(cfg: &DgpConfig, source_sizes: &[usize]) -> Vec<SiteDesign> {
    let all: Vec<f64> = std::iter::once(cfg.target_n)
        .chain(source_sizes.iter().copied())
        .map(|n| n as f64)
        .collect();
    let q1 = quantile_type7(&all, 0.25);
    let q3 = quantile_type7(&all, 0.75);
    let kf = cfg.k as f64;
    let hi = quantile_type7(&all, (65.0 - kf / 10.0) / 100.0);
    let lo = quantile_type7(&all, (35.0 + kf / 10.0) / 100.0);
    let quad_ps = cfg.specification.quadratic_propensity();
    let mut out = vec![SiteDesign {
        site_id: site_id(0),
        n: cfg.target_n,
        laws: target_laws(cfg),
        // Under V the size rule only splits the sources; the target keeps a
        // linear propensity.
        quadratic_propensity: quad_ps && cfg.specification != Specification::V,
    }];
    for (i, &n) in source_sizes.iter().enumerate() {
        let nf = n as f64;
        let skew = match cfg.density {
            Density::Sparse => {
                if nf >= hi || nf <= lo {
                    2.0
                } else {
                    0.0
                }
            }
            Density::Dense => {
                let unit = 2.0 / cfg.p as f64;
                if nf >= q3 {
                    3.0 * unit
                } else if nf <= q1 {
                    -unit
                } else {
                    0.0
                }
            }
        };
        let sparse = cfg.density == Density::Sparse;
        out.push(SiteDesign {
            site_id: site_id(i + 1),
            n,
            laws: laws(cfg, &|j| if sparse && j >= 2 { 0.0 } else { skew }, false),
            quadratic_propensity: quad_ps && !(cfg.specification == Specification::V && mid(nf, q1, q3)),
        });
    }
    out
}

fn mid(n: f64, q1: f64, q3: f64) -> bool {
    n > q1 && n < q3
}

/// Population centre of the linear outcome term.
pub fn population_center(cfg: &DgpConfig) -> Vec<f64> {
    target_laws(cfg).iter().map(CovariateLaw::mean).collect()
}

/// One generated study. Potential outcomes stay here and never reach the
/// site datasets.
#[derive(Debug, Clone)]
pub struct GeneratedStudy {
    pub target: SiteDataset,
    pub sources: Vec<SiteDataset>,
    pub designs: Vec<SiteDesign>,
    pub center: Vec<f64>,
    /// `(Y(1), Y(0))` per site, target first.
    pub potential_outcomes: Vec<(Vec<f64>, Vec<f64>)>,
}

fn covariate_matrix<R: Rng + ?Sized>(design: &SiteDesign, rng: &mut R) -> DMatrix<f64> {
    let cols: Vec<Vec<f64>> = design.laws.iter().map(|l| l.sample(design.n, rng)).collect();
    DMatrix::from_fn(design.n, cols.len(), |r, c| cols[c][r])
}

pub fn generate_sites<R: Rng + ?Sized>(cfg: &DgpConfig, rng: &mut R) -> Result<GeneratedStudy> {
    cfg.validate()?;
    let sizes = sample_site_sizes(cfg.k, rng);
    let designs = site_designs(cfg, &sizes);
    let xs: Vec<DMatrix<f64>> = designs.iter().map(|d| covariate_matrix(d, rng)).collect();
    let center: Vec<f64> = match cfg.mu_reference {
        MuReference::Population => population_center(cfg),
        MuReference::Empirical => xs[0].row_mean().iter().copied().collect(),
    };
    let coef = coefficients(cfg);
    let noise = Normal::new(0.0, 1.5 * cfg.p as f64).expect("positive sd");
    let need = cfg.p + 2;
    let mut sites = Vec::with_capacity(designs.len());
    let mut potential = Vec::with_capacity(designs.len());
    for (design, x) in designs.iter().zip(&xs) {
        let n = design.n;
        let mut y1 = Vec::with_capacity(n);
        let mut y0 = Vec::with_capacity(n);
        let mut pi = Vec::with_capacity(n);
        for i in 0..n {
            let row = x.row(i);
            let mut lin0 = 0.0;
            let mut lin1 = 0.0;
            let mut quad = 0.0;
            let mut eta = 0.0;
            for j in 0..cfg.p {
                let v = row[j];
                lin0 += (v - center[j]) * coef.beta0[j];
                lin1 += (v - center[j]) * coef.beta1[j];
                quad += v * v * coef.beta2[j];
                eta += v * coef.alpha1[j];
                if design.quadratic_propensity {
                    eta += v * v * coef.alpha2[j];
                }
            }
            let eps: f64 = noise.sample(rng);
            y1.push(lin1 + quad + TRUE_EFFECT + eps);
            y0.push(lin0 + quad + eps);
            pi.push(expit(eta));
        }
        let mut a: Vec<u8> = Vec::new();
        for _ in 0..MAX_TREATMENT_DRAWS {
            a = pi.iter().map(|&p| u8::from(rng.random::<f64>() < p)).collect();
            let treated = a.iter().filter(|&&v| v == 1).count();
            if treated >= need && n - treated >= need {
                break;
            }
        }
        let y = (0..n).map(|i| if a[i] == 1 { y1[i] } else { y0[i] }).collect();
        sites.push(SiteDataset::new(design.site_id.clone(), x.clone(), a, y, OutcomeKind::Continuous)?);
        potential.push((y1, y0));
    }
    let target = sites.remove(0);
    Ok(GeneratedStudy {
        target,
        sources: sites,
        designs,
        center,
        potential_outcomes: potential,
    })
}

/// Study for replication `rep` of `cfg`, from its own derived stream.
pub fn generate_replication(cfg: &DgpConfig, rep: u64) -> Result<GeneratedStudy> {
    let mut rng: SimRng = SeedSpec::new(cfg.seed, rep, "dgp").rng();
    generate_sites(cfg, &mut rng)
}

/// Target-law expectation of `Y(1) − Y(0)` from closed-form moments.
pub fn true_tate(cfg: &DgpConfig) -> f64 {
    let coef = coefficients(cfg);
    let center = population_center(cfg);
    target_laws(cfg)
        .iter()
        .enumerate()
        .map(|(j, law)| (law.mean() - center[j]) * (coef.beta1[j] - coef.beta0[j]))
        .sum::<f64>()
        + TRUE_EFFECT
}

/// Monte Carlo evaluation of the same expectation: `(value, standard error)`.
pub fn true_tate_monte_carlo(cfg: &DgpConfig, draws: usize, seed: u64) -> (f64, f64) {
    let coef = coefficients(cfg);
    let center = population_center(cfg);
    let mut rng = SeedSpec::new(seed, 0, "truth").rng();
    let laws = target_laws(cfg);
    let mut sum = DVector::<f64>::zeros(draws);
    for (j, law) in laws.iter().enumerate() {
        let d = coef.beta1[j] - coef.beta0[j];
        for (s, v) in sum.iter_mut().zip(law.sample(draws, &mut rng)) {
            *s += (v - center[j]) * d;
        }
    }
    let n = draws as f64;
    let mean = sum.mean();
    let var = sum.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean + TRUE_EFFECT, (var / n).sqrt())
}
