//! Site datasets, validation and seed plumbing.

mod csv;
mod seed;

pub use self::csv::{load_sites_csv, read_sites_csv};
pub use seed::{derive_seed, SeedSpec, SimRng};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutcomeKind {
    Continuous,
    Binary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TreatmentArm {
    Control,
    Treated,
}

impl TreatmentArm {
    pub const BOTH: [TreatmentArm; 2] = [TreatmentArm::Treated, TreatmentArm::Control];

    pub fn indicator(self) -> u8 {
        match self {
            TreatmentArm::Treated => 1,
            TreatmentArm::Control => 0,
        }
    }

    pub fn matches(self, a: u8) -> bool {
        a == self.indicator()
    }

    pub fn name(self) -> &'static str {
        match self {
            TreatmentArm::Treated => "treated",
            TreatmentArm::Control => "control",
        }
    }
}

impl fmt::Display for TreatmentArm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SiteRole {
    Target,
    Source,
}

/// A pair of values indexed by treatment arm.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PerArm<T> {
    pub treated: T,
    pub control: T,
}

impl<T> PerArm<T> {
    pub fn new(treated: T, control: T) -> Self {
        PerArm { treated, control }
    }

    pub fn get(&self, arm: TreatmentArm) -> &T {
        match arm {
            TreatmentArm::Treated => &self.treated,
            TreatmentArm::Control => &self.control,
        }
    }

    pub fn get_mut(&mut self, arm: TreatmentArm) -> &mut T {
        match arm {
            TreatmentArm::Treated => &mut self.treated,
            TreatmentArm::Control => &mut self.control,
        }
    }

    pub fn map<U>(&self, mut f: impl FnMut(TreatmentArm, &T) -> U) -> PerArm<U> {
        PerArm {
            treated: f(TreatmentArm::Treated, &self.treated),
            control: f(TreatmentArm::Control, &self.control),
        }
    }

    pub fn try_build<E>(mut f: impl FnMut(TreatmentArm) -> std::result::Result<T, E>) -> std::result::Result<Self, E> {
        Ok(PerArm {
            treated: f(TreatmentArm::Treated)?,
            control: f(TreatmentArm::Control)?,
        })
    }
}

/// One site's patient table. Rows are patients.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteDataset {
    pub site_id: String,
    pub covariates: DMatrix<f64>,
    pub treatment: Vec<u8>,
    pub outcome: Vec<f64>,
    pub outcome_kind: OutcomeKind,
}

impl SiteDataset {
    /// Builds a dataset, checking only that the shapes agree. Content checks
    /// live in [`validate_dataset`].
    pub fn new(
        site_id: impl Into<String>,
        covariates: DMatrix<f64>,
        treatment: Vec<u8>,
        outcome: Vec<f64>,
        outcome_kind: OutcomeKind,
    ) -> Result<Self> {
        let n = covariates.nrows();
        if treatment.len() != n || outcome.len() != n {
            return Err(Error::Dimension(format!(
                "covariates have {} rows, treatment {}, outcome {}",
                n,
                treatment.len(),
                outcome.len()
            )));
        }
        Ok(SiteDataset {
            site_id: site_id.into(),
            covariates,
            treatment,
            outcome,
            outcome_kind,
        })
    }

    pub fn n(&self) -> usize {
        self.covariates.nrows()
    }

    pub fn p(&self) -> usize {
        self.covariates.ncols()
    }

    pub fn arm_count(&self, arm: TreatmentArm) -> usize {
        self.treatment.iter().filter(|&&a| arm.matches(a)).count()
    }

    /// Treatment as 0/1 reals, the response for a propensity fit.
    pub fn treatment_f64(&self) -> Vec<f64> {
        self.treatment.iter().map(|&a| f64::from(a)).collect()
    }

    /// Rows selected by `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> SiteDataset {
        let p = self.p();
        let covariates = DMatrix::from_fn(idx.len(), p, |r, c| self.covariates[(idx[r], c)]);
        SiteDataset {
            site_id: self.site_id.clone(),
            covariates,
            treatment: idx.iter().map(|&i| self.treatment[i]).collect(),
            outcome: idx.iter().map(|&i| self.outcome[i]).collect(),
            outcome_kind: self.outcome_kind,
        }
    }

    pub fn without_row(&self, row: usize) -> SiteDataset {
        let idx: Vec<usize> = (0..self.n()).filter(|&i| i != row).collect();
        self.subset(&idx)
    }

    pub fn arm_rows(&self, arm: TreatmentArm) -> Vec<usize> {
        (0..self.n()).filter(|&i| arm.matches(self.treatment[i])).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    Empty,
    NoTreated,
    NoControl,
    NonFinite { row: usize, col: usize },
    NonFiniteOutcome { row: usize },
    BadTreatment { row: usize, value: u8 },
    NonBinaryOutcome { row: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Empty => write!(f, "empty dataset"),
            Violation::NoTreated => write!(f, "no treated units"),
            Violation::NoControl => write!(f, "no control units"),
            Violation::NonFinite { row, col } => write!(f, "non-finite entry at ({row},{col})"),
            Violation::NonFiniteOutcome { row } => write!(f, "non-finite outcome at row {row}"),
            Violation::BadTreatment { row, value } => {
                write!(f, "treatment at row {row} is {value}, expected 0 or 1")
            }
            Violation::NonBinaryOutcome { row } => write!(f, "binary outcome at row {row} is not 0 or 1"),
        }
    }
}

/// Every invariant violation in `ds`; empty means valid.
pub fn validate_dataset(ds: &SiteDataset) -> Vec<Violation> {
    let mut out = Vec::new();
    if ds.n() == 0 {
        out.push(Violation::Empty);
        return out;
    }
    for r in 0..ds.n() {
        for c in 0..ds.p() {
            if !ds.covariates[(r, c)].is_finite() {
                out.push(Violation::NonFinite { row: r, col: c });
            }
        }
    }
    for (r, &y) in ds.outcome.iter().enumerate() {
        if !y.is_finite() {
            out.push(Violation::NonFiniteOutcome { row: r });
        } else if ds.outcome_kind == OutcomeKind::Binary && y != 0.0 && y != 1.0 {
            out.push(Violation::NonBinaryOutcome { row: r });
        }
    }
    let mut treated = 0;
    let mut control = 0;
    for (r, &a) in ds.treatment.iter().enumerate() {
        match a {
            1 => treated += 1,
            0 => control += 1,
            v => out.push(Violation::BadTreatment { row: r, value: v }),
        }
    }
    if treated == 0 {
        out.push(Violation::NoTreated);
    }
    if control == 0 {
        out.push(Violation::NoControl);
    }
    out
}

/// Column means of the covariate matrix.
pub fn covariate_means(ds: &SiteDataset) -> Result<DVector<f64>> {
    let n = ds.n();
    if n == 0 {
        return Err(Error::EmptyDataset(ds.site_id.clone()));
    }
    Ok(DVector::from_fn(ds.p(), |c, _| ds.covariates.column(c).iter().sum::<f64>() / n as f64))
}
