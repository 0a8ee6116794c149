//! Sufficient statistics of the weight objective.
//!
//! With all-N influence vectors ξ, define per patient
//! `Ỹᵢ = ξ_{i,T} / N` and `X̃_{i,k} = (ξ_{i,T} − ξ_{i,k} − δ_k) / N`.
//! Then `s_y − 2ηᵀs_xy + ηᵀs_xη` is the estimated variance of the combined
//! estimator plus `(Σ η_k δ_k)² / N`: the objective on the raw influence
//! scale divided by `N²`, which is also the scale λ is read on.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::AnchorKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QSummaries {
    pub s_y: f64,
    pub s_x: DMatrix<f64>,
    pub s_xy: DVector<f64>,
    /// `δ_k = μ̂_k − μ̂_T`, one per source.
    pub delta: DVector<f64>,
    /// Target first, then sources in the order of `delta`.
    pub site_sizes: Vec<usize>,
    pub n_total: usize,
}

impl QSummaries {
    pub fn n_sources(&self) -> usize {
        self.delta.len()
    }

    pub(crate) fn check(&self) -> Result<()> {
        let k = self.n_sources();
        if self.s_x.shape() != (k, k) || self.s_xy.len() != k || self.site_sizes.len() != k + 1 {
            return Err(Error::Dimension("summary blocks disagree on the number of sources".into()));
        }
        let finite = self.s_y.is_finite()
            && self.s_x.iter().all(|v| v.is_finite())
            && self.s_xy.iter().all(|v| v.is_finite())
            && self.delta.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite("summaries"));
        }
        Ok(())
    }

    pub(crate) fn validated(self) -> Result<Self> {
        self.check()?;
        Ok(self)
    }
}

/// Builds the summaries from per-patient all-N influence vectors, each of
/// length N with zeros outside the estimator's support.
pub fn build_summaries_raw(
    target_if: &[f64],
    source_ifs: &[Vec<f64>],
    deltas: &[f64],
    site_sizes: &[usize],
) -> Result<QSummaries> {
    let n = target_if.len();
    let k = source_ifs.len();
    if deltas.len() != k || site_sizes.len() != k + 1 || source_ifs.iter().any(|v| v.len() != n) {
        return Err(Error::Dimension("raw summaries inputs".into()));
    }
    if site_sizes.iter().sum::<usize>() != n {
        return Err(Error::Dimension("site sizes do not add up to the IF length".into()));
    }
    let nf = n as f64;
    let mut s_y = 0.0;
    let mut s_x = DMatrix::zeros(k, k);
    let mut s_xy = DVector::zeros(k);
    let mut xt = vec![0.0; k];
    for i in 0..n {
        let yt = target_if[i] / nf;
        for (kk, v) in xt.iter_mut().enumerate() {
            *v = (target_if[i] - source_ifs[kk][i]) / nf - deltas[kk] / nf;
        }
        s_y += yt * yt;
        for a in 0..k {
            s_xy[a] += xt[a] * yt;
            for b in a..k {
                s_x[(a, b)] += xt[a] * xt[b];
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            s_x[(a, b)] = s_x[(b, a)];
        }
    }
    QSummaries {
        s_y,
        s_x,
        s_xy,
        delta: DVector::from_column_slice(deltas),
        site_sizes: site_sizes.to_vec(),
        n_total: n,
    }
    .validated()
}

/// What the target site retains: the Gram matrix and column sums of the
/// per-patient basis `bᵢ = (φᵢ, tᵢ, xᵢ − x̄_T)` where φ is the target AIPW
/// influence and t the influence of the target outcome-model mean, both on
/// the site-local scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetGram {
    pub n: usize,
    pub gram: DMatrix<f64>,
    pub sums: DVector<f64>,
}

impl TargetGram {
    pub fn from_parts(phi: &[f64], t: &[f64], centered_x: &DMatrix<f64>) -> Result<TargetGram> {
        let n = phi.len();
        if t.len() != n || centered_x.nrows() != n {
            return Err(Error::Dimension("target gram inputs".into()));
        }
        let q = centered_x.ncols() + 2;
        let mut gram = DMatrix::zeros(q, q);
        let mut sums = DVector::zeros(q);
        let mut b = DVector::zeros(q);
        for i in 0..n {
            b[0] = phi[i];
            b[1] = t[i];
            for j in 0..centered_x.ncols() {
                b[j + 2] = centered_x[(i, j)];
            }
            gram += &b * b.transpose();
            sums += &b;
        }
        Ok(TargetGram { n, gram, sums })
    }

    pub fn p(&self) -> usize {
        self.gram.nrows() - 2
    }
}

/// One source's contribution: sums of its site-local influence values over
/// its own patients plus the tilt gradient c.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceTriplet {
    pub n: usize,
    pub if_sum: f64,
    pub if_sumsq: f64,
    /// Length p + 1, intercept component first (it multiplies a zero).
    pub gamma_gradient: DVector<f64>,
}

/// Coefficients turning the target basis into the target-patient part of a
/// source influence value: `bᵢᵀv = θ tᵢ + cᵀ(x̃ᵢ − τ)`.
fn source_vector(anchor: AnchorKind, c: &DVector<f64>, q: usize) -> DVector<f64> {
    let theta = f64::from(u8::from(anchor == AnchorKind::TargetModel));
    let mut v = DVector::zeros(q);
    v[1] = theta;
    for j in 2..q {
        v[j] = c[j - 1];
    }
    v
}

/// Builds the same summaries as [`build_summaries_raw`] from the target's
/// Gram matrix and per-source triplets.
pub fn build_summaries_compressed(
    target: &TargetGram,
    sources: &[SourceTriplet],
    deltas: &[f64],
    anchor: AnchorKind,
) -> Result<QSummaries> {
    let k = sources.len();
    let q = target.gram.nrows();
    if deltas.len() != k || sources.iter().any(|s| s.gamma_gradient.len() != q - 1) {
        return Err(Error::Dimension("compressed summaries inputs".into()));
    }
    let n_t = target.n as f64;
    let n_total: usize = target.n + sources.iter().map(|s| s.n).sum::<usize>();
    let nf = n_total as f64;
    let g = &target.gram;
    let sb = &target.sums;
    // Target-patient X̃ coefficients: (e₁ − v_k) / n_T on the basis.
    let u: Vec<DVector<f64>> = sources
        .iter()
        .map(|s| {
            let mut e = -source_vector(anchor, &s.gamma_gradient, q);
            e[0] += 1.0;
            e / n_t
        })
        .collect();
    let mut e1 = DVector::zeros(q);
    e1[0] = 1.0 / n_t;

    let s_y = g[(0, 0)] / (n_t * n_t);
    let mut s_x = DMatrix::zeros(k, k);
    let mut s_xy = DVector::zeros(k);
    for a in 0..k {
        let ga = g * &u[a];
        s_xy[a] = e1.dot(&ga) - deltas[a] / nf * sb.dot(&e1);
        for b in a..k {
            s_x[(a, b)] = u[b].dot(&ga) - deltas[b] / nf * sb.dot(&u[a]) - deltas[a] / nf * sb.dot(&u[b])
                + n_t * deltas[a] * deltas[b] / (nf * nf);
        }
    }
    for (j, s) in sources.iter().enumerate() {
        let nj = s.n as f64;
        for a in 0..k {
            for b in a..k {
                let mut v = nj * deltas[a] * deltas[b] / (nf * nf);
                if a == j {
                    v += deltas[b] * s.if_sum / (nj * nf);
                }
                if b == j {
                    v += deltas[a] * s.if_sum / (nj * nf);
                }
                if a == j && b == j {
                    v += s.if_sumsq / (nj * nj);
                }
                s_x[(a, b)] += v;
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            s_x[(a, b)] = s_x[(b, a)];
        }
    }
    let mut site_sizes = vec![target.n];
    site_sizes.extend(sources.iter().map(|s| s.n));
    QSummaries {
        s_y,
        s_x,
        s_xy,
        delta: DVector::from_column_slice(deltas),
        site_sizes,
        n_total,
    }
    .validated()
}
