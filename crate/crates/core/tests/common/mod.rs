#![allow(dead_code)]

use fedtate_core::domain::{OutcomeKind, SeedSpec, SiteDataset};
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

/// Correctly specified two-covariate site: logistic treatment, linear outcome.
pub fn linear_site(id: &str, n: usize, shift: f64, bias: f64, seed: u64) -> SiteDataset {
    let mut rng = SeedSpec::new(seed, 0, id).rng();
    let x = DMatrix::from_fn(n, 2, |_, c| {
        rng.sample::<f64, _>(StandardNormal) + if c == 0 { shift } else { -0.5 * shift }
    });
    let noise = Normal::new(0.0, 1.0).unwrap();
    let mut a = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let lin = 0.4 * x[(i, 0)] - 0.3 * x[(i, 1)];
        let p = 1.0 / (1.0 + (-lin).exp());
        let ai = u8::from(rng.random::<f64>() < p);
        let mu = 0.5 + 0.8 * x[(i, 0)] - 0.6 * x[(i, 1)] + f64::from(ai) * (3.0 + 0.5 * x[(i, 0)] + bias);
        y.push(mu + noise.sample(&mut rng));
        a.push(ai);
    }
    SiteDataset::new(id, x, a, y, OutcomeKind::Continuous).unwrap()
}

pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    sab / (saa * sbb).sqrt()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

/// Random all-N influence layout: target patients first, then each source's
/// own patients; source vectors also load on target patients.
pub fn random_influence(seed: u64, n_t: usize, n_k: &[usize], delta_scale: f64) -> (Vec<f64>, Vec<Vec<f64>>, Vec<f64>, Vec<usize>) {
    let mut rng = SeedSpec::new(seed, 1, "random-influence").rng();
    let n: usize = n_t + n_k.iter().sum::<usize>();
    let mut target = vec![0.0; n];
    for v in target.iter_mut().take(n_t) {
        *v = rng.sample(StandardNormal);
    }
    let mut sources = Vec::new();
    let mut off = n_t;
    for &nk in n_k {
        let mut xi = vec![0.0; n];
        let load: f64 = rng.random_range(-0.5..0.5);
        for v in xi.iter_mut().take(n_t) {
            *v = load * rng.sample::<f64, _>(StandardNormal);
        }
        let scale: f64 = rng.random_range(0.5..2.0);
        for v in xi.iter_mut().skip(off).take(nk) {
            *v = scale * rng.sample::<f64, _>(StandardNormal);
        }
        off += nk;
        sources.push(xi);
    }
    let deltas = n_k.iter().map(|_| delta_scale * rng.sample::<f64, _>(StandardNormal)).collect();
    let mut sizes = vec![n_t];
    sizes.extend_from_slice(n_k);
    (target, sources, deltas, sizes)
}

/// Every point of the 0.01 grid over `{η ≥ 0, Σ η ≤ 1}` in `k` dimensions.
pub fn simplex_grid(k: usize, mut visit: impl FnMut(&[f64])) {
    fn rec(k: usize, left: i64, cur: &mut Vec<f64>, visit: &mut dyn FnMut(&[f64])) {
        if cur.len() == k {
            visit(cur);
            return;
        }
        for step in 0..=left {
            cur.push(step as f64 / 100.0);
            rec(k, left - step, cur, visit);
            cur.pop();
        }
    }
    rec(k, 100, &mut Vec::new(), &mut visit);
}

/// Stated skew-normal density `2/Ω φ(z) Φ(A z)`, `z = (x − Ξ)/Ω`.
pub fn skew_normal_pdf(x: f64, location: f64, scale: f64, skew: f64) -> f64 {
    use statrs::distribution::{Continuous, ContinuousCDF, Normal as StdNormal};
    let n = StdNormal::new(0.0, 1.0).unwrap();
    let z = (x - location) / scale;
    2.0 / scale * n.pdf(z) * n.cdf(skew * z)
}

pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, m: usize) -> f64 {
    let m = m + m % 2;
    let h = (b - a) / m as f64;
    let mut s = f(a) + f(b);
    for i in 1..m {
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(a + i as f64 * h);
    }
    s * h / 3.0
}

/// Kolmogorov–Smirnov distance of `draws` from the CDF obtained by
/// integrating the density numerically between consecutive order statistics.
pub fn ks_vs_quadrature(draws: &[f64], location: f64, scale: f64, skew: f64) -> f64 {
    let mut x = draws.to_vec();
    x.sort_by(f64::total_cmp);
    let f = |t: f64| skew_normal_pdf(t, location, scale, skew);
    let n = x.len() as f64;
    let lo = (location - 12.0 * scale).min(x[0]);
    let mut cdf = simpson(f, lo, x[0], 4000);
    let mut d: f64 = 0.0;
    for i in 0..x.len() {
        if i > 0 {
            cdf += simpson(f, x[i - 1], x[i], 8);
        }
        d = d.max((cdf - i as f64 / n).abs()).max(((i + 1) as f64 / n - cdf).abs());
    }
    d
}

/// Type-7 sample quantile, written out independently of the library.
pub fn quantile7(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * q;
    let j = h.floor() as usize;
    if j + 1 >= v.len() {
        return v[v.len() - 1];
    }
    v[j] + (h - j as f64) * (v[j + 1] - v[j])
}
