mod common;

use common::{correlation, linear_site};
use fedtate_core::domain::{covariate_means, SiteDataset, TreatmentArm};
use fedtate_core::estimators::{
    compute_source_if, compute_target_if, source_terms, target_aipw, target_outcome_mean, AnchorKind, IfMode,
};
use fedtate_core::nuisance::{fit_outcomes, fit_propensity, DEFAULT_CLIP};
use fedtate_core::tilt::{solve_tilt, TargetMoments, TILT_MAX_ITER, TILT_TOL};

/// Relative root-mean-square distance between two influence vectors.
fn rms_gap(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

fn target_value(ds: &SiteDataset, arm: TreatmentArm) -> f64 {
    let ps = fit_propensity(ds).unwrap();
    let or = fit_outcomes(ds).unwrap();
    target_aipw(ds, &ps, &or, arm, DEFAULT_CLIP).unwrap().value
}

fn source_value(anchor: AnchorKind, ds_t: &SiteDataset, ds_k: &SiteDataset, arm: TreatmentArm) -> f64 {
    let or_t = fit_outcomes(ds_t).unwrap();
    let tm = TargetMoments {
        means: covariate_means(ds_t).unwrap(),
        n_target: ds_t.n(),
    };
    let tilt = solve_tilt(&ds_k.covariates, &tm, TILT_TOL, TILT_MAX_ITER).unwrap();
    let ps = fit_propensity(ds_k).unwrap();
    let or = fit_outcomes(ds_k).unwrap();
    source_terms(ds_k, &tilt, &ps, &or, arm, DEFAULT_CLIP)
        .unwrap()
        .value(anchor, target_outcome_mean(ds_t, &or_t, arm))
}

#[test]
fn target_if_tracks_jackknife() {
    let ds = linear_site("T", 200, 0.0, 0.0, 1);
    let ps = fit_propensity(&ds).unwrap();
    let or = fit_outcomes(&ds).unwrap();
    for arm in TreatmentArm::BOTH {
        let full = target_value(&ds, arm);
        let jack: Vec<f64> = (0..ds.n())
            .map(|i| ds.n() as f64 * (full - target_value(&ds.without_row(i), arm)))
            .collect();
        let general = compute_target_if(&ds, &ps, &or, arm, DEFAULT_CLIP, IfMode::General).unwrap();
        let simple = compute_target_if(&ds, &ps, &or, arm, DEFAULT_CLIP, IfMode::Simple).unwrap();
        let rg = correlation(&general, &jack);
        let rs = correlation(&simple, &jack);
        assert!(rg > 0.99, "{arm}: general {rg}");
        let eg = rms_gap(&general, &jack);
        let es = rms_gap(&simple, &jack);
        assert!(rg >= rs);
        assert!(eg < es, "{arm}: general gap {eg} simple gap {es}");
    }
}

#[test]
fn source_if_tracks_jackknife() {
    let ds_t = linear_site("T", 100, 0.0, 0.0, 2);
    let ds_k = linear_site("K", 100, 0.4, 0.0, 3);
    let or_t = fit_outcomes(&ds_t).unwrap();
    let tm = TargetMoments {
        means: covariate_means(&ds_t).unwrap(),
        n_target: ds_t.n(),
    };
    let tilt = solve_tilt(&ds_k.covariates, &tm, TILT_TOL, TILT_MAX_ITER).unwrap();
    let ps = fit_propensity(&ds_k).unwrap();
    let or = fit_outcomes(&ds_k).unwrap();
    let n_total = (ds_t.n() + ds_k.n()) as f64;
    for anchor in [AnchorKind::SourceModel, AnchorKind::TargetModel] {
        for arm in TreatmentArm::BOTH {
            let full = source_value(anchor, &ds_t, &ds_k, arm);
            let mut jack = Vec::new();
            for i in 0..ds_t.n() {
                jack.push(n_total * (full - source_value(anchor, &ds_t.without_row(i), &ds_k, arm)));
            }
            for i in 0..ds_k.n() {
                jack.push(n_total * (full - source_value(anchor, &ds_t, &ds_k.without_row(i), arm)));
            }
            let inf = compute_source_if(anchor, &ds_t, &or_t, &ds_k, &tilt, &ps, &or, arm, DEFAULT_CLIP, IfMode::General)
                .unwrap();
            let mut xi: Vec<f64> = inf.target_part.iter().map(|v| v * n_total / ds_t.n() as f64).collect();
            xi.extend(inf.source_part.iter().map(|v| v * n_total / ds_k.n() as f64));
            let r = correlation(&xi, &jack);
            assert!(r > 0.99, "{anchor:?} {arm}: {r}");
            let simple = compute_source_if(anchor, &ds_t, &or_t, &ds_k, &tilt, &ps, &or, arm, DEFAULT_CLIP, IfMode::Simple)
                .unwrap();
            let mut xs: Vec<f64> = simple.target_part.iter().map(|v| v * n_total / ds_t.n() as f64).collect();
            xs.extend(simple.source_part.iter().map(|v| v * n_total / ds_k.n() as f64));
            let eg = rms_gap(&xi, &jack);
            let es = rms_gap(&xs, &jack);
            assert!(eg < 0.5 * es, "{anchor:?} {arm}: general gap {eg} simple gap {es}");
        }
    }
}
