mod common;

use common::{linear_site, random_influence, rel_err, simplex_grid};
use fedtate_core::domain::TreatmentArm;
use fedtate_core::ensemble::{
    build_summaries_compressed, build_summaries_raw, combine, global_variance_compressed, global_variance_raw,
    objective, solve_weights, Penalty, QSummaries, DEFAULT_LAMBDA_GRID,
};
use fedtate_core::estimators::{AnchorKind, IfMode};
use fedtate_core::nuisance::DEFAULT_CLIP;
use fedtate_core::pooled::PooledAnalysis;
use fedtate_core::site::SiteConfig;
use nalgebra::DVector;
use proptest::prelude::*;

/// Literal per-patient loops over Ỹ and X̃.
fn double_loop(target: &[f64], sources: &[Vec<f64>], deltas: &[f64]) -> (f64, Vec<Vec<f64>>, Vec<f64>) {
    let n = target.len() as f64;
    let k = sources.len();
    let ytil: Vec<f64> = target.iter().map(|v| v / n).collect();
    let xtil = |i: usize, j: usize| (target[i] - sources[j][i]) / n - deltas[j] / n;
    let mut s_y = 0.0;
    let mut s_x = vec![vec![0.0; k]; k];
    let mut s_xy = vec![0.0; k];
    for i in 0..target.len() {
        s_y += ytil[i] * ytil[i];
        for a in 0..k {
            s_xy[a] += xtil(i, a) * ytil[i];
            for b in 0..k {
                s_x[a][b] += xtil(i, a) * xtil(i, b);
            }
        }
    }
    (s_y, s_x, s_xy)
}

fn q_literal(target: &[f64], sources: &[Vec<f64>], deltas: &[f64], eta: &[f64]) -> f64 {
    let n = target.len() as f64;
    (0..target.len())
        .map(|i| {
            let y = target[i] / n;
            let fit: f64 = (0..sources.len())
                .map(|j| eta[j] * ((target[i] - sources[j][i]) / n - deltas[j] / n))
                .sum();
            (y - fit).powi(2)
        })
        .sum()
}

#[test]
fn four_patient_summaries_match_double_loop() {
    let target = vec![1.5, -0.5, 0.0, 0.0];
    let sources = vec![vec![0.2, 0.1, -1.0, 0.0], vec![-0.3, 0.4, 0.0, 2.5]];
    let deltas = [0.25, -0.1];
    // Site 1 holds patient 2, site 2 patient 3.
    let s = build_summaries_raw(&target, &sources, &deltas, &[2, 1, 1]).unwrap();
    let (s_y, s_x, s_xy) = double_loop(&target, &sources, &deltas);
    assert!(rel_err(s.s_y, s_y) < 1e-14);
    for a in 0..2 {
        assert!(rel_err(s.s_xy[a], s_xy[a]) < 1e-14);
        for b in 0..2 {
            assert!(rel_err(s.s_x[(a, b)], s_x[a][b]) < 1e-14);
        }
    }
    // Hand value: s_y = (1.5² + 0.5²) / 16.
    assert!((s.s_y - 2.5 / 16.0).abs() < 1e-15);
}

#[test]
fn identical_influence_gives_zero_blocks() {
    let target = vec![1.0, -2.0, 0.5, 0.5];
    let s = build_summaries_raw(&target, &[target.clone(), target.clone()], &[0.0, 0.0], &[2, 1, 1]).unwrap();
    assert!(s.s_x.iter().all(|&v| v == 0.0));
    assert!(s.s_xy.iter().all(|&v| v == 0.0));
}

#[test]
fn raw_summaries_reject_mismatched_sizes() {
    assert!(build_summaries_raw(&[1.0, 2.0], &[vec![1.0]], &[0.0], &[1, 1]).is_err());
    assert!(build_summaries_raw(&[1.0, 2.0], &[vec![1.0, 0.0]], &[0.0], &[1, 2]).is_err());
}

#[test]
fn objective_matches_literal_loop() {
    for seed in 0..20 {
        let (t, s, d, sizes) = random_influence(seed, 7, &[5, 4, 6], 0.3);
        let summ = build_summaries_raw(&t, &s, &d, &sizes).unwrap();
        let eta = [0.2, 0.1 + seed as f64 / 100.0, 0.3];
        let q = objective(&summ, &eta, 0.0, Penalty::L1);
        assert!(rel_err(q, q_literal(&t, &s, &d, &eta)) < 1e-12, "seed {seed}");
    }
}

/// Compressed summaries and variance equal the raw ones on real site fits.
#[test]
fn compressed_path_equals_raw_path() {
    let target = linear_site("T", 150, 0.0, 0.0, 11);
    let sources = vec![
        linear_site("S1", 120, 0.3, 0.0, 12),
        linear_site("S2", 90, -0.2, 1.0, 13),
        linear_site("S3", 140, 0.5, -0.5, 14),
    ];
    for anchor in [AnchorKind::SourceModel, AnchorKind::TargetModel] {
        for mode in [IfMode::Simple, IfMode::General] {
            let cfg = SiteConfig {
                clip: DEFAULT_CLIP,
                if_mode: mode,
                anchor,
            };
            let pa = PooledAnalysis::new(&target, &sources, cfg).unwrap();
            for arm in TreatmentArm::BOTH {
                let inf = pa.influence(arm).unwrap();
                let raw = inf.summaries().unwrap();
                let gram = pa.target.gram(arm).unwrap();
                let triplets: Vec<_> = pa.sources.iter().map(|(_, s)| s.arms.get(arm).triplet(s.n)).collect();
                let comp = build_summaries_compressed(&gram, &triplets, &inf.deltas, anchor).unwrap();
                let tol = 1e-12;
                assert!(rel_err(raw.s_y, comp.s_y) < tol);
                let scale = raw.s_x.amax();
                assert!((&raw.s_x - &comp.s_x).amax() <= tol * scale, "{anchor:?} {mode:?} {arm}");
                assert!((&raw.s_xy - &comp.s_xy).amax() <= tol * raw.s_xy.amax().max(scale));
                assert_eq!(raw.site_sizes, comp.site_sizes);
                for lambda in [0.0, 1.0] {
                    let w = solve_weights(&raw, lambda, Penalty::L2).unwrap();
                    let se_raw = global_variance_raw(&w, &inf.target_if, &inf.source_ifs).unwrap();
                    let se_comp = global_variance_compressed(&w, &gram, &triplets, anchor).unwrap();
                    assert!(rel_err(se_raw, se_comp) < 1e-12);
                }
            }
        }
    }
}

/// With centred influence vectors, Q(η) is the estimated variance of the
/// combination plus its squared bias over N.
#[test]
fn objective_is_variance_plus_squared_bias() {
    let target = linear_site("T", 120, 0.0, 0.0, 21);
    let sources = vec![linear_site("A", 100, 0.4, 1.0, 22), linear_site("B", 110, -0.3, 0.0, 23)];
    let pa = PooledAnalysis::new(&target, &sources, SiteConfig::for_kind(target.outcome_kind)).unwrap();
    let inf = pa.influence(TreatmentArm::Treated).unwrap();
    let summ = inf.summaries().unwrap();
    let mut w = solve_weights(&summ, 0.0, Penalty::L1).unwrap();
    w.eta = DVector::from_vec(vec![0.5, 0.3, 0.2]);
    let se = global_variance_raw(&w, &inf.target_if, &inf.source_ifs).unwrap();
    let bias: f64 = inf.deltas.iter().zip(w.source_weights()).map(|(d, e)| d * e).sum();
    let q = objective(&summ, w.source_weights(), 0.0, Penalty::L1);
    assert!(rel_err(q, se * se + bias * bias / pa.n_total() as f64) < 1e-9);
}

#[test]
fn two_site_closed_form() {
    let mut interior = 0;
    for seed in 0..40 {
        // Source influence vanishes on target patients: ξ_T ⟂ ξ_1.
        let (t, mut s, _, sizes) = random_influence(seed, 30, &[25], 0.0);
        for v in s[0].iter_mut().take(30) {
            *v = 0.0;
        }
        let summ = build_summaries_raw(&t, &s, &[0.0], &sizes).unwrap();
        let num: f64 = t.iter().map(|v| v * v).sum();
        let den: f64 = t.iter().zip(&s[0]).map(|(a, b)| (a - b).powi(2)).sum();
        let closed = (num / den).clamp(0.0, 1.0);
        let w = solve_weights(&summ, 0.0, Penalty::L1).unwrap();
        assert!((w.eta[1] - closed).abs() < 1e-6, "seed {seed}: {} vs {closed}", w.eta[1]);
        if closed > 0.0 && closed < 1.0 {
            interior += 1;
        }
    }
    assert!(interior > 10);
}

#[test]
fn solver_beats_simplex_grid() {
    for k in 1..=3usize {
        for seed in 0..50u64 {
            let sizes: Vec<usize> = (0..k).map(|j| 6 + j).collect();
            let (t, s, d, ns) = random_influence(1000 * k as u64 + seed, 8, &sizes, 0.4);
            let summ = build_summaries_raw(&t, &s, &d, &ns).unwrap();
            for (lambda, pen) in [(0.0, Penalty::L1), (0.5, Penalty::L1), (0.5, Penalty::L2)] {
                let w = solve_weights(&summ, lambda, pen).unwrap();
                let f = objective(&summ, w.source_weights(), lambda, pen);
                assert!((f - w.objective_value).abs() <= 1e-12 * f.abs().max(1e-300));
                let mut best = f64::INFINITY;
                simplex_grid(k, |eta| best = best.min(objective(&summ, eta, lambda, pen)));
                assert!(f <= best + 1e-12 * best.abs(), "k={k} seed={seed}: {f} > {best}");
            }
        }
    }
}

fn flagged_mass(summ: &QSummaries, eta: &[f64]) -> f64 {
    summ.delta.iter().zip(eta).filter(|(d, _)| **d != 0.0).map(|(_, e)| e).sum()
}

fn penalty_value(summ: &QSummaries, eta: &[f64], pen: Penalty) -> f64 {
    let p = |e: f64| if pen == Penalty::L2 { e * e } else { e };
    summ.delta.iter().zip(eta).map(|(d, &e)| p(e) * d * d).sum()
}

/// Unequal δ² let weight migrate from a strongly to a weakly penalised
/// source, so the unweighted flagged mass can tick up while the penalty
/// itself falls. Frozen instance found by random search.
#[test]
fn flagged_mass_can_rise_with_unequal_deltas() {
    let (t, s, d, ns) = random_influence(7, 10, &[5, 7, 9], 0.5);
    let summ = build_summaries_raw(&t, &s, &d, &ns).unwrap();
    let w0 = solve_weights(&summ, 1e-3, Penalty::L1).unwrap();
    let w1 = solve_weights(&summ, 1e-2, Penalty::L1).unwrap();
    assert!(flagged_mass(&summ, w1.source_weights()) > flagged_mass(&summ, w0.source_weights()));
    assert!(
        penalty_value(&summ, w1.source_weights(), Penalty::L1) < penalty_value(&summ, w0.source_weights(), Penalty::L1)
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn penalty_non_increasing_in_lambda(seed in 0u64..1_000_000, k in 1usize..5, l2 in any::<bool>()) {
        let sizes: Vec<usize> = (0..k).map(|j| 5 + 2 * j).collect();
        let (t, s, d, ns) = random_influence(seed, 10, &sizes, 0.5);
        let summ = build_summaries_raw(&t, &s, &d, &ns).unwrap();
        let pen = if l2 { Penalty::L2 } else { Penalty::L1 };
        let mut prev = f64::INFINITY;
        for &lambda in &DEFAULT_LAMBDA_GRID {
            let w = solve_weights(&summ, lambda, pen).unwrap();
            prop_assert!(w.eta.iter().all(|&e| e >= 0.0));
            prop_assert!((w.eta.sum() - 1.0).abs() < 1e-9);
            let v = penalty_value(&summ, w.source_weights(), pen);
            prop_assert!(v <= prev + 1e-9 * prev.abs().max(1e-6), "λ={} penalty {} prev {}", lambda, v, prev);
            prev = v;
        }
    }

    #[test]
    fn flagged_mass_non_increasing_for_common_delta(
        seed in 0u64..1_000_000,
        k in 1usize..5,
        size in 0.05f64..1.0,
        zero_mask in 0u32..16,
    ) {
        let sizes: Vec<usize> = (0..k).map(|j| 5 + 2 * j).collect();
        let (t, s, d, ns) = random_influence(seed, 10, &sizes, 1.0);
        let deltas: Vec<f64> = d
            .iter()
            .enumerate()
            .map(|(j, v)| if zero_mask >> j & 1 == 1 { 0.0 } else { size.copysign(*v) })
            .collect();
        let summ = build_summaries_raw(&t, &s, &deltas, &ns).unwrap();
        let mut prev = f64::INFINITY;
        for &lambda in &DEFAULT_LAMBDA_GRID {
            let w = solve_weights(&summ, lambda, Penalty::L1).unwrap();
            let mass = flagged_mass(&summ, w.source_weights());
            prop_assert!(mass <= prev + 1e-9, "λ={} mass {} prev {}", lambda, mass, prev);
            prev = mass;
        }
    }

    #[test]
    fn anchor_form_equals_linear_form(mt in -5.0f64..5.0, ms in prop::collection::vec(-5.0f64..5.0, 3), raw in prop::collection::vec(0.0f64..1.0, 4)) {
        let total: f64 = raw.iter().sum::<f64>().max(1e-9);
        let eta: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let summ = build_summaries_raw(&[0.0; 4], &[vec![0.0; 4], vec![0.0; 4], vec![0.0; 4]], &[0.0; 3], &[1, 1, 1, 1]).unwrap();
        let mut w = solve_weights(&summ, 0.0, Penalty::L1).unwrap();
        w.eta = DVector::from_vec(eta.clone());
        let linear = eta[0] * mt + eta[1] * ms[0] + eta[2] * ms[1] + eta[3] * ms[2];
        prop_assert!((combine(mt, &ms, &w) - linear).abs() < 1e-12);
    }
}
