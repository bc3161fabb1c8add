use proptest::prelude::*;
use scate_core::bounds::{estimate_bounds, estimate_from_nuisances, BoundsOptions, InfluenceComponents};
use scate_core::data::{Dataset, Observation, Treatment};
use scate_core::learners::{FoldAssignment, LearnerSpec};
use scate_core::nuisance::{fit_nuisances, margin_diagnostics, phi, NuisanceSet, Target, MARGIN_TAUS};
use scate_core::oracle::{no_selection_dgp, non_identification_dgp, random_dgp, DiscreteDGP, RandomDgpSpec};
use scate_core::rng::rng_from;
use scate_core::simulation::{population_bounds, psi_grid, to_discrete_dgp, CovariateMode, SimScenario};

fn obs(z: bool, s: bool, a: bool, y: bool) -> Observation {
    Observation {
        covariates: vec![],
        instrument: z,
        selected: s,
        treatment: if s { Treatment::from_flag(a) } else { Treatment::Undefined },
        outcome: s.then_some(y),
    }
}

fn learner(choice: u8) -> LearnerSpec {
    match choice % 3 {
        0 => LearnerSpec::MarginalMean,
        1 => LearnerSpec::logistic(),
        _ => LearnerSpec::Knn { k: 15 },
    }
}

fn sample(seed: u64, n: usize) -> (DiscreteDGP, Dataset, Vec<usize>) {
    let dgp = random_dgp(&mut rng_from(seed, &[0]), &RandomDgpSpec::default());
    let (ds, index) = dgp.sample(n, &mut rng_from(seed, &[1])).unwrap();
    (dgp, ds, index)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn nuisances_are_coherent_and_bounded(seed in any::<u64>(), n in 200usize..1200, choice in any::<u8>(), k in 1usize..6) {
        let (_, ds, _) = sample(seed, n);
        let eps = 0.01;
        let folds = FoldAssignment::new(ds.len(), k, seed).unwrap();
        let ns = fit_nuisances(&ds, &learner(choice), &folds, eps).unwrap();
        prop_assert_eq!(ns.is_diagnostic(), k == 1);
        for i in 0..ds.len() {
            prop_assert!(ns.pi(i, 1) >= eps && ns.pi(i, 1) <= 1.0 - eps);
            prop_assert!((ns.pi(i, 0) + ns.pi(i, 1) - 1.0).abs() < 1e-15);
            for z in 0..2 {
                prop_assert!(ns.theta1(i, z) >= 0.0 && ns.theta0(i, z) >= 0.0);
                prop_assert!((ns.theta1(i, z) + ns.theta0(i, z) - ns.lambda(i, z)).abs() < 1e-15);
                prop_assert!(ns.lambda(i, z) <= 1.0);
                prop_assert!(ns.mu(i, z) >= 0.0 && ns.mu(i, z) <= ns.lambda(i, z));
            }
        }
        for z in 0..2 {
            for t in Target::ALL {
                prop_assert!(phi(&ns, &ds, z, t).iter().all(|v| v.abs() <= 1.0 / eps + 1.0));
            }
        }
    }

    #[test]
    fn reported_bounds_are_ordered_and_in_range(seed in any::<u64>(), n in 200usize..1200, choice in any::<u8>()) {
        let (_, ds, _) = sample(seed, n);
        let folds = FoldAssignment::new(ds.len(), 5, seed).unwrap();
        let ns = fit_nuisances(&ds, &learner(choice), &folds, 0.01).unwrap();
        let r = estimate_from_nuisances(&ns, &ds, BoundsOptions::default()).unwrap();
        prop_assert!(0.0 <= r.alpha_l.estimate && r.alpha_l.estimate <= r.alpha_u.estimate && r.alpha_u.estimate <= 1.0);
        prop_assert!(-1.0 <= r.beta_l.estimate && r.beta_l.estimate <= r.beta_u.estimate && r.beta_u.estimate <= 1.0);
        prop_assert!(-1.0 <= r.psi_l.estimate && r.psi_l.estimate <= r.psi_u.estimate && r.psi_u.estimate <= 1.0);
        for b in [r.alpha_l, r.alpha_u, r.beta_l, r.beta_u] {
            prop_assert!(b.se.is_some_and(f64::is_finite));
        }
    }

    #[test]
    fn estimates_ignore_row_order(seed in any::<u64>(), n in 100usize..800) {
        use rand::seq::SliceRandom;
        let (_, ds, _) = sample(seed, n);
        let mut order: Vec<usize> = (0..ds.len()).collect();
        order.shuffle(&mut rng_from(seed, &[2]));
        let shuffled = ds.reorder(&order).unwrap();
        let fit = |d: &Dataset| {
            let folds = FoldAssignment::new(d.len(), 1, 0).unwrap();
            let ns = fit_nuisances(d, &LearnerSpec::MarginalMean, &folds, 0.01).unwrap();
            estimate_from_nuisances(&ns, d, BoundsOptions::default()).unwrap()
        };
        let (a, b) = (fit(&ds), fit(&shuffled));
        for (x, y) in [(a.alpha_l, b.alpha_l), (a.alpha_u, b.alpha_u), (a.beta_l, b.beta_l), (a.beta_u, b.beta_u), (a.psi_l, b.psi_l), (a.psi_u, b.psi_u)] {
            prop_assert!((x.estimate - y.estimate).abs() < 1e-10);
        }
    }

    #[test]
    fn no_selection_gives_equal_psi_bounds(seed in any::<u64>(), n in 400usize..1500) {
        let dgp = no_selection_dgp(&mut rng_from(seed, &[3]));
        let (ds, _) = dgp.sample(n, &mut rng_from(seed, &[4])).unwrap();
        let folds = FoldAssignment::new(ds.len(), 5, seed).unwrap();
        let ns = fit_nuisances(&ds, &LearnerSpec::MarginalMean, &folds, 0.01).unwrap();
        prop_assume!((0..ds.len()).all(|i| ns.theta0(i, 0) > ns.theta0(i, 1)));
        let ic = InfluenceComponents::new(&ns, &ds);
        for i in 0..ds.len() {
            prop_assert!((ic.alpha_l[i] - ic.alpha_u[i]).abs() < 1e-12);
        }
        let r = estimate_bounds(&ic).unwrap();
        prop_assert!((r.psi_l.raw - r.psi_u.raw).abs() < 1e-12);
    }
}

/// Four rows reproducing the non-identification law cell frequencies exactly.
fn witness_rows() -> (DiscreteDGP, Dataset) {
    let dgp = non_identification_dgp(1.0, 0.0).unwrap();
    let rows = [
        obs(false, true, false, false),
        obs(false, false, false, false),
        obs(true, true, true, true),
        obs(true, true, true, false),
    ];
    (dgp, Dataset::new(vec![], &rows).unwrap())
}

#[test]
fn witness_law_with_exact_nuisances() {
    let (dgp, ds) = witness_rows();
    let ns = dgp.exact_nuisances(&[0; 4], 0.01).unwrap();
    let ic = InfluenceComponents::new(&ns, &ds);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!((mean(&ic.alpha_l) - 0.5).abs() < 1e-12);
    assert!((mean(&ic.alpha_u) - 1.0).abs() < 1e-12);
    assert!((mean(&ic.beta_u_num) - 0.5).abs() < 1e-12);
    let r = estimate_bounds(&ic).unwrap();
    assert!(r.psi_l.estimate.abs() < 1e-12);
    assert!((r.psi_u.estimate - 1.0).abs() < 1e-12);
    let g = scate_core::sensitivity::evaluate_grid(&ic, 2, 2).unwrap();
    assert!((g.cell(0, 1).estimate.unwrap().psi_star - 1.0).abs() < 1e-12);
}

#[test]
fn witness_law_full_sample_selection_rates() {
    let (_, ds) = witness_rows();
    let folds = FoldAssignment::new(ds.len(), 1, 0).unwrap();
    let ns = fit_nuisances(&ds, &LearnerSpec::MarginalMean, &folds, 0.01).unwrap();
    assert!(ns.is_diagnostic());
    for i in 0..ds.len() {
        assert_eq!(ns.lambda(i, 0), 0.5);
        assert_eq!(ns.lambda(i, 1), 1.0);
    }
}

#[test]
fn wald_collapse_without_selection() {
    let mut rows = Vec::new();
    for j in 0..10 {
        rows.push(obs(true, true, j < 8, j < 6));
        rows.push(obs(false, true, j < 3, j < 4));
    }
    let ds = Dataset::new(vec![], &rows).unwrap();
    let folds = FoldAssignment::new(ds.len(), 1, 0).unwrap();
    let ns = fit_nuisances(&ds, &LearnerSpec::MarginalMean, &folds, 0.01).unwrap();
    for i in 0..ds.len() {
        assert_eq!(ns.lambda(i, 0), 1.0);
        assert!((ns.theta1(i, 1) + ns.theta0(i, 1) - 1.0).abs() < 1e-15);
    }
    let r = estimate_from_nuisances(&ns, &ds, BoundsOptions::default()).unwrap();
    assert!((r.psi_l.estimate - 0.4).abs() < 1e-12, "{}", r.psi_l.estimate);
    assert!((r.psi_u.estimate - 0.4).abs() < 1e-12, "{}", r.psi_u.estimate);
}

#[test]
fn influence_value_examples() {
    let rows = [obs(true, true, true, true), obs(false, true, false, false)];
    let ds = Dataset::new(vec![], &rows).unwrap();
    let ns = NuisanceSet::from_parts(vec![0.5, 0.5], vec![[0.3, 0.6]; 2], vec![[0.1, 0.4]; 2], vec![[0.1, 0.2]; 2], 0.01)
        .unwrap();
    let s1 = phi(&ns, &ds, 1, Target::Selection);
    assert!((s1[0] - 1.4).abs() < 1e-12);
    assert!((s1[1] - 0.6).abs() < 1e-12);
}

#[test]
fn influence_means_match_population_targets() {
    let n = 60_000;
    for j in 0..4u64 {
        let dgp = random_dgp(&mut rng_from(21, &[j]), &RandomDgpSpec { max_points: 1, ..RandomDgpSpec::default() });
        let (ds, _) = dgp.sample(n, &mut rng_from(22, &[j])).unwrap();
        let folds = FoldAssignment::new(n, 5, j).unwrap();
        let ns = fit_nuisances(&ds, &LearnerSpec::MarginalMean, &folds, 0.01).unwrap();
        let law = dgp.point_law(0);
        for z in 0..2 {
            for t in Target::ALL {
                let truth = match t {
                    Target::Selection => law.lambda[z],
                    Target::SelectedOutcome => law.mu[z],
                    Target::SelectedOutcomeMinusOne => law.mu[z] - law.lambda[z],
                    Target::Treated => law.theta1[z],
                    Target::NotControl => 1.0 - law.theta0[z],
                };
                let v = phi(&ns, &ds, z, t);
                let m = v.iter().sum::<f64>() / n as f64;
                let sd = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
                assert!((m - truth).abs() <= 3.0 * sd / (n as f64).sqrt(), "{t} z={z}: {m} vs {truth}");
            }
        }
    }
}

#[test]
fn margins_far_from_boundary_are_empty() {
    let n = 5;
    let ns = NuisanceSet::from_parts(vec![0.5; n], vec![[0.4, 0.9]; n], vec![[0.0, 0.2]; n], vec![[0.1, 0.1]; n], 0.01)
        .unwrap();
    // θ_1(0) − θ_0(0) = 0.7 − 0.4 = 0.3 everywhere.
    let m = margin_diagnostics(&ns);
    assert_eq!(m.contrasts[0].fractions, [0.0; 3]);
}

#[test]
fn margins_on_the_boundary_are_fragile() {
    let n = 5;
    // μ_1 = λ_1 − λ_0.
    let ns = NuisanceSet::from_parts(vec![0.5; n], vec![[0.4, 0.9]; n], vec![[0.1, 0.6]; n], vec![[0.2, 0.5]; n], 0.01)
        .unwrap();
    let m = margin_diagnostics(&ns);
    assert_eq!(m.contrasts[1].fractions, [1.0; 3]);
    assert!(m.contrasts[1].fragile && m.fragile());
}

#[test]
fn margin_fractions_match_oracle_boundary_mass() {
    let sc = SimScenario::new(0.55, 0.3, 20_000, CovariateMode::Strong, 0);
    let dgp = to_discrete_dgp(&sc, 16).unwrap();
    let n = 20_000;
    let (_, index) = dgp.sample(n, &mut rng_from(31, &[])).unwrap();
    let ns = dgp.exact_nuisances(&index, 0.01).unwrap();
    let m = margin_diagnostics(&ns);
    for (t, &tau) in MARGIN_TAUS.iter().enumerate() {
        let mass = dgp.boundary_mass(tau);
        for j in 0..3 {
            let p = mass[j];
            let tol = 4.0 * (p * (1.0 - p) / n as f64).sqrt() + 1e-12;
            assert!((m.contrasts[j].fractions[t] - p).abs() <= tol, "contrast {j} tau {tau}");
        }
    }
}

#[test]
fn doubling_clip_keeps_standard_errors_finite() {
    let (_, ds, _) = sample(41, 800);
    let folds = FoldAssignment::new(ds.len(), 5, 1).unwrap();
    for eps in [0.01, 0.02] {
        let ns = fit_nuisances(&ds, &LearnerSpec::logistic(), &folds, eps).unwrap();
        let ic = InfluenceComponents::new(&ns, &ds);
        let max = ic.alpha_l.iter().chain(&ic.alpha_u).fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max <= 2.0 * (1.0 / eps + 1.0));
        let r = estimate_bounds(&ic).unwrap();
        assert!(r.alpha_u.se.unwrap().is_finite());
    }
}

#[test]
fn perfect_prediction_bounds_shrink_with_n() {
    let dgp = scate_core::oracle::perfect_prediction_dgp(&mut rng_from(51, &[]));
    let width = |n: usize| {
        let (ds, index) = dgp.sample(n, &mut rng_from(52, &[n as u64])).unwrap();
        let ns = dgp.exact_nuisances(&index, 0.01).unwrap();
        let r = estimate_bounds(&InfluenceComponents::new(&ns, &ds)).unwrap();
        (r.alpha_u.raw - r.alpha_l.raw).abs().max((r.beta_u.raw - r.beta_l.raw).abs())
    };
    assert!(width(40_000) < 0.02);
}

#[test]
fn covariates_never_widen_population_bounds() {
    for alpha in [0.2, 0.4, 0.6, 0.8, 1.0] {
        for psi in psi_grid(0.1) {
            let none = population_bounds(&SimScenario::new(alpha, psi, 1, CovariateMode::None, 0)).unwrap();
            for mode in [CovariateMode::Weak, CovariateMode::Strong] {
                let cov = population_bounds(&SimScenario::new(alpha, psi, 1, mode, 0)).unwrap();
                let slack = 1e-9;
                assert!(cov.alpha_l >= none.alpha_l - slack && cov.alpha_u <= none.alpha_u + slack);
                assert!(cov.beta_l >= none.beta_l - slack && cov.beta_u <= none.beta_u + slack);
                assert!(cov.psi_l.max(-1.0) >= none.psi_l.max(-1.0) - slack, "{alpha} {psi} {mode}");
                assert!(cov.psi_u.min(1.0) <= none.psi_u.min(1.0) + slack, "{alpha} {psi} {mode}");
            }
        }
    }
}
