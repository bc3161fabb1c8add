use proptest::prelude::*;
use rayon::prelude::*;
use scate_core::bounds::{estimate_bounds, InfluenceComponents};
use scate_core::learners::{FoldAssignment, LearnerSpec};
use scate_core::nuisance::fit_nuisances;
use scate_core::oracle::{random_dgp, RandomDgpSpec};
use scate_core::rng::{derive_seed, rng_from};
use scate_core::sensitivity::{evaluate_cell, evaluate_grid, write_grid};
use scate_core::simulation::{generate, CovariateMode, SimScenario};

fn components(seed: u64, n: usize) -> InfluenceComponents {
    let dgp = random_dgp(&mut rng_from(seed, &[0]), &RandomDgpSpec::default());
    let (ds, _) = dgp.sample(n, &mut rng_from(seed, &[1])).unwrap();
    let folds = FoldAssignment::new(ds.len(), 5, seed).unwrap();
    let ns = fit_nuisances(&ds, &LearnerSpec::MarginalMean, &folds, 0.01).unwrap();
    InfluenceComponents::new(&ns, &ds)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn cells_lie_between_psi_bounds(seed in any::<u64>(), n in 300usize..1500) {
        let ic = components(seed, n);
        let r = estimate_bounds(&ic).unwrap();
        // Consistent sign selection needs raw, uncrossed bounds and a usable denominator.
        prop_assume!(r.alpha_l.raw > 0.01 && r.alpha_l.raw <= r.alpha_u.raw && r.beta_l.raw <= r.beta_u.raw);
        let g = evaluate_grid(&ic, 6, 6).unwrap();
        for (_, e) in g.defined_cells() {
            prop_assert!(e.psi_star_raw >= r.psi_l.raw - 1e-10 && e.psi_star_raw <= r.psi_u.raw + 1e-10);
        }
    }

    #[test]
    fn psi_star_increases_in_delta2(seed in any::<u64>(), n in 300usize..1500) {
        let ic = components(seed, n);
        let r = estimate_bounds(&ic).unwrap();
        prop_assume!(r.alpha_l.raw > 0.01);
        let g = evaluate_grid(&ic, 5, 5).unwrap();
        for j1 in 0..5 {
            for j2 in 1..5 {
                let (a, b) = (g.cell(j1, j2 - 1), g.cell(j1, j2));
                if let (Some(a), Some(b)) = (a.estimate, b.estimate) {
                    prop_assert!(b.psi_star_raw >= a.psi_star_raw - 1e-12);
                }
            }
        }
    }

    #[test]
    fn standard_error_is_continuous_in_delta(seed in any::<u64>(), d1 in 0.0f64..1.0, d2 in 0.0f64..1.0) {
        let ic = components(seed, 800);
        let r = estimate_bounds(&ic).unwrap();
        prop_assume!(r.alpha_l.raw > 0.05);
        let h = 1e-7;
        let a = evaluate_cell(&ic, d1, d2);
        let b = evaluate_cell(&ic, (d1 + h).min(1.0), (d2 + h).min(1.0));
        prop_assert!((a.se - b.se).abs() < 1e-4);
    }
}

#[test]
fn upper_corner_is_beta_u_over_alpha_u() {
    let ic = components(3, 1000);
    let g = evaluate_grid(&ic, 3, 3).unwrap();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let lam = mean(&ic.phi0_s);
    let expected = (mean(&ic.beta_u_num) / lam) * lam / mean(&ic.alpha_u);
    assert!((g.cell(2, 2).estimate.unwrap().psi_star_raw - expected).abs() < 1e-12);
}

#[test]
fn export_has_one_row_per_cell_and_is_stable() {
    let ic = components(4, 600);
    let g = evaluate_grid(&ic, 2, 2).unwrap();
    let text = |g| {
        let mut buf = Vec::new();
        write_grid(g, &mut buf).unwrap();
        buf
    };
    let first = text(&g);
    assert_eq!(String::from_utf8(first.clone()).unwrap().lines().count(), 5);
    assert_eq!(first, text(&evaluate_grid(&ic, 2, 2).unwrap()));
}

/// Replications in which the interval at the cell whose implied `(α*, β*)`
/// equals the truth covers the true SCATE.
#[test]
fn truth_cell_interval_covers_true_effect() {
    let reps = 500;
    let sc = SimScenario::new(0.6, 0.10, 2000, CovariateMode::Strong, 0);
    let dgp = scate_core::simulation::to_discrete_dgp(&sc, 16).unwrap();
    let truth = dgp.estimands().unwrap();
    let hits: usize = (0..reps)
        .into_par_iter()
        .map(|r| {
            let sc = SimScenario { seed: derive_seed(91, &[r]), ..sc };
            let ds = generate(&sc).unwrap();
            let folds = FoldAssignment::new(ds.len(), 5, derive_seed(92, &[r])).unwrap();
            let ns = fit_nuisances(&ds, &LearnerSpec::logistic(), &folds, 0.01).unwrap();
            let ic = InfluenceComponents::new(&ns, &ds);
            let b = estimate_bounds(&ic).unwrap();
            let locate = |lo: f64, hi: f64, v: f64| if hi > lo { ((v - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.5 };
            let d1 = locate(b.alpha_l.raw, b.alpha_u.raw, truth.alpha);
            let d2 = locate(b.beta_l.raw, b.beta_u.raw, truth.beta);
            let e = evaluate_cell(&ic, d1, d2);
            usize::from(e.ci.0 <= 0.10 && 0.10 <= e.ci.1)
        })
        .sum();
    let rate = hits as f64 / reps as f64;
    assert!((rate - 0.95).abs() <= 0.03, "coverage {rate}");
}
