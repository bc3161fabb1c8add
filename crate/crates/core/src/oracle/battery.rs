//! Checks of every identification claim against exact enumeration, each
//! reported as a named pass/fail result.

use std::fmt;

use rand::Rng as _;
use rayon::prelude::*;
use serde::Serialize;

use super::*;
use crate::bounds::{mean, sample_sd, BetaLowerSign, InfluenceComponents};
use crate::rng::{derive_seed, rng_from};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClaimResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for ClaimResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{status} {}: {}", self.name, self.detail)
    }
}

/// How the `ψ` denominators are chosen from the signs of the `β` bounds.
/// `Swapped` inverts the choice and exists as a negative control.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum DenominatorRule {
    Correct,
    Swapped,
}

impl DenominatorRule {
    pub fn psi_bounds(self, b: &PopulationBounds) -> (f64, f64) {
        let (a_l, a_u) = (b.alpha_l, b.alpha_u);
        let (den_l, den_u) = match self {
            Self::Correct => (
                if b.beta_l > 0.0 { a_u } else { a_l },
                if b.beta_u > 0.0 { a_l } else { a_u },
            ),
            Self::Swapped => (
                if b.beta_l > 0.0 { a_l } else { a_u },
                if b.beta_u > 0.0 { a_u } else { a_l },
            ),
        };
        (b.beta_l * b.mean_lambda0 / den_l, b.beta_u * b.mean_lambda0 / den_u)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BatteryOptions {
    pub seed: u64,
    pub rule: DenominatorRule,
    /// Sample size for the estimator-consistency claim; `None` skips it.
    pub consistency_n: Option<usize>,
    pub consistency_dgps: usize,
}

impl Default for BatteryOptions {
    fn default() -> Self {
        Self {
            seed: 20_240_601,
            rule: DenominatorRule::Correct,
            consistency_n: Some(100_000),
            consistency_dgps: 20,
        }
    }
}

pub fn run_battery(options: &BatteryOptions) -> Vec<ClaimResult> {
    let seed = options.seed;
    let mut out = vec![
        non_identification(),
        decomposition_identity(seed, 50),
        bounds_contain_truth(seed, 200),
        mixture_sharpness(),
        perfect_prediction_collapse(seed, 20),
        no_selection_collapse(seed, 20),
        sign_cases(options.rule),
        alpha_sharpness(seed, 10),
        alpha_upper_attainable_range(seed, 10),
    ];
    if let Some(n) = options.consistency_n {
        out.push(sign_resolution(seed, n, options.consistency_dgps));
    }
    out
}

fn claim(name: &'static str, passed: bool, detail: impl Into<String>) -> ClaimResult {
    ClaimResult {
        name,
        passed,
        detail: detail.into(),
    }
}

fn non_identification() -> ClaimResult {
    let name = "non-identification witness";
    let (Ok(a), Ok(b)) = (non_identification_dgp(1.0, 0.0), non_identification_dgp(0.0, 1.0)) else {
        return claim(name, false, "could not build the witness laws");
    };
    let gap = a.exact_law().max_difference(&b.exact_law());
    let (Ok(ea), Ok(eb)) = (a.estimands(), b.estimands()) else {
        return claim(name, false, "estimands undefined");
    };
    let passed = gap <= EXACT_SLACK
        && ea.psi == Some(1.0)
        && eb.psi == Some(0.0)
        && ea.bounds == eb.bounds
        && (ea.bounds.psi_l, ea.bounds.psi_u) == (0.0, 1.0);
    claim(
        name,
        passed,
        format!(
            "law gap {gap:e}, psi {:?} vs {:?}, psi bounds [{}, {}]",
            ea.psi, eb.psi, ea.bounds.psi_l, ea.bounds.psi_u
        ),
    )
}

fn decomposition_identity(seed: u64, count: usize) -> ClaimResult {
    let mut worst: f64 = 0.0;
    for j in 0..count {
        let dgp = random_dgp(&mut rng_from(seed, &[1, j as u64]), &RandomDgpSpec::default());
        let Ok(e) = dgp.estimands() else {
            return claim("decomposition identity", false, format!("law {j} has no always-selected mass"));
        };
        let psi = e.psi.unwrap_or(0.0);
        worst = worst.max((psi * e.alpha - e.beta * e.always_selected).abs());
    }
    claim(
        "decomposition identity",
        worst <= 1e-10,
        format!("max |psi*alpha - beta*P(always selected)| = {worst:e} over {count} laws"),
    )
}

fn bounds_contain_truth(seed: u64, count: usize) -> ClaimResult {
    let failures: Vec<usize> = (0..count)
        .filter(|&j| {
            let dgp = random_dgp(&mut rng_from(seed, &[2, j as u64]), &RandomDgpSpec::default());
            !dgp.estimands().is_ok_and(|e| e.bounds_contain_truth())
        })
        .collect();
    claim(
        "population bounds contain truth",
        failures.is_empty(),
        format!("{} of {count} laws violate containment {failures:?}", failures.len()),
    )
}

/// Resolution of the grid search over component means.
pub const MIXTURE_RESOLUTION: f64 = 1e-3;

fn mixture_sharpness() -> ClaimResult {
    let hs = [0.0, 0.1, 0.25, 0.5, 0.75, 0.9, 1.0];
    let ps = [0.1, 0.3, 0.5, 0.7, 0.9, 0.999];
    let mut bad = Vec::new();
    for &h in &hs {
        for &p in &ps {
            let ok = lemma1_certify(h, p, MIXTURE_RESOLUTION).is_ok_and(|c| {
                c.attained
                    && c.valid
                    && (c.search_min - c.bounds.lower).abs() <= MIXTURE_RESOLUTION
                    && (c.search_max - c.bounds.upper).abs() <= MIXTURE_RESOLUTION
            });
            if !ok {
                bad.push((h, p));
            }
        }
    }
    claim(
        "mixture mean bounds sharp and valid",
        bad.is_empty(),
        format!("{} (H, p) pairs checked, failures {bad:?}", hs.len() * ps.len()),
    )
}

fn perfect_prediction_collapse(seed: u64, count: usize) -> ClaimResult {
    let mut worst: f64 = 0.0;
    for j in 0..count {
        let dgp = perfect_prediction_dgp(&mut rng_from(seed, &[3, j as u64]));
        match dgp.population_bounds() {
            Ok(b) => worst = worst.max((b.alpha_u - b.alpha_l).abs()).max((b.beta_u - b.beta_l).abs()),
            Err(_) => worst = f64::INFINITY,
        }
    }
    claim(
        "perfect-prediction collapse",
        worst <= EXACT_SLACK,
        format!("max bound width {worst:e} over {count} laws"),
    )
}

fn no_selection_collapse(seed: u64, count: usize) -> ClaimResult {
    let mut worst: f64 = 0.0;
    for j in 0..count {
        let dgp = no_selection_dgp(&mut rng_from(seed, &[4, j as u64]));
        let law = dgp.exact_law();
        let avg = |f: &dyn Fn(&PointLaw) -> f64| law.weights.iter().zip(&law.points).map(|(w, l)| w * f(l)).sum::<f64>();
        let wald = avg(&|l| l.mu[1] - l.mu[0]) / avg(&|l| l.theta1[1] - l.theta1[0]);
        match dgp.population_bounds() {
            Ok(b) => worst = worst.max((b.psi_l - wald).abs()).max((b.psi_u - wald).abs()),
            Err(_) => worst = f64::INFINITY,
        }
    }
    claim(
        "no-selection Wald collapse",
        worst <= EXACT_SLACK,
        format!("max |psi bound - Wald| = {worst:e} over {count} laws"),
    )
}

/// Extremes of `β·E{λ_0}/α` over the `(α, β)` box, for `α_ℓ > 0`.
fn box_extremes(b: &PopulationBounds) -> (f64, f64) {
    let corners = [
        b.beta_l / b.alpha_l,
        b.beta_l / b.alpha_u,
        b.beta_u / b.alpha_l,
        b.beta_u / b.alpha_u,
    ]
    .map(|r| r * b.mean_lambda0);
    (
        corners.iter().copied().fold(f64::INFINITY, f64::min),
        corners.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    )
}

fn sign_cases(rule: DenominatorRule) -> ClaimResult {
    let mut details = Vec::new();
    let mut passed = true;
    for (case, dgp) in sign_case_dgps() {
        let Ok(e) = dgp.estimands() else {
            return claim("psi denominator selection", false, "sign-case law invalid");
        };
        let b = e.bounds;
        let (lo, hi) = rule.psi_bounds(&b);
        let (box_lo, box_hi) = box_extremes(&b);
        let psi = e.psi.unwrap_or(f64::NAN);
        let ok = SignCase::of(&b) == case
            && b.alpha_l > 0.0
            && (lo - box_lo).abs() <= EXACT_SLACK
            && (hi - box_hi).abs() <= EXACT_SLACK
            && lo <= psi + EXACT_SLACK
            && psi <= hi + EXACT_SLACK;
        passed &= ok;
        details.push(format!("{case:?}: [{lo:.4}, {hi:.4}] vs box [{box_lo:.4}, {box_hi:.4}]"));
    }
    claim("psi denominator selection", passed, details.join("; "))
}

/// Strata consistent with the observed `(Z, S, A)` law at a point when the
/// survivor-complier share is `a`; `None` if some stratum would be negative.
fn strata_with_alpha(law: &PointLaw, a: f64) -> Option<StratumProbs> {
    let always_treated = law.theta1[0];
    let untreated = law.theta0[0] - a;
    let s = [
        1.0 - law.lambda[1],
        law.theta0[1] - untreated,
        law.theta1[1] - a - always_treated,
        untreated,
        a,
        always_treated,
    ];
    s.iter().all(|&v| v >= -EXACT_SLACK).then(|| StratumProbs::from_array(s.map(|v| v.max(0.0))))
}

/// Random coordinate search over laws observationally equivalent to `base`
/// (outcome probabilities must be equal across strata). Returns the smallest
/// and largest `α` found.
pub fn alpha_search(base: &DiscreteDGP, rng: &mut Rng, iterations: usize) -> (f64, f64) {
    let target = base.exact_law();
    let laws: Vec<PointLaw> = (0..base.points().len()).map(|k| base.point_law(k)).collect();
    let weights: Vec<f64> = base.points().iter().map(|p| p.weight).collect();
    let start: Vec<f64> = base.points().iter().map(|p| p.strata.survivor_complier).collect();
    let alpha = |a: &[f64]| weights.iter().zip(a).map(|(w, v)| w * v).sum::<f64>();
    let equivalent = |a: &[f64]| -> bool {
        let mut points = base.points().to_vec();
        for (k, p) in points.iter_mut().enumerate() {
            match strata_with_alpha(&laws[k], a[k]) {
                Some(s) => p.strata = s,
                None => return false,
            }
        }
        DiscreteDGP::new(points).is_ok_and(|d| d.exact_law().max_difference(&target) <= 1e-12)
    };
    let mut extremes = [0.0; 2];
    for (slot, sign) in [(0, -1.0), (1, 1.0)] {
        let mut a = start.clone();
        for it in 0..iterations {
            let k = rng.random_range(0..a.len());
            let scale = 0.5 * (1e-4f64 / 0.5).powf(it as f64 / iterations as f64);
            let mut cand = a.clone();
            cand[k] += sign * scale * rng.random::<f64>();
            if alpha(&cand) * sign > alpha(&a) * sign && equivalent(&cand) {
                a = cand;
            }
        }
        extremes[slot] = alpha(&a);
    }
    (extremes[0], extremes[1])
}

fn outcome_free_dgp(seed: u64, j: usize, untreated_dominates: bool) -> DiscreteDGP {
    let mut rng = rng_from(seed, &[5, j as u64, u64::from(untreated_dominates)]);
    let mut dgp = random_dgp(&mut rng, &RandomDgpSpec { max_points: 6, ..RandomDgpSpec::default() });
    let n = dgp.points.len();
    for (k, p) in dgp.points.iter_mut().enumerate() {
        p.outcomes = OutcomeProbs::uniform(0.5);
        let mut s = p.strata.to_array();
        let (sc1, nt) = (Stratum::SelectionComplierTreated.index(), Stratum::AlwaysSelectedUntreated.index());
        if untreated_dominates == (s[sc1] > s[nt]) {
            s.swap(sc1, nt);
        }
        if !untreated_dominates && k + 1 == n && s[sc1] <= s[nt] + 0.05 {
            // Guarantee a strict gap somewhere.
            s[sc1] += 0.1;
            let total: f64 = s.iter().sum();
            s = s.map(|v| v / total);
        }
        p.strata = StratumProbs::from_array(s);
    }
    dgp
}

/// Grid resolution for the sharpness search.
pub const SHARPNESS_RESOLUTION: f64 = 1e-2;

fn alpha_sharpness(seed: u64, count: usize) -> ClaimResult {
    let mut worst: f64 = 0.0;
    for j in 0..count {
        let dgp = outcome_free_dgp(seed, j, true);
        let Ok(b) = dgp.population_bounds() else {
            return claim("alpha bounds sharp", false, "law without always-selected mass");
        };
        let (lo, hi) = alpha_search(&dgp, &mut rng_from(seed, &[6, j as u64]), 4000);
        worst = worst.max((lo - b.alpha_l).abs()).max((hi - b.alpha_u).abs());
    }
    claim(
        "alpha bounds sharp",
        worst <= SHARPNESS_RESOLUTION,
        format!("max search gap {worst:.2e} over {count} laws where untreated always-selected outweigh treated selection-compliers"),
    )
}

/// The largest `α` compatible with the observed law is
/// `E[min{θ_0(0), θ_1(1) − θ_0(1)}]`, which falls short of `α_u` wherever
/// treated selection-compliers outnumber untreated always-selected units.
pub fn attainable_alpha_max(dgp: &DiscreteDGP) -> f64 {
    dgp.points()
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let l = dgp.point_law(k);
            p.weight * l.theta0[0].min(l.theta1[1] - l.theta1[0])
        })
        .sum()
}

fn alpha_upper_attainable_range(seed: u64, count: usize) -> ClaimResult {
    let mut worst: f64 = 0.0;
    let mut max_gap: f64 = 0.0;
    for j in 0..count {
        let dgp = outcome_free_dgp(seed, j, false);
        let Ok(b) = dgp.population_bounds() else {
            return claim("alpha upper bound attainable range", false, "law without always-selected mass");
        };
        let (_, hi) = alpha_search(&dgp, &mut rng_from(seed, &[7, j as u64]), 4000);
        let analytic = attainable_alpha_max(&dgp);
        worst = worst.max((hi - analytic).abs());
        max_gap = max_gap.max(b.alpha_u - analytic);
    }
    claim(
        "alpha upper bound attainable range",
        worst <= SHARPNESS_RESOLUTION,
        format!("search max matches E[min(theta0(0), theta1(1)-theta0(1))] within {worst:.2e}; alpha_u exceeds it by up to {max_gap:.3}"),
    )
}

/// Per-bound deviations in Monte Carlo standard errors for one sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConsistencyCheck {
    /// `(estimate − truth) / se` for `α_ℓ, α_u, β_ℓ, β_u`.
    pub z_scores: [f64; 4],
}

impl ConsistencyCheck {
    pub fn within(&self, k: f64) -> bool {
        self.z_scores.iter().all(|z| z.abs() <= k)
    }
}

/// Compares the influence-function bound estimators, fed exact nuisances,
/// to the population bounds on one sample of size `n`.
pub fn consistency_check(dgp: &DiscreteDGP, n: usize, sign: BetaLowerSign, seed: u64) -> Result<ConsistencyCheck> {
    let truth = dgp.population_bounds()?;
    let (ds, index) = dgp.sample(n, &mut rng_from(seed, &[]))?;
    let ns = dgp.exact_nuisances(&index, 0.01)?;
    let ic = InfluenceComponents::with_sign(&ns, &ds, sign);
    let root_n = (n as f64).sqrt();
    let lam = mean(&ic.phi0_s);
    let standardize = |diff: f64, sd: f64| {
        if sd > 0.0 {
            diff / (sd / root_n)
        } else if diff.abs() <= 1e-12 {
            0.0
        } else {
            f64::INFINITY
        }
    };
    let z_alpha = |v: &[f64], target: f64| standardize(mean(v) - target, sample_sd(v));
    let z_beta = |num: &[f64], target: f64| {
        let est = mean(num) / lam;
        let scores: Vec<f64> = num.iter().zip(&ic.phi0_s).map(|(b, s)| (b - est * s) / lam).collect();
        standardize(est - target, sample_sd(&scores))
    };
    Ok(ConsistencyCheck {
        z_scores: [
            z_alpha(&ic.alpha_l, truth.alpha_l),
            z_alpha(&ic.alpha_u, truth.alpha_u),
            z_beta(&ic.beta_l_num, truth.beta_l),
            z_beta(&ic.beta_u_num, truth.beta_u),
        ],
    })
}

/// Laws for the consistency claim: random, with enough survivor-compliers
/// and selection differences that every indicator region has mass.
pub fn consistency_dgps(seed: u64, count: usize) -> Vec<DiscreteDGP> {
    (0..count)
        .map(|j| random_dgp(&mut rng_from(seed, &[8, j as u64]), &RandomDgpSpec::default()))
        .collect()
}

/// Tolerance, in Monte Carlo standard errors, for the consistency claim.
pub const CONSISTENCY_TOLERANCE: f64 = 3.0;

/// Runs both `β_ℓ` sign candidates; returns, per sign, how many laws passed.
pub fn resolve_beta_sign(seed: u64, n: usize, count: usize) -> Vec<(BetaLowerSign, usize, f64)> {
    let dgps = consistency_dgps(seed, count);
    [BetaLowerSign::Plus, BetaLowerSign::Minus]
        .into_iter()
        .map(|sign| {
            let checks: Vec<Option<ConsistencyCheck>> = dgps
                .par_iter()
                .enumerate()
                .map(|(j, d)| consistency_check(d, n, sign, derive_seed(seed, &[9, j as u64])).ok())
                .collect();
            let passed = checks
                .iter()
                .filter(|c| c.is_some_and(|c| c.within(CONSISTENCY_TOLERANCE)))
                .count();
            let worst = checks
                .iter()
                .map(|c| c.map_or(f64::INFINITY, |c| c.z_scores.iter().fold(0.0f64, |m, z| m.max(z.abs()))))
                .fold(0.0, f64::max);
            (sign, passed, worst)
        })
        .collect()
}

fn sign_resolution(seed: u64, n: usize, count: usize) -> ClaimResult {
    let results = resolve_beta_sign(seed, n, count);
    let passing: Vec<BetaLowerSign> = results
        .iter()
        .filter(|(_, passed, _)| *passed == count)
        .map(|(s, _, _)| *s)
        .collect();
    let detail = results
        .iter()
        .map(|(s, p, w)| format!("{s:?}: {p}/{count} laws within 3 SE (max |z| {w:.2})"))
        .collect::<Vec<_>>()
        .join("; ");
    claim(
        "estimator consistency and beta_l sign",
        passing == [BetaLowerSign::Plus],
        detail,
    )
}
