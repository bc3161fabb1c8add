//! Exact ground truth on finite discrete laws.
//!
//! A [`DiscreteDGP`] places a distribution over the six principal strata
//! that monotonicity admits at each covariate point. From it the observed law,
//! the nuisance functions, the causal estimands and the population bounds are
//! all evaluated in closed form, so every estimator can be checked against an
//! independent answer.

mod battery;

pub use battery::*;

use rand::Rng as _;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::bounds::psi_bounds;
use crate::data::{Dataset, Treatment};
use crate::error::{Error, Result};
use crate::nuisance::NuisanceSet;
use crate::rng::Rng;

/// Floating-point slack for exact identities.
pub const EXACT_SLACK: f64 = 1e-12;
pub const MAX_SUPPORT: usize = 16;

/// The six principal strata compatible with monotonicity, by potential
/// `(S⁰, S¹, A⁰, A¹)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stratum {
    /// `S⁰ = S¹ = 0`.
    NeverSelected,
    /// `S⁰ = 0, S¹ = 1, A¹ = 0`.
    SelectionComplierUntreated,
    /// `S⁰ = 0, S¹ = 1, A¹ = 1`.
    SelectionComplierTreated,
    /// `S⁰ = S¹ = 1, A⁰ = A¹ = 0`.
    AlwaysSelectedUntreated,
    /// `S⁰ = S¹ = 1, A⁰ = 0, A¹ = 1`.
    SurvivorComplier,
    /// `S⁰ = S¹ = 1, A⁰ = A¹ = 1`.
    AlwaysSelectedTreated,
}

impl Stratum {
    pub const ALL: [Stratum; 6] = [
        Self::NeverSelected,
        Self::SelectionComplierUntreated,
        Self::SelectionComplierTreated,
        Self::AlwaysSelectedUntreated,
        Self::SurvivorComplier,
        Self::AlwaysSelectedTreated,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn selected(self, z: usize) -> bool {
        match self {
            Self::NeverSelected => false,
            Self::SelectionComplierUntreated | Self::SelectionComplierTreated => z == 1,
            _ => true,
        }
    }

    /// `A^z`, or `None` when the stratum is not selected under `z`.
    pub fn treated(self, z: usize) -> Option<bool> {
        if !self.selected(z) {
            return None;
        }
        Some(match self {
            Self::SelectionComplierTreated | Self::AlwaysSelectedTreated => true,
            Self::SurvivorComplier => z == 1,
            _ => false,
        })
    }
}

/// Stratum probabilities at one covariate point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StratumProbs {
    pub never_selected: f64,
    pub selection_complier_untreated: f64,
    pub selection_complier_treated: f64,
    pub always_selected_untreated: f64,
    pub survivor_complier: f64,
    pub always_selected_treated: f64,
}

impl StratumProbs {
    pub fn from_array(p: [f64; 6]) -> Self {
        Self {
            never_selected: p[0],
            selection_complier_untreated: p[1],
            selection_complier_treated: p[2],
            always_selected_untreated: p[3],
            survivor_complier: p[4],
            always_selected_treated: p[5],
        }
    }

    /// Ordered as [`Stratum::ALL`].
    pub fn to_array(&self) -> [f64; 6] {
        [
            self.never_selected,
            self.selection_complier_untreated,
            self.selection_complier_treated,
            self.always_selected_untreated,
            self.survivor_complier,
            self.always_selected_treated,
        ]
    }

    pub fn get(&self, s: Stratum) -> f64 {
        self.to_array()[s.index()]
    }
}

/// Outcome probabilities `P(Y^z = 1 | stratum, x)`. The always-selected
/// strata that never change treatment share one value across arms
/// (exclusion); survivor-compliers carry one value per treatment level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutcomeProbs {
    pub selection_complier_untreated: f64,
    pub selection_complier_treated: f64,
    pub always_selected_untreated: f64,
    pub always_selected_treated: f64,
    /// `P(Y^{a=0} = 1 | survivor-complier)`.
    pub survivor_complier_untreated: f64,
    /// `P(Y^{a=1} = 1 | survivor-complier)`.
    pub survivor_complier_treated: f64,
}

impl OutcomeProbs {
    pub fn uniform(p: f64) -> Self {
        Self {
            selection_complier_untreated: p,
            selection_complier_treated: p,
            always_selected_untreated: p,
            always_selected_treated: p,
            survivor_complier_untreated: p,
            survivor_complier_treated: p,
        }
    }

    fn values(&self) -> [f64; 6] {
        [
            self.selection_complier_untreated,
            self.selection_complier_treated,
            self.always_selected_untreated,
            self.always_selected_treated,
            self.survivor_complier_untreated,
            self.survivor_complier_treated,
        ]
    }

    /// `P(Y^z = 1 | stratum)`, `None` where `Y^z` is undefined.
    pub fn get(&self, s: Stratum, z: usize) -> Option<f64> {
        if !s.selected(z) {
            return None;
        }
        Some(match s {
            Stratum::NeverSelected => unreachable!(),
            Stratum::SelectionComplierUntreated => self.selection_complier_untreated,
            Stratum::SelectionComplierTreated => self.selection_complier_treated,
            Stratum::AlwaysSelectedUntreated => self.always_selected_untreated,
            Stratum::AlwaysSelectedTreated => self.always_selected_treated,
            Stratum::SurvivorComplier if z == 1 => self.survivor_complier_treated,
            Stratum::SurvivorComplier => self.survivor_complier_untreated,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportPoint {
    pub x: Vec<f64>,
    pub weight: f64,
    /// `P(Z = 1 | X = x)`.
    pub pi1: f64,
    pub strata: StratumProbs,
    pub outcomes: OutcomeProbs,
}

impl SupportPoint {
    /// Nuisance values implied at this point.
    pub fn law(&self) -> PointLaw {
        let p = self;
        let mut law = PointLaw {
            pi1: p.pi1,
            lambda: [0.0; 2],
            theta1: [0.0; 2],
            theta0: [0.0; 2],
            mu: [0.0; 2],
        };
        for s in Stratum::ALL {
            let mass = p.strata.get(s);
            for z in 0..2 {
                let Some(a) = s.treated(z) else { continue };
                law.lambda[z] += mass;
                if a {
                    law.theta1[z] += mass;
                } else {
                    law.theta0[z] += mass;
                }
                law.mu[z] += mass * p.outcomes.get(s, z).expect("defined when selected");
            }
        }
        law
    }
}

/// Finite law over covariate points and principal strata. Only admissible
/// strata are representable, so monotonicity holds by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteDGP {
    points: Vec<SupportPoint>,
}

/// Exact nuisance values at one covariate point, indexed by arm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointLaw {
    pub pi1: f64,
    pub lambda: [f64; 2],
    pub theta1: [f64; 2],
    pub theta0: [f64; 2],
    pub mu: [f64; 2],
}

/// One atom of the observed law `P(X, Z, S, A, Y)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub point: usize,
    pub z: bool,
    pub s: bool,
    pub a: Treatment,
    pub y: Option<bool>,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExactLaw {
    pub weights: Vec<f64>,
    pub points: Vec<PointLaw>,
    pub cells: Vec<Cell>,
}

/// Per-arm observed rates implied by the exact law.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExactArmRates {
    pub selection_rate: f64,
    pub treated_rate: f64,
    pub treated_rate_selected: f64,
    pub outcome_rate_selected: f64,
}

impl ExactLaw {
    /// Largest absolute difference between matching atoms; infinite when the
    /// supports differ in shape.
    pub fn max_difference(&self, other: &ExactLaw) -> f64 {
        if self.cells.len() != other.cells.len() {
            return f64::INFINITY;
        }
        self.cells
            .iter()
            .zip(&other.cells)
            .map(|(a, b)| {
                if (a.point, a.z, a.s, a.a, a.y) == (b.point, b.z, b.s, b.a, b.y) {
                    (a.prob - b.prob).abs()
                } else {
                    f64::INFINITY
                }
            })
            .fold(0.0, f64::max)
    }

    fn total(&self, pred: impl Fn(&Cell) -> bool) -> f64 {
        self.cells.iter().filter(|c| pred(c)).map(|c| c.prob).sum()
    }

    /// `P(Y = 1 | S = 1, A = a, Z = z)`, `None` when the event has no mass.
    pub fn outcome_rate(&self, z: bool, a: bool) -> Option<f64> {
        let a = Treatment::from_flag(a);
        let den = self.total(|c| c.z == z && c.s && c.a == a);
        (den > 0.0).then(|| self.total(|c| c.z == z && c.s && c.a == a && c.y == Some(true)) / den)
    }

    pub fn arm_rates(&self, z: bool) -> ExactArmRates {
        let arm = self.total(|c| c.z == z);
        let sel = self.total(|c| c.z == z && c.s);
        let treated = self.total(|c| c.z == z && c.a.is_treated());
        let y = self.total(|c| c.z == z && c.s && c.y == Some(true));
        ExactArmRates {
            selection_rate: sel / arm,
            treated_rate: treated / arm,
            treated_rate_selected: treated / sel,
            outcome_rate_selected: y / sel,
        }
    }
}

/// Population bounds from the exact nuisances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PopulationBounds {
    pub alpha_l: f64,
    pub alpha_u: f64,
    pub beta_l: f64,
    pub beta_u: f64,
    pub mean_lambda0: f64,
    /// Infinite when the selected `α` denominator is zero.
    pub psi_l: f64,
    pub psi_u: f64,
}

impl PopulationBounds {
    pub fn from_point_laws(weights: &[f64], laws: &[PointLaw]) -> Result<Self> {
        let mut b = Self {
            alpha_l: 0.0,
            alpha_u: 0.0,
            beta_l: 0.0,
            beta_u: 0.0,
            mean_lambda0: 0.0,
            psi_l: 0.0,
            psi_u: 0.0,
        };
        for (w, l) in weights.iter().zip(laws) {
            b.alpha_l += w * (l.theta0[0] - l.theta0[1]).max(0.0);
            b.alpha_u += w * (l.theta1[1] - l.theta1[0]);
            b.beta_l += w * ((l.mu[1] + l.lambda[0] - l.lambda[1]).max(0.0) - l.mu[0]);
            b.beta_u += w * (l.mu[1].min(l.lambda[0]) - l.mu[0]);
            b.mean_lambda0 += w * l.lambda[0];
        }
        if b.mean_lambda0 <= 0.0 {
            return Err(Error::NonPositiveSelection { value: b.mean_lambda0 });
        }
        b.beta_l /= b.mean_lambda0;
        b.beta_u /= b.mean_lambda0;
        let ((psi_l, psi_u), (den_l, den_u)) =
            psi_bounds((b.alpha_l, b.alpha_u), (b.beta_l, b.beta_u), b.mean_lambda0);
        b.psi_l = extended_ratio(psi_l, b.beta_l * b.mean_lambda0, den_l);
        b.psi_u = extended_ratio(psi_u, b.beta_u * b.mean_lambda0, den_u);
        Ok(b)
    }

    pub fn psi_length(&self) -> f64 {
        self.psi_u.min(1.0) - self.psi_l.max(-1.0)
    }
}

/// `num / den` for `den ≥ 0`, with `c/0 = ±∞` and `0/0 = 0`.
fn extended_ratio(ratio: f64, num: f64, den: f64) -> f64 {
    if den > 0.0 {
        ratio
    } else if num > 0.0 {
        f64::INFINITY
    } else if num < 0.0 {
        f64::NEG_INFINITY
    } else {
        0.0
    }
}

/// Causal estimands of a discrete law together with its population bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimands {
    /// Survivor-complier proportion.
    pub alpha: f64,
    /// Survivor ITT effect.
    pub beta: f64,
    /// SCATE; `None` when `α = 0`.
    pub psi: Option<f64>,
    /// `P(S⁰ = S¹ = 1)`.
    pub always_selected: f64,
    pub bounds: PopulationBounds,
}

impl Estimands {
    /// Truth lies within every population bound, up to [`EXACT_SLACK`].
    pub fn bounds_contain_truth(&self) -> bool {
        let b = &self.bounds;
        let within = |lo: f64, v: f64, hi: f64| lo - EXACT_SLACK <= v && v <= hi + EXACT_SLACK;
        within(b.alpha_l, self.alpha, b.alpha_u)
            && within(b.beta_l, self.beta, b.beta_u)
            && self.psi.is_none_or(|psi| within(b.psi_l, psi, b.psi_u))
    }
}

impl DiscreteDGP {
    pub fn new(points: Vec<SupportPoint>) -> Result<Self> {
        let dgp = Self { points };
        dgp.validate()?;
        Ok(dgp)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(format!("discrete law: {msg}")));
        if self.points.is_empty() || self.points.len() > MAX_SUPPORT {
            return bad(format!("support must have 1..={MAX_SUPPORT} points, got {}", self.points.len()));
        }
        let dim = self.points[0].x.len();
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        let mut total = 0.0;
        for (k, p) in self.points.iter().enumerate() {
            if p.x.len() != dim || p.x.iter().any(|v| !v.is_finite()) {
                return bad(format!("point {k} has malformed covariates"));
            }
            if !(p.weight >= 0.0 && p.weight.is_finite()) {
                return bad(format!("point {k} has weight {}", p.weight));
            }
            total += p.weight;
            if !(p.pi1 > 0.0 && p.pi1 < 1.0) {
                return bad(format!("point {k} has instrument probability {} outside (0,1)", p.pi1));
            }
            let strata = p.strata.to_array();
            if strata.iter().any(|&v| !unit(v)) || (strata.iter().sum::<f64>() - 1.0).abs() > EXACT_SLACK {
                return bad(format!("point {k} stratum probabilities do not form a distribution"));
            }
            if p.outcomes.values().iter().any(|&v| !unit(v)) {
                return bad(format!("point {k} has an outcome probability outside [0,1]"));
            }
        }
        if (total - 1.0).abs() > EXACT_SLACK {
            return bad(format!("point weights sum to {total}"));
        }
        Ok(())
    }

    pub fn points(&self) -> &[SupportPoint] {
        &self.points
    }

    pub fn dim(&self) -> usize {
        self.points[0].x.len()
    }

    pub fn point_law(&self, k: usize) -> PointLaw {
        self.points[k].law()
    }

    pub fn exact_law(&self) -> ExactLaw {
        let mut cells = Vec::new();
        let mut points = Vec::with_capacity(self.points.len());
        for (k, p) in self.points.iter().enumerate() {
            points.push(self.point_law(k));
            for z in 0..2 {
                let pz = if z == 1 { p.pi1 } else { 1.0 - p.pi1 } * p.weight;
                let mut unselected = 0.0;
                let mut by_a = [[0.0; 2]; 2];
                for s in Stratum::ALL {
                    let mass = p.strata.get(s);
                    match s.treated(z) {
                        None => unselected += mass,
                        Some(a) => {
                            let y1 = p.outcomes.get(s, z).expect("defined when selected");
                            by_a[usize::from(a)][1] += mass * y1;
                            by_a[usize::from(a)][0] += mass * (1.0 - y1);
                        }
                    }
                }
                let zb = z == 1;
                cells.push(Cell {
                    point: k,
                    z: zb,
                    s: false,
                    a: Treatment::Undefined,
                    y: None,
                    prob: pz * unselected,
                });
                for a in [false, true] {
                    for y in [false, true] {
                        cells.push(Cell {
                            point: k,
                            z: zb,
                            s: true,
                            a: Treatment::from_flag(a),
                            y: Some(y),
                            prob: pz * by_a[usize::from(a)][usize::from(y)],
                        });
                    }
                }
            }
        }
        ExactLaw {
            weights: self.points.iter().map(|p| p.weight).collect(),
            points,
            cells,
        }
    }

    pub fn population_bounds(&self) -> Result<PopulationBounds> {
        let law = self.exact_law();
        PopulationBounds::from_point_laws(&law.weights, &law.points)
    }

    pub fn estimands(&self) -> Result<Estimands> {
        let bounds = self.population_bounds()?;
        let mut alpha = 0.0;
        let mut effect_mass = 0.0;
        let mut always = 0.0;
        for p in &self.points {
            let sc = p.strata.survivor_complier;
            alpha += p.weight * sc;
            effect_mass +=
                p.weight * sc * (p.outcomes.survivor_complier_treated - p.outcomes.survivor_complier_untreated);
            always += p.weight
                * (p.strata.always_selected_untreated + sc + p.strata.always_selected_treated);
        }
        Ok(Estimands {
            alpha,
            // Strata with constant treatment contribute no effect under exclusion.
            beta: effect_mass / always,
            psi: (alpha > 0.0).then(|| effect_mass / alpha),
            always_selected: always,
            bounds,
        })
    }

    /// Mass of `|γ_j(X)| < τ` for the three indicator contrasts
    /// `θ_1(0)−θ_0(0)`, `μ_1−(λ_1−λ_0)`, `μ_1−λ_0`.
    pub fn boundary_mass(&self, tau: f64) -> [f64; 3] {
        let mut mass = [0.0; 3];
        for (k, p) in self.points.iter().enumerate() {
            let l = self.point_law(k);
            let g = [
                l.theta0[1] - l.theta0[0],
                l.mu[1] - (l.lambda[1] - l.lambda[0]),
                l.mu[1] - l.lambda[0],
            ];
            for j in 0..3 {
                if g[j].abs() < tau {
                    mass[j] += p.weight;
                }
            }
        }
        mass
    }

    /// The law seen without covariates: one point carrying the averaged
    /// strata and stratum-weighted outcomes. Needs a common `π₁`.
    pub fn marginalize(&self) -> Result<Self> {
        let pi1 = self.points[0].pi1;
        if self.points.iter().any(|p| (p.pi1 - pi1).abs() > EXACT_SLACK) {
            return Err(Error::InvalidParameter(
                "marginalizing needs an instrument independent of covariates".into(),
            ));
        }
        let mut strata = [0.0; 6];
        let mut outcome_mass = [0.0; 6];
        for p in &self.points {
            for s in Stratum::ALL {
                strata[s.index()] += p.weight * p.strata.get(s);
            }
            let o = p.outcomes;
            let st = &p.strata;
            let terms = [
                st.selection_complier_untreated * o.selection_complier_untreated,
                st.selection_complier_treated * o.selection_complier_treated,
                st.always_selected_untreated * o.always_selected_untreated,
                st.always_selected_treated * o.always_selected_treated,
                st.survivor_complier * o.survivor_complier_untreated,
                st.survivor_complier * o.survivor_complier_treated,
            ];
            for (m, t) in outcome_mass.iter_mut().zip(terms) {
                *m += p.weight * t;
            }
        }
        let s = StratumProbs::from_array(strata);
        let ratio = |num: f64, den: f64| if den > 0.0 { (num / den).clamp(0.0, 1.0) } else { 0.5 };
        let outcomes = OutcomeProbs {
            selection_complier_untreated: ratio(outcome_mass[0], s.selection_complier_untreated),
            selection_complier_treated: ratio(outcome_mass[1], s.selection_complier_treated),
            always_selected_untreated: ratio(outcome_mass[2], s.always_selected_untreated),
            always_selected_treated: ratio(outcome_mass[3], s.always_selected_treated),
            survivor_complier_untreated: ratio(outcome_mass[4], s.survivor_complier),
            survivor_complier_treated: ratio(outcome_mass[5], s.survivor_complier),
        };
        let total: f64 = strata.iter().sum();
        let strata = StratumProbs::from_array(strata.map(|v| v / total));
        Self::new(vec![SupportPoint {
            x: Vec::new(),
            weight: 1.0,
            pi1,
            strata,
            outcomes,
        }])
    }

    /// Draws `n` observations and returns them with each row's support index.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Result<(Dataset, Vec<usize>)> {
        let d = self.dim();
        let weights: Vec<f64> = self.points.iter().map(|p| p.weight).collect();
        let mut covariates = Vec::with_capacity(n * d);
        let mut instrument = Vec::with_capacity(n);
        let mut selected = Vec::with_capacity(n);
        let mut treatment = Vec::with_capacity(n);
        let mut outcome = Vec::with_capacity(n);
        let mut index = Vec::with_capacity(n);
        for _ in 0..n {
            let k = categorical(&weights, rng.random());
            let p = &self.points[k];
            let z = usize::from(rng.random::<f64>() < p.pi1);
            let s = Stratum::ALL[categorical(&p.strata.to_array(), rng.random())];
            let u: f64 = rng.random();
            covariates.extend_from_slice(&p.x);
            instrument.push(z == 1);
            index.push(k);
            match s.treated(z) {
                None => {
                    selected.push(false);
                    treatment.push(Treatment::Undefined);
                    outcome.push(None);
                }
                Some(a) => {
                    selected.push(true);
                    treatment.push(Treatment::from_flag(a));
                    outcome.push(Some(u < p.outcomes.get(s, z).expect("defined when selected")));
                }
            }
        }
        let names = (1..=d).map(|j| format!("x{j}")).collect();
        let ds = Dataset::from_columns(names, covariates, instrument, selected, treatment, outcome)?;
        Ok((ds, index))
    }

    /// Exact nuisances evaluated at each row's support point.
    pub fn exact_nuisances(&self, index: &[usize], clip_epsilon: f64) -> Result<NuisanceSet> {
        let laws: Vec<PointLaw> = (0..self.points.len()).map(|k| self.point_law(k)).collect();
        NuisanceSet::from_parts(
            index.iter().map(|&k| laws[k].pi1).collect(),
            index.iter().map(|&k| laws[k].lambda).collect(),
            index.iter().map(|&k| laws[k].theta1).collect(),
            index.iter().map(|&k| laws[k].mu).collect(),
            clip_epsilon,
        )
    }
}

/// Index `i` with `Σ_{j<i} w_j ≤ u < Σ_{j≤i} w_j`; the last positive entry
/// absorbs rounding.
pub(crate) fn categorical(weights: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        acc += w;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

fn dirichlet<const K: usize>(rng: &mut Rng) -> [f64; K] {
    let mut v: [f64; K] = std::array::from_fn(|_| Exp1.sample(rng));
    let total: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= total);
    v
}

/// Settings for [`random_dgp`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RandomDgpSpec {
    pub max_points: usize,
    /// Instrument probabilities are drawn from this range.
    pub pi_range: (f64, f64),
    /// Same `π₁` at every point.
    pub constant_pi: bool,
}

impl Default for RandomDgpSpec {
    fn default() -> Self {
        Self {
            max_points: MAX_SUPPORT,
            pi_range: (0.2, 0.8),
            constant_pi: false,
        }
    }
}

/// A random law with one covariate taking values `0, 1, …`, Dirichlet
/// weights and strata, and uniform outcome probabilities.
pub fn random_dgp(rng: &mut Rng, spec: &RandomDgpSpec) -> DiscreteDGP {
    let k = rng.random_range(1..=spec.max_points.clamp(1, MAX_SUPPORT));
    let weights: Vec<f64> = {
        let raw: Vec<f64> = (0..k).map(|_| Exp1.sample(rng)).collect();
        let total: f64 = raw.iter().sum();
        raw.iter().map(|w| w / total).collect()
    };
    let common_pi = rng.random_range(spec.pi_range.0..=spec.pi_range.1);
    let points = (0..k)
        .map(|j| SupportPoint {
            x: vec![j as f64],
            weight: weights[j],
            pi1: if spec.constant_pi {
                common_pi
            } else {
                rng.random_range(spec.pi_range.0..=spec.pi_range.1)
            },
            strata: StratumProbs::from_array(dirichlet::<6>(rng)),
            outcomes: OutcomeProbs {
                selection_complier_untreated: rng.random(),
                selection_complier_treated: rng.random(),
                always_selected_untreated: rng.random(),
                always_selected_treated: rng.random(),
                survivor_complier_untreated: rng.random(),
                survivor_complier_treated: rng.random(),
            },
        })
        .collect();
    DiscreteDGP::new(points).expect("random law is valid by construction")
}

/// Law where selection is a deterministic function of the covariate: each
/// point holds either only never-selected units or only always-selected ones.
pub fn perfect_prediction_dgp(rng: &mut Rng) -> DiscreteDGP {
    let mut dgp = random_dgp(rng, &RandomDgpSpec::default());
    let n = dgp.points.len();
    for (j, p) in dgp.points.iter_mut().enumerate() {
        // Keep at least one always-selected point so E{λ_0} > 0.
        let selected = j + 1 == n || rng.random::<bool>();
        let mut s = [0.0; 6];
        if selected {
            let mix = dirichlet::<3>(rng);
            s[Stratum::AlwaysSelectedUntreated.index()] = mix[0];
            s[Stratum::SurvivorComplier.index()] = mix[1];
            s[Stratum::AlwaysSelectedTreated.index()] = mix[2];
        } else {
            s[Stratum::NeverSelected.index()] = 1.0;
        }
        p.strata = StratumProbs::from_array(s);
    }
    dgp
}

/// Law in which every unit is always selected, so `S ≡ 1`.
pub fn no_selection_dgp(rng: &mut Rng) -> DiscreteDGP {
    let mut dgp = random_dgp(rng, &RandomDgpSpec::default());
    for p in &mut dgp.points {
        let mix = dirichlet::<3>(rng);
        let mut s = [0.0; 6];
        s[Stratum::AlwaysSelectedUntreated.index()] = mix[0];
        // Keep a survivor-complier share so the Wald denominator is positive.
        s[Stratum::SurvivorComplier.index()] = mix[1].max(0.05);
        s[Stratum::AlwaysSelectedTreated.index()] = mix[2];
        let total: f64 = s.iter().sum();
        p.strata = StratumProbs::from_array(s.map(|v| v / total));
    }
    dgp
}

/// Two equally likely strata, survivor-compliers and selection-compliers who
/// take treatment, with `Y^{z=0} = 0`. `psi` is the survivor-complier outcome
/// under treatment and `xi` the selection-complier outcome; laws with equal
/// `psi + xi` are observationally identical.
pub fn non_identification_dgp(psi: f64, xi: f64) -> Result<DiscreteDGP> {
    let mut s = [0.0; 6];
    s[Stratum::SurvivorComplier.index()] = 0.5;
    s[Stratum::SelectionComplierTreated.index()] = 0.5;
    DiscreteDGP::new(vec![SupportPoint {
        x: Vec::new(),
        weight: 1.0,
        pi1: 0.5,
        strata: StratumProbs::from_array(s),
        outcomes: OutcomeProbs {
            selection_complier_treated: xi,
            survivor_complier_untreated: 0.0,
            survivor_complier_treated: psi,
            ..OutcomeProbs::uniform(0.0)
        },
    }])
}

/// Sign pattern of the `β` bounds, which decides the `ψ` denominators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SignCase {
    /// `β_ℓ ≥ 0`.
    NonNegative,
    /// `β_u ≤ 0`.
    NonPositive,
    /// `β_ℓ ≤ 0 ≤ β_u`.
    Straddling,
}

impl SignCase {
    pub fn of(bounds: &PopulationBounds) -> Self {
        if bounds.beta_l >= 0.0 {
            Self::NonNegative
        } else if bounds.beta_u <= 0.0 {
            Self::NonPositive
        } else {
            Self::Straddling
        }
    }
}

/// One law per sign case, each with `α_ℓ > 0`.
pub fn sign_case_dgps() -> Vec<(SignCase, DiscreteDGP)> {
    let point = |strata: [f64; 6], y0: f64, y1: f64| {
        DiscreteDGP::new(vec![SupportPoint {
            x: Vec::new(),
            weight: 1.0,
            pi1: 0.5,
            strata: StratumProbs::from_array(strata),
            outcomes: OutcomeProbs {
                survivor_complier_untreated: y0,
                survivor_complier_treated: y1,
                ..OutcomeProbs::uniform(0.3)
            },
        }])
        .expect("fixed law is valid")
    };
    vec![
        (SignCase::NonNegative, point([0.1, 0.05, 0.05, 0.2, 0.4, 0.2], 0.1, 0.9)),
        (SignCase::NonPositive, point([0.1, 0.05, 0.05, 0.2, 0.4, 0.2], 0.9, 0.1)),
        (SignCase::Straddling, point([0.1, 0.1, 0.1, 0.2, 0.3, 0.2], 0.45, 0.55)),
    ]
}

/// Bounds on the mean of a binary component `F` of the mixture
/// `H = pF + (1−p)G`, with the components that attain them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MixtureBounds {
    pub lower: f64,
    pub upper: f64,
    /// Mean of the `G` paired with the lower `F` mean.
    pub lower_partner: f64,
    /// Mean of the `G` paired with the upper `F` mean.
    pub upper_partner: f64,
}

/// Sharp bounds for the binary case, `h = P(Y = 1)` under `H`.
pub fn mixture_mean_bounds(h: f64, p: f64) -> Result<MixtureBounds> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidParameter(format!("mixing weight {p} outside (0,1)")));
    }
    if !(0.0..=1.0).contains(&h) {
        return Err(Error::InvalidParameter(format!("P(Y=1) = {h} outside [0,1]")));
    }
    let q = 1.0 - p;
    Ok(MixtureBounds {
        lower: (h - q).max(0.0) / p,
        upper: h.min(p) / p,
        lower_partner: h.min(q) / q,
        upper_partner: (h - p).max(0.0) / q,
    })
}

/// Sharpness by construction and validity by grid search for one `(h, p)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MixtureCertificate {
    pub bounds: MixtureBounds,
    /// Both attaining pairs are valid components that reproduce `H`.
    pub attained: bool,
    /// Smallest and largest feasible `F` mean found on the grid.
    pub search_min: f64,
    pub search_max: f64,
    /// No feasible grid point lies outside the bounds.
    pub valid: bool,
}

pub fn lemma1_certify(h: f64, p: f64, resolution: f64) -> Result<MixtureCertificate> {
    let bounds = mixture_mean_bounds(h, p)?;
    let q = 1.0 - p;
    let unit = |v: f64| (-EXACT_SLACK..=1.0 + EXACT_SLACK).contains(&v);
    let reproduces = |f: f64, g: f64| unit(f) && unit(g) && (p * f + q * g - h).abs() < EXACT_SLACK;
    let attained = reproduces(bounds.lower, bounds.lower_partner) && reproduces(bounds.upper, bounds.upper_partner);
    let steps = (1.0 / resolution).round() as usize;
    let mut search_min = f64::INFINITY;
    let mut search_max = f64::NEG_INFINITY;
    let mut valid = true;
    for j in 0..=steps {
        let f = j as f64 / steps as f64;
        let g = (h - p * f) / q;
        if !unit(g) {
            continue;
        }
        search_min = search_min.min(f);
        search_max = search_max.max(f);
        if f < bounds.lower - EXACT_SLACK || f > bounds.upper + EXACT_SLACK {
            valid = false;
        }
    }
    Ok(MixtureCertificate {
        bounds,
        attained,
        search_min,
        search_max,
        valid,
    })
}
