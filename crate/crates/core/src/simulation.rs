//! Principal-strata data-generating processes and the replication harness
//! that records bound length and sign agreement over a grid of true `(α, ψ)`.
//!
//! Survivor-compliers have probability `α` and each of the other five
//! admissible strata `(1 − α)/5`, with `Z ~ Bernoulli(0.5)`. Outcomes are
//! `Bernoulli(0.5)` outside the survivor-complier stratum; inside it the
//! [`OutcomeRule`] fixes the potential-outcome probabilities so the SCATE is
//! exactly `ψ`.
//!
//! In the covariate modes each unit carries two covariates
//! `x_j = m_T + σ ε_j` whose mean depends only on the selection type
//! `T ∈ {never, complier, always}`, with `E[S | T] = g_T = (0, ½, 1)`. The
//! signal strength is solved so that `corr(x_j, S)` hits the target, and
//! `x₁ + x₂` is a sufficient statistic for the type, which makes the
//! population bounds a one-dimensional integral.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{estimate_from_nuisances, BoundsOptions};
use crate::data::{Dataset, Treatment};
use crate::error::{Error, Result};
use crate::learners::{FoldAssignment, LearnerSpec};
use crate::nuisance::{fit_nuisances, DEFAULT_CLIP_EPSILON};
use crate::oracle::{
    categorical, DiscreteDGP, OutcomeProbs, PointLaw, PopulationBounds, Stratum, StratumProbs, SupportPoint,
    MAX_SUPPORT,
};
use crate::rng::{derive_seed, rng_from};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovariateMode {
    None,
    Weak,
    Strong,
}

impl CovariateMode {
    pub const ALL: [CovariateMode; 3] = [Self::None, Self::Weak, Self::Strong];

    /// Target point-biserial correlation of each covariate with `S`.
    pub fn default_corr(self) -> f64 {
        match self {
            Self::None => 0.0,
            Self::Weak => 0.50,
            Self::Strong => 0.85,
        }
    }

    /// Learner used by the study harness in this mode.
    pub fn default_learner(self) -> LearnerSpec {
        match self {
            Self::None => LearnerSpec::MarginalMean,
            Self::Weak | Self::Strong => LearnerSpec::logistic(),
        }
    }
}

impl fmt::Display for CovariateMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Weak => "weak",
            Self::Strong => "strong",
        })
    }
}

impl FromStr for CovariateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "weak" => Ok(Self::Weak),
            "strong" => Ok(Self::Strong),
            _ => Err(Error::InvalidParameter(format!(
                "unknown covariate mode {s:?} (expected none, weak or strong)"
            ))),
        }
    }
}

/// Survivor-complier potential-outcome probabilities for a target `ψ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutcomeRule {
    /// `P(Y^{a=1}=1) = ½ + ψ/2`, `P(Y^{a=0}=1) = ½ − ψ/2`; feasible for all `ψ`.
    #[default]
    Symmetric,
    /// `P(Y^{a=0}=1) = ½`, `P(Y^{a=1}=1) = ½ + ψ`; feasible for `|ψ| ≤ ½`.
    BaselineShift,
}

impl OutcomeRule {
    /// `(P(Y^{a=0}=1), P(Y^{a=1}=1))` among survivor-compliers.
    pub fn survivor_outcomes(self, psi: f64) -> (f64, f64) {
        match self {
            Self::Symmetric => (0.5 - psi / 2.0, 0.5 + psi / 2.0),
            Self::BaselineShift => (0.5, 0.5 + psi),
        }
    }
}

impl FromStr for OutcomeRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "symmetric" => Ok(Self::Symmetric),
            "baseline-shift" => Ok(Self::BaselineShift),
            _ => Err(Error::InvalidParameter(format!("unknown outcome rule {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimScenario {
    pub true_alpha: f64,
    pub true_psi: f64,
    pub n: usize,
    pub covariate_mode: CovariateMode,
    pub target_corr: f64,
    pub outcome_rule: OutcomeRule,
    pub seed: u64,
}

impl SimScenario {
    pub fn new(true_alpha: f64, true_psi: f64, n: usize, covariate_mode: CovariateMode, seed: u64) -> Self {
        Self {
            true_alpha,
            true_psi,
            n,
            covariate_mode,
            target_corr: covariate_mode.default_corr(),
            outcome_rule: OutcomeRule::default(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let infeasible = |msg: String| Err(Error::Infeasible(msg));
        if !(self.true_alpha > 0.0 && self.true_alpha <= 1.0) {
            return infeasible(format!(
                "survivor-complier probability {} must lie in (0, 1]",
                self.true_alpha
            ));
        }
        if !(-1.0..=1.0).contains(&self.true_psi) {
            return infeasible(format!("SCATE {} must lie in [-1, 1]", self.true_psi));
        }
        let (p0, p1) = self.outcome_rule.survivor_outcomes(self.true_psi);
        if ![p0, p1].iter().all(|p| (0.0..=1.0).contains(p)) {
            return infeasible(format!(
                "outcome probabilities ({p0}, {p1}) for SCATE {} fall outside [0, 1]",
                self.true_psi
            ));
        }
        if self.n == 0 {
            return Err(Error::InvalidParameter("sample size must be positive".into()));
        }
        if self.covariate_mode != CovariateMode::None && !(self.target_corr > 0.0 && self.target_corr < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "target correlation {} must lie in (0, 1)",
                self.target_corr
            )));
        }
        Ok(())
    }

    pub fn strata(&self) -> StratumProbs {
        let q = (1.0 - self.true_alpha) / 5.0;
        StratumProbs::from_array([q, q, q, q, self.true_alpha, q])
    }

    pub fn outcomes(&self) -> OutcomeProbs {
        let (p0, p1) = self.outcome_rule.survivor_outcomes(self.true_psi);
        OutcomeProbs {
            survivor_complier_untreated: p0,
            survivor_complier_treated: p1,
            ..OutcomeProbs::uniform(0.5)
        }
    }

    /// Covariate design for the scenario's mode; `None` without covariates.
    pub fn covariate_design(&self) -> Option<CovariateDesign> {
        (self.covariate_mode != CovariateMode::None)
            .then(|| CovariateDesign::calibrate(&self.strata(), self.target_corr))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SelectionType {
    Never,
    Complier,
    Always,
}

impl SelectionType {
    const ALL: [SelectionType; 3] = [Self::Never, Self::Complier, Self::Always];

    fn of(s: Stratum) -> Self {
        match (s.selected(0), s.selected(1)) {
            (false, false) => Self::Never,
            (false, true) => Self::Complier,
            _ => Self::Always,
        }
    }

    /// `E[S | type]` with `Z ~ Bernoulli(½)`.
    fn selection_mean(self) -> f64 {
        match self {
            Self::Never => 0.0,
            Self::Complier => 0.5,
            Self::Always => 1.0,
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

fn type_probs(strata: &StratumProbs) -> [f64; 3] {
    let mut p = [0.0; 3];
    for s in Stratum::ALL {
        p[SelectionType::of(s).index()] += strata.get(s);
    }
    p
}

/// Mean-shift covariate design: `x_j = shift·(g_T − ḡ)/scale + ε_j/scale`
/// with `scale = √(shift²·Var g + 1)`, so every covariate has unit variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CovariateDesign {
    pub shift: f64,
    /// Population `corr(x_j, S)` actually attained.
    pub achieved_corr: f64,
    /// The target exceeded the largest attainable correlation
    /// `√(Var g / Var S)` and was capped just below it.
    pub capped: bool,
    type_means: [f64; 3],
    noise_sd: f64,
}

/// Fraction of the correlation supremum used when the target is unattainable.
pub const CORR_CAP_FRACTION: f64 = 0.99;

impl CovariateDesign {
    pub fn calibrate(strata: &StratumProbs, target_corr: f64) -> Self {
        let p = type_probs(strata);
        let g = SelectionType::ALL.map(SelectionType::selection_mean);
        let g_bar: f64 = p.iter().zip(&g).map(|(p, g)| p * g).sum();
        let var_g: f64 = p.iter().zip(&g).map(|(p, g)| p * (g - g_bar).powi(2)).sum();
        let var_s = g_bar * (1.0 - g_bar);
        let corr_at = |shift: f64| {
            if var_g <= 0.0 {
                0.0
            } else {
                shift * var_g / ((shift * shift * var_g + 1.0) * var_s).sqrt()
            }
        };
        let sup = if var_s > 0.0 { (var_g / var_s).sqrt() } else { 0.0 };
        let capped = target_corr >= sup * CORR_CAP_FRACTION;
        let target = if capped { sup * CORR_CAP_FRACTION } else { target_corr };
        let shift = if var_g <= 0.0 {
            0.0
        } else {
            let (mut lo, mut hi) = (0.0, 1.0);
            while corr_at(hi) < target {
                hi *= 2.0;
            }
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if corr_at(mid) < target {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            0.5 * (lo + hi)
        };
        let scale = (shift * shift * var_g + 1.0).sqrt();
        Self {
            shift,
            achieved_corr: corr_at(shift),
            capped,
            type_means: g.map(|g| shift * (g - g_bar) / scale),
            noise_sd: 1.0 / scale,
        }
    }

    fn mean_of(&self, t: SelectionType) -> f64 {
        self.type_means[t.index()]
    }

    /// Density of `u = x₁ + x₂` given the type.
    fn sum_density(&self, t: SelectionType, u: f64) -> f64 {
        let sd = self.noise_sd * std::f64::consts::SQRT_2;
        let r = (u - 2.0 * self.mean_of(t)) / sd;
        (-0.5 * r * r).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt())
    }
}

/// Draws one dataset from the scenario, seeded by `sc.seed`.
pub fn generate(sc: &SimScenario) -> Result<Dataset> {
    sc.validate()?;
    let mut rng = rng_from(sc.seed, &[]);
    let strata = sc.strata().to_array();
    let outcomes = sc.outcomes();
    let design = sc.covariate_design();
    let dim = if design.is_some() { 2 } else { 0 };
    let mut covariates = Vec::with_capacity(sc.n * dim);
    let mut instrument = Vec::with_capacity(sc.n);
    let mut selected = Vec::with_capacity(sc.n);
    let mut treatment = Vec::with_capacity(sc.n);
    let mut outcome = Vec::with_capacity(sc.n);
    for _ in 0..sc.n {
        let z = usize::from(rng.random::<f64>() < 0.5);
        let s = Stratum::ALL[categorical(&strata, rng.random())];
        if let Some(d) = &design {
            let m = d.mean_of(SelectionType::of(s));
            for _ in 0..2 {
                let e: f64 = rng.sample(StandardNormal);
                covariates.push(m + d.noise_sd * e);
            }
        }
        let u: f64 = rng.random();
        instrument.push(z == 1);
        match s.treated(z) {
            None => {
                selected.push(false);
                treatment.push(Treatment::Undefined);
                outcome.push(None);
            }
            Some(a) => {
                selected.push(true);
                treatment.push(Treatment::from_flag(a));
                outcome.push(Some(u < outcomes.get(s, z).expect("defined when selected")));
            }
        }
    }
    let names = (1..=dim).map(|j| format!("x{j}")).collect();
    Dataset::from_columns(names, covariates, instrument, selected, treatment, outcome)
}

/// Support point for the scenario at `u = x₁ + x₂` with the given weight.
fn point_at(sc: &SimScenario, design: &CovariateDesign, u: f64, weight: f64) -> SupportPoint {
    let prior = sc.strata();
    let tp = type_probs(&prior);
    let post: Vec<f64> = SelectionType::ALL
        .iter()
        .map(|&t| tp[t.index()] * design.sum_density(t, u))
        .collect();
    let total: f64 = post.iter().sum();
    let strata = StratumProbs::from_array(Stratum::ALL.map(|s| {
        let t = SelectionType::of(s).index();
        if tp[t] > 0.0 && total > 0.0 {
            prior.get(s) * post[t] / (tp[t] * total)
        } else {
            0.0
        }
    }));
    SupportPoint {
        x: vec![u / 2.0, u / 2.0],
        weight,
        pi1: 0.5,
        strata,
        outcomes: sc.outcomes(),
    }
}

/// Number of quadrature nodes for covariate-mode population bounds.
pub const QUADRATURE_NODES: usize = 4001;

fn sum_range(design: &CovariateDesign) -> (f64, f64) {
    let sd = design.noise_sd * std::f64::consts::SQRT_2;
    let means = design.type_means.map(|m| 2.0 * m);
    let lo = means.iter().copied().fold(f64::INFINITY, f64::min) - 12.0 * sd;
    let hi = means.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 12.0 * sd;
    (lo, hi)
}

/// Population bounds of the scenario's law; in covariate modes by
/// quadrature over the sufficient statistic `x₁ + x₂`.
pub fn population_bounds(sc: &SimScenario) -> Result<PopulationBounds> {
    sc.validate()?;
    let Some(design) = sc.covariate_design() else {
        return marginal_dgp(sc)?.population_bounds();
    };
    let (lo, hi) = sum_range(&design);
    let h = (hi - lo) / (QUADRATURE_NODES - 1) as f64;
    let tp = type_probs(&sc.strata());
    let mut weights = Vec::with_capacity(QUADRATURE_NODES);
    let mut laws: Vec<PointLaw> = Vec::with_capacity(QUADRATURE_NODES);
    for j in 0..QUADRATURE_NODES {
        let u = lo + h * j as f64;
        let density: f64 = SelectionType::ALL
            .iter()
            .map(|&t| tp[t.index()] * design.sum_density(t, u))
            .sum();
        let trapezoid = if j == 0 || j + 1 == QUADRATURE_NODES { 0.5 } else { 1.0 };
        weights.push(density * h * trapezoid);
        laws.push(point_at(sc, &design, u, 0.0).law());
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    PopulationBounds::from_point_laws(&weights, &laws)
}

fn marginal_dgp(sc: &SimScenario) -> Result<DiscreteDGP> {
    DiscreteDGP::new(vec![SupportPoint {
        x: vec![],
        weight: 1.0,
        pi1: 0.5,
        strata: sc.strata(),
        outcomes: sc.outcomes(),
    }])
}

/// The scenario's law as a finite oracle law. Covariate modes are binned
/// on `x₁ + x₂` into `bins` equal-probability cells, each represented by its
/// within-cell posterior strata mix.
pub fn to_discrete_dgp(sc: &SimScenario, bins: usize) -> Result<DiscreteDGP> {
    sc.validate()?;
    let Some(design) = sc.covariate_design() else {
        return marginal_dgp(sc);
    };
    if bins == 0 || bins > MAX_SUPPORT {
        return Err(Error::InvalidParameter(format!("bins must lie in 1..={MAX_SUPPORT}, got {bins}")));
    }
    let (lo, hi) = sum_range(&design);
    let h = (hi - lo) / (QUADRATURE_NODES - 1) as f64;
    let tp = type_probs(&sc.strata());
    let nodes: Vec<(f64, [f64; 3])> = (0..QUADRATURE_NODES)
        .map(|j| {
            let u = lo + h * j as f64;
            (u, SelectionType::ALL.map(|t| tp[t.index()] * design.sum_density(t, u) * h))
        })
        .collect();
    let total: f64 = nodes.iter().map(|(_, m)| m.iter().sum::<f64>()).sum();
    let mut points = Vec::with_capacity(bins);
    let mut mass = [0.0; 3];
    let mut moment = 0.0;
    let mut cum = 0.0;
    for (j, (u, m)) in nodes.iter().enumerate() {
        let w: f64 = m.iter().sum::<f64>() / total;
        cum += w;
        moment += u * w;
        for t in 0..3 {
            mass[t] += m[t] / total;
        }
        let boundary = (points.len() + 1) as f64 / bins as f64;
        if (cum >= boundary && points.len() + 1 < bins) || j + 1 == nodes.len() {
            let weight: f64 = mass.iter().sum();
            if weight > 0.0 {
                let prior = sc.strata();
                let strata = StratumProbs::from_array(Stratum::ALL.map(|s| {
                    let t = SelectionType::of(s).index();
                    if tp[t] > 0.0 {
                        prior.get(s) / tp[t] * mass[t] / weight
                    } else {
                        0.0
                    }
                }));
                let centre = moment / weight;
                points.push(SupportPoint {
                    x: vec![centre / 2.0, centre / 2.0],
                    weight,
                    pi1: 0.5,
                    strata,
                    outcomes: sc.outcomes(),
                });
            }
            mass = [0.0; 3];
            moment = 0.0;
        }
    }
    let total_weight: f64 = points.iter().map(|p| p.weight).sum();
    for p in &mut points {
        p.weight /= total_weight;
        let s = p.strata.to_array();
        let sum: f64 = s.iter().sum();
        p.strata = StratumProbs::from_array(s.map(|v| v / sum));
    }
    DiscreteDGP::new(points)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyConfig {
    pub alpha_grid: Vec<f64>,
    pub psi_grid: Vec<f64>,
    pub reps: usize,
    pub n: usize,
    pub mode: CovariateMode,
    pub seed: u64,
    pub learner: LearnerSpec,
    pub folds: usize,
    pub clip_epsilon: f64,
    pub outcome_rule: OutcomeRule,
}

/// Sample size per replication.
pub const DEFAULT_STUDY_N: usize = 1000;
pub const DESK_REPS: usize = 200;
pub const DESK_STEP: f64 = 0.05;
pub const FULL_REPS: usize = 1000;
pub const FULL_STEP: f64 = 0.01;

impl StudyConfig {
    /// Desk-scale study for one covariate mode.
    pub fn desk(mode: CovariateMode, seed: u64) -> Self {
        Self {
            alpha_grid: alpha_grid(DESK_STEP),
            psi_grid: psi_grid(DESK_STEP),
            reps: DESK_REPS,
            n: DEFAULT_STUDY_N,
            mode,
            seed,
            learner: mode.default_learner(),
            folds: 5,
            clip_epsilon: DEFAULT_CLIP_EPSILON,
            outcome_rule: OutcomeRule::default(),
        }
    }

    pub fn full_scale(mode: CovariateMode, seed: u64) -> Self {
        Self {
            alpha_grid: alpha_grid(FULL_STEP),
            psi_grid: psi_grid(FULL_STEP),
            reps: FULL_REPS,
            ..Self::desk(mode, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha_grid.is_empty() || self.psi_grid.is_empty() {
            return Err(Error::InvalidParameter("study grids must be nonempty".into()));
        }
        if self.reps == 0 {
            return Err(Error::InvalidParameter("reps must be at least 1".into()));
        }
        if self.n < 2 * self.folds.max(1) {
            return Err(Error::InvalidParameter(format!(
                "sample size {} too small for {} folds",
                self.n, self.folds
            )));
        }
        self.learner.validate()
    }

    fn scenario(&self, alpha: f64, psi: f64, seed: u64) -> SimScenario {
        SimScenario {
            outcome_rule: self.outcome_rule,
            ..SimScenario::new(alpha, psi, self.n, self.mode, seed)
        }
    }
}

fn step_count(step: f64) -> usize {
    (1.0 / step).round().max(1.0) as usize
}

/// `step, 2·step, …, 1`.
pub fn alpha_grid(step: f64) -> Vec<f64> {
    let m = step_count(step);
    (1..=m).map(|k| k as f64 / m as f64).collect()
}

/// `−1, −1 + step, …, 1`.
pub fn psi_grid(step: f64) -> Vec<f64> {
    let m = step_count(step);
    (0..=2 * m).map(|k| (k as f64 - m as f64) / m as f64).collect()
}

/// Summary of one replication.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Replication {
    pub psi_l: f64,
    pub psi_u: f64,
    pub sign_informative: bool,
    pub truncated: bool,
}

/// Generates and analyses one replication of a scenario.
pub fn replicate(sc: &SimScenario, learner: &LearnerSpec, folds: usize, clip_epsilon: f64) -> Result<Replication> {
    let ds = generate(sc)?;
    let assignment = FoldAssignment::new(ds.len(), folds, derive_seed(sc.seed, &[0xF0]))?;
    let ns = fit_nuisances(&ds, learner, &assignment, clip_epsilon)?;
    let report = estimate_from_nuisances(&ns, &ds, BoundsOptions::default())?;
    Ok(Replication {
        psi_l: report.psi_l.estimate,
        psi_u: report.psi_u.estimate,
        sign_informative: report.sign_informative(),
        truncated: report.any_truncated(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellResult {
    pub alpha: f64,
    pub psi: f64,
    pub mode: CovariateMode,
    /// Means over successful replications; `None` when none succeeded.
    pub mean_length: Option<f64>,
    pub mean_psi_l: Option<f64>,
    pub mean_psi_u: Option<f64>,
    pub sign_informative_frac: Option<f64>,
    pub trunc_rate: Option<f64>,
    pub fail_rate: f64,
    pub reps: usize,
    pub n: usize,
    /// Set when the scenario itself is infeasible.
    pub infeasible: Option<String>,
    pub population: Option<PopulationBounds>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyTable {
    pub mode: CovariateMode,
    pub cells: Vec<CellResult>,
}

pub const STUDY_COLUMNS: [&str; 9] = [
    "alpha",
    "psi",
    "mode",
    "mean_length",
    "sign_informative_frac",
    "trunc_rate",
    "fail_rate",
    "reps",
    "n",
];

pub const POPULATION_COLUMNS: [&str; 10] = [
    "alpha",
    "psi",
    "mode",
    "psi_l",
    "psi_u",
    "length",
    "mean_psi_l",
    "mean_psi_u",
    "alpha_l",
    "alpha_u",
];

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

impl StudyTable {
    /// Mean over cells of the per-cell mean length, skipping cells without
    /// any successful replication.
    pub fn mean_length(&self) -> Option<f64> {
        let v: Vec<f64> = self.cells.iter().filter_map(|c| c.mean_length).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Mean over cells of the population `ψ`-bound length clamped to `[−1, 1]`.
    pub fn population_mean_length(&self) -> Option<f64> {
        let v: Vec<f64> = self
            .cells
            .iter()
            .filter_map(|c| c.population.map(|b| b.psi_length()))
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn cell(&self, alpha: f64, psi: f64) -> Option<&CellResult> {
        self.cells
            .iter()
            .find(|c| (c.alpha - alpha).abs() < 1e-9 && (c.psi - psi).abs() < 1e-9)
    }

    pub fn write_csv(&self, writer: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(STUDY_COLUMNS)?;
        for c in &self.cells {
            w.write_record([
                c.alpha.to_string(),
                c.psi.to_string(),
                c.mode.to_string(),
                opt(c.mean_length),
                opt(c.sign_informative_frac),
                opt(c.trunc_rate),
                c.fail_rate.to_string(),
                c.reps.to_string(),
                c.n.to_string(),
            ])?;
        }
        flush(w)
    }

    /// Population bounds next to the Monte Carlo mean endpoints, per cell.
    pub fn write_population_csv(&self, writer: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(POPULATION_COLUMNS)?;
        for c in &self.cells {
            let b = c.population;
            w.write_record([
                c.alpha.to_string(),
                c.psi.to_string(),
                c.mode.to_string(),
                opt(b.map(|b| b.psi_l)),
                opt(b.map(|b| b.psi_u)),
                opt(b.map(|b| b.psi_length())),
                opt(c.mean_psi_l),
                opt(c.mean_psi_u),
                opt(b.map(|b| b.alpha_l)),
                opt(b.map(|b| b.alpha_u)),
            ])?;
        }
        flush(w)
    }
}

fn flush<W: Write>(mut w: csv::Writer<W>) -> Result<()> {
    w.flush().map_err(|source| Error::Io {
        path: "<study>".into(),
        source,
    })
}

/// Runs every `(α, ψ)` cell with `reps` replications in parallel. Each
/// replication is seeded by `(seed, cell, rep)`, so results do not depend on
/// scheduling. Replication failures are counted, not fatal.
pub fn run_study(cfg: &StudyConfig) -> Result<StudyTable> {
    cfg.validate()?;
    let cells: Vec<(f64, f64)> = cfg
        .alpha_grid
        .iter()
        .flat_map(|&a| cfg.psi_grid.iter().map(move |&p| (a, p)))
        .collect();
    let results = cells
        .par_iter()
        .enumerate()
        .map(|(c, &(alpha, psi))| run_cell(cfg, c, alpha, psi))
        .collect();
    Ok(StudyTable {
        mode: cfg.mode,
        cells: results,
    })
}

fn run_cell(cfg: &StudyConfig, c: usize, alpha: f64, psi: f64) -> CellResult {
    let mut out = CellResult {
        alpha,
        psi,
        mode: cfg.mode,
        mean_length: None,
        mean_psi_l: None,
        mean_psi_u: None,
        sign_informative_frac: None,
        trunc_rate: None,
        fail_rate: 1.0,
        reps: cfg.reps,
        n: cfg.n,
        infeasible: None,
        population: None,
    };
    let probe = cfg.scenario(alpha, psi, cfg.seed);
    if let Err(e) = probe.validate() {
        out.infeasible = Some(e.to_string());
        return out;
    }
    out.population = population_bounds(&probe).ok();
    let reps: Vec<Replication> = (0..cfg.reps)
        .into_par_iter()
        .filter_map(|r| {
            let sc = cfg.scenario(alpha, psi, derive_seed(cfg.seed, &[c as u64, r as u64]));
            replicate(&sc, &cfg.learner, cfg.folds, cfg.clip_epsilon).ok()
        })
        .collect();
    out.fail_rate = 1.0 - reps.len() as f64 / cfg.reps as f64;
    if !reps.is_empty() {
        let k = reps.len() as f64;
        let avg = |f: &dyn Fn(&Replication) -> f64| Some(reps.iter().map(f).sum::<f64>() / k);
        out.mean_length = avg(&|r| r.psi_u - r.psi_l);
        out.mean_psi_l = avg(&|r| r.psi_l);
        out.mean_psi_u = avg(&|r| r.psi_u);
        out.sign_informative_frac = avg(&|r| f64::from(u8::from(r.sign_informative)));
        out.trunc_rate = avg(&|r| f64::from(u8::from(r.truncated)));
    }
    out
}

/// Rows in the bundled synthetic ICU-style dataset.
pub const ICU_SYNTHETIC_N: usize = 50_000;
pub const ICU_SYNTHETIC_SEED: u64 = 3_400_001;

/// No-covariate law whose margins match the ICU application: 61% selected
/// under encouragement, survivor-complier proportion bounds `[0, 0.08]` and
/// survivor ITT bounds `[−0.19, 0.06]`.
pub fn icu_synthetic_dgp() -> DiscreteDGP {
    DiscreteDGP::new(vec![SupportPoint {
        x: vec![],
        weight: 1.0,
        pi1: 0.5,
        strata: StratumProbs {
            never_selected: 0.39,
            selection_complier_untreated: 0.082,
            selection_complier_treated: 0.04,
            always_selected_untreated: 0.282,
            survivor_complier: 0.04,
            always_selected_treated: 0.166,
        },
        outcomes: OutcomeProbs {
            selection_complier_untreated: 0.3,
            selection_complier_treated: 0.3,
            always_selected_untreated: 0.34,
            always_selected_treated: 0.34,
            survivor_complier_untreated: 0.45,
            survivor_complier_treated: 0.267,
        },
    }])
    .expect("fixed law is valid")
}

/// The bundled synthetic dataset, regenerated from its law and seed.
pub fn icu_synthetic_dataset() -> Result<Dataset> {
    let (ds, _) = icu_synthetic_dgp().sample(ICU_SYNTHETIC_N, &mut rng_from(ICU_SYNTHETIC_SEED, &[]))?;
    Ok(ds)
}
