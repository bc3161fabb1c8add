//! Cross-fitted nuisance functions and the uncentered influence-function
//! component `φ_z(T)`.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::learners::{cross_fit, Features, FitWarning, FoldAssignment, Learner};

pub const DEFAULT_CLIP_EPSILON: f64 = 0.01;

/// Slack for the structural identities after floating-point construction.
const IDENTITY_SLACK: f64 = 1e-12;

/// Per-observation nuisance values, indexed `[i][z]`.
///
/// Invariants: `π̂_z ∈ [ε, 1−ε]` with `π̂_0 + π̂_1 = 1`; `θ̂_z(1), θ̂_z(0) ≥ 0`
/// with `θ̂_z(1) + θ̂_z(0) = λ̂_z ≤ 1`; `0 ≤ μ̂_z ≤ λ̂_z`.
#[derive(Debug, Clone, PartialEq)]
pub struct NuisanceSet {
    pi: Vec<[f64; 2]>,
    theta1: Vec<[f64; 2]>,
    theta0: Vec<[f64; 2]>,
    lambda: Vec<[f64; 2]>,
    mu: Vec<[f64; 2]>,
    clip_epsilon: f64,
    diagnostic: bool,
    warnings: Vec<NuisanceWarning>,
}

/// A learner warning tagged with the nuisance and fold that raised it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NuisanceWarning {
    pub nuisance: &'static str,
    pub fold: usize,
    pub warning: FitWarning,
}

impl fmt::Display for NuisanceWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (fold {}): {}", self.nuisance, self.fold, self.warning)
    }
}

fn check_epsilon(clip_epsilon: f64) -> Result<()> {
    if clip_epsilon > 0.0 && clip_epsilon < 0.5 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "clip_epsilon must lie in (0, 0.5), got {clip_epsilon}"
        )))
    }
}

impl NuisanceSet {
    /// Assembles a set from raw per-arm values, enforcing the invariants:
    /// `π̂_1` is clipped, `θ̂_z(1)` must lie in `[0, λ̂_z]` and `θ̂_z(0)` is
    /// taken as `λ̂_z − θ̂_z(1)`, `μ̂_z` is projected onto `[0, λ̂_z]`.
    pub fn from_parts(
        pi1: Vec<f64>,
        lambda: Vec<[f64; 2]>,
        theta1: Vec<[f64; 2]>,
        mu: Vec<[f64; 2]>,
        clip_epsilon: f64,
    ) -> Result<Self> {
        check_epsilon(clip_epsilon)?;
        let n = pi1.len();
        if lambda.len() != n || theta1.len() != n || mu.len() != n {
            return Err(Error::InvalidParameter("nuisance columns have different lengths".into()));
        }
        let unit = |v: f64| v.is_finite() && (-IDENTITY_SLACK..=1.0 + IDENTITY_SLACK).contains(&v);
        let mut pi = Vec::with_capacity(n);
        let mut theta0 = Vec::with_capacity(n);
        let mut theta1_out = Vec::with_capacity(n);
        let mut mu_out = Vec::with_capacity(n);
        let mut lambda = lambda;
        for i in 0..n {
            if !unit(pi1[i]) {
                return Err(Error::InvalidParameter(format!("pi[{i}] = {} outside [0,1]", pi1[i])));
            }
            let p1 = pi1[i].clamp(clip_epsilon, 1.0 - clip_epsilon);
            pi.push([1.0 - p1, p1]);
            let mut t0 = [0.0; 2];
            let mut t1 = [0.0; 2];
            let mut m = [0.0; 2];
            for z in 0..2 {
                let l = lambda[i][z];
                if !unit(l) || !unit(theta1[i][z]) || !mu[i][z].is_finite() {
                    return Err(Error::InvalidParameter(format!("nuisance values at row {i} outside [0,1]")));
                }
                let l = l.clamp(0.0, 1.0);
                lambda[i][z] = l;
                if theta1[i][z] > l + IDENTITY_SLACK {
                    return Err(Error::InvalidParameter(format!(
                        "theta_{z}(1) = {} exceeds lambda_{z} = {l} at row {i}",
                        theta1[i][z]
                    )));
                }
                t1[z] = theta1[i][z].clamp(0.0, l);
                t0[z] = l - t1[z];
                m[z] = mu[i][z].clamp(0.0, l);
            }
            theta1_out.push(t1);
            theta0.push(t0);
            mu_out.push(m);
        }
        Ok(Self {
            pi,
            theta1: theta1_out,
            theta0,
            lambda,
            mu: mu_out,
            clip_epsilon,
            diagnostic: false,
            warnings: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.pi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pi.is_empty()
    }

    pub fn pi(&self, i: usize, z: usize) -> f64 {
        self.pi[i][z]
    }

    pub fn theta1(&self, i: usize, z: usize) -> f64 {
        self.theta1[i][z]
    }

    pub fn theta0(&self, i: usize, z: usize) -> f64 {
        self.theta0[i][z]
    }

    pub fn lambda(&self, i: usize, z: usize) -> f64 {
        self.lambda[i][z]
    }

    pub fn mu(&self, i: usize, z: usize) -> f64 {
        self.mu[i][z]
    }

    pub fn clip_epsilon(&self) -> f64 {
        self.clip_epsilon
    }

    /// Fitted without sample splitting (`K = 1`).
    pub fn is_diagnostic(&self) -> bool {
        self.diagnostic
    }

    pub fn warnings(&self) -> &[NuisanceWarning] {
        &self.warnings
    }

    /// Plug-in regression `Ê(T | X_i, Z = z)`.
    pub fn regression(&self, i: usize, z: usize, target: Target) -> f64 {
        match target {
            Target::Selection => self.lambda[i][z],
            Target::SelectedOutcome => self.mu[i][z],
            Target::SelectedOutcomeMinusOne => self.mu[i][z] - self.lambda[i][z],
            Target::Treated => self.theta1[i][z],
            Target::NotControl => 1.0 - self.theta0[i][z],
        }
    }

    /// Writes one row per observation with every nuisance value.
    pub fn write_audit(&self, writer: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "row", "pi1", "lambda0", "lambda1", "theta0_1", "theta1_1", "theta0_0", "theta1_0", "mu0", "mu1",
        ])?;
        for i in 0..self.len() {
            let mut rec = vec![(i + 1).to_string()];
            rec.extend(
                [
                    self.pi[i][1],
                    self.lambda[i][0],
                    self.lambda[i][1],
                    self.theta1[i][0],
                    self.theta1[i][1],
                    self.theta0[i][0],
                    self.theta0[i][1],
                    self.mu[i][0],
                    self.mu[i][1],
                ]
                .iter()
                .map(f64::to_string),
            );
            w.write_record(&rec)?;
        }
        w.flush().map_err(|source| Error::Io {
            path: "<audit>".into(),
            source,
        })
    }
}

/// Fits `π̂`, `λ̂_z`, `μ̂_z` and `θ̂_z = λ̂_z·q̂_z`, where `q̂_z` regresses
/// `1(A=1)` within `{S=1, Z=z}`. All predictions are out-of-fold.
pub fn fit_nuisances(
    ds: &Dataset,
    learner: &dyn Learner,
    folds: &FoldAssignment,
    clip_epsilon: f64,
) -> Result<NuisanceSet> {
    check_epsilon(clip_epsilon)?;
    let n = ds.len();
    if folds.len() != n {
        return Err(Error::InvalidParameter(format!(
            "fold assignment covers {} rows, dataset has {n}",
            folds.len()
        )));
    }
    for z in [false, true] {
        let selected = (0..n).any(|i| ds.instrument()[i] == z && ds.selected()[i]);
        if !selected {
            return Err(Error::EmptyArm {
                arm: u8::from(z),
                what: "theta and mu",
            });
        }
    }
    let features = Features::new(ds.covariates(), n, ds.dim())?;
    let z: Vec<bool> = ds.instrument().to_vec();
    let s: Vec<bool> = ds.selected().to_vec();
    let sy: Vec<bool> = (0..n).map(|i| ds.selected_outcome(i)).collect();
    let treated: Vec<bool> = ds.treatment().iter().map(|a| a.is_treated()).collect();
    let arm: [Vec<bool>; 2] = [z.iter().map(|&v| !v).collect(), z.clone()];
    let arm_selected: [Vec<bool>; 2] =
        std::array::from_fn(|a| (0..n).map(|i| arm[a][i] && s[i]).collect());

    let jobs: [(&'static str, &[bool], Option<&[bool]>); 7] = [
        ("pi", &z, None),
        ("lambda0", &s, Some(&arm[0])),
        ("lambda1", &s, Some(&arm[1])),
        ("mu0", &sy, Some(&arm[0])),
        ("mu1", &sy, Some(&arm[1])),
        ("q0", &treated, Some(&arm_selected[0])),
        ("q1", &treated, Some(&arm_selected[1])),
    ];
    let fits = jobs
        .par_iter()
        .map(|&(_, labels, mask)| cross_fit(learner, features, labels, mask, None, folds))
        .collect::<Result<Vec<_>>>()?;

    let mut warnings = Vec::new();
    for ((name, _, _), fit) in jobs.iter().zip(&fits) {
        warnings.extend(fit.warnings.iter().map(|(fold, w)| NuisanceWarning {
            nuisance: name,
            fold: *fold,
            warning: w.clone(),
        }));
    }
    let p = |j: usize, i: usize| fits[j].predictions[i];
    let lambda: Vec<[f64; 2]> = (0..n).map(|i| [p(1, i), p(2, i)]).collect();
    let mu: Vec<[f64; 2]> = (0..n).map(|i| [p(3, i), p(4, i)]).collect();
    let theta1: Vec<[f64; 2]> = (0..n)
        .map(|i| [lambda[i][0] * p(5, i), lambda[i][1] * p(6, i)])
        .collect();
    let mut set = NuisanceSet::from_parts(fits[0].predictions.clone(), lambda, theta1, mu, clip_epsilon)?;
    set.diagnostic = folds.is_diagnostic();
    set.warnings = warnings;
    Ok(set)
}

/// Variables whose arm-specific means enter the bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Target {
    /// `S`.
    Selection,
    /// `S·Y`, zero when `S = 0`.
    SelectedOutcome,
    /// `S·(Y−1)`, zero when `S = 0`.
    SelectedOutcomeMinusOne,
    /// `1(A = 1)`.
    Treated,
    /// `1(A ≠ 0)`, one when the treatment is undefined.
    NotControl,
}

impl Target {
    pub const ALL: [Target; 5] = [
        Self::Selection,
        Self::SelectedOutcome,
        Self::SelectedOutcomeMinusOne,
        Self::Treated,
        Self::NotControl,
    ];

    pub fn value(self, ds: &Dataset, i: usize) -> f64 {
        let s = ds.selected()[i];
        let y = ds.outcome()[i] == Some(true);
        let v = match self {
            Self::Selection => s,
            Self::SelectedOutcome => s && y,
            Self::SelectedOutcomeMinusOne => return if s && !y { -1.0 } else { 0.0 },
            Self::Treated => ds.treatment()[i].is_treated(),
            Self::NotControl => ds.treatment()[i].is_not_control(),
        };
        f64::from(u8::from(v))
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Selection => "S",
            Self::SelectedOutcome => "SY",
            Self::SelectedOutcomeMinusOne => "S(Y-1)",
            Self::Treated => "1(A=1)",
            Self::NotControl => "1(A!=0)",
        })
    }
}

impl FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let compact: String = s.chars().filter(|c| !c.is_whitespace()).collect();
        Ok(match compact.as_str() {
            "S" | "s" => Self::Selection,
            "SY" | "sy" => Self::SelectedOutcome,
            "S(Y-1)" | "s(y-1)" | "S(Y−1)" => Self::SelectedOutcomeMinusOne,
            "1(A=1)" | "treated" => Self::Treated,
            "1(A!=0)" | "1(A≠0)" | "not-control" => Self::NotControl,
            _ => return Err(Error::UnknownTarget(s.to_string())),
        })
    }
}

/// `φ̂_z(T)_i = 1(Z_i=z)/π̂_z(X_i)·{T_i − Ê(T|X_i,z)} + Ê(T|X_i,z)` for every row.
pub fn phi(ns: &NuisanceSet, ds: &Dataset, z: usize, target: Target) -> Vec<f64> {
    assert_eq!(ns.len(), ds.len(), "nuisance set not aligned with dataset");
    assert!(z < 2, "instrument arm must be 0 or 1");
    (0..ds.len())
        .map(|i| {
            let fitted = ns.regression(i, z, target);
            if usize::from(ds.instrument()[i]) == z {
                (target.value(ds, i) - fitted) / ns.pi(i, z) + fitted
            } else {
                fitted
            }
        })
        .collect()
}

pub const MARGIN_TAUS: [f64; 3] = [0.01, 0.05, 0.10];
/// Fraction within 0.05 of a boundary above which inference is fragile.
pub const FRAGILE_FRACTION: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContrastMass {
    pub name: &'static str,
    /// Fraction of rows with `|γ̂| < τ`, one entry per [`MARGIN_TAUS`].
    pub fractions: [f64; 3],
    pub fragile: bool,
}

/// Empirical mass near the indicator boundaries of the bound estimators.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarginDiagnostics {
    pub contrasts: [ContrastMass; 3],
}

impl MarginDiagnostics {
    pub fn fragile(&self) -> bool {
        self.contrasts.iter().any(|c| c.fragile)
    }
}

impl fmt::Display for MarginDiagnostics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.contrasts {
            for (tau, frac) in MARGIN_TAUS.iter().zip(&c.fractions) {
                writeln!(f, "margin.{}.tau_{tau}={frac}", c.name)?;
            }
            writeln!(f, "margin.{}.fragile={}", c.name, c.fragile)?;
        }
        Ok(())
    }
}

/// Contrasts `γ₁ = θ̂_1(0)−θ̂_0(0)`, `γ₂ = μ̂_1−(λ̂_1−λ̂_0)`, `γ₃ = μ̂_1−λ̂_0`.
pub fn margin_diagnostics(ns: &NuisanceSet) -> MarginDiagnostics {
    let n = ns.len().max(1) as f64;
    let contrast = |name: &'static str, g: &dyn Fn(usize) -> f64| {
        let mut fractions = [0.0; 3];
        for i in 0..ns.len() {
            let v = g(i).abs();
            for (frac, tau) in fractions.iter_mut().zip(MARGIN_TAUS) {
                if v < tau {
                    *frac += 1.0;
                }
            }
        }
        fractions.iter_mut().for_each(|f| *f /= n);
        ContrastMass {
            name,
            fractions,
            fragile: fractions[1] > FRAGILE_FRACTION,
        }
    };
    MarginDiagnostics {
        contrasts: [
            contrast("gamma1", &|i| ns.theta0(i, 1) - ns.theta0(i, 0)),
            contrast("gamma2", &|i| ns.mu(i, 1) - (ns.lambda(i, 1) - ns.lambda(i, 0))),
            contrast("gamma3", &|i| ns.mu(i, 1) - ns.lambda(i, 0)),
        ],
    }
}
