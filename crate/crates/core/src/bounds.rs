//! Influence-function estimators of the bounds on the survivor-complier
//! proportion `α`, the survivor ITT effect `β` and the SCATE `ψ`.

use std::fmt;
use std::io::Write;

use serde::Serialize;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nuisance::{phi, MarginDiagnostics, NuisanceSet, Target};

/// Normal quantile for two-sided 95% intervals.
pub const Z_95: f64 = 1.96;
/// Smallest `α` denominator for which a `ψ` ratio is reported.
pub const DEFAULT_DENOMINATOR_FLOOR: f64 = 0.01;

/// Sign applied to `φ̂_0(S)` inside the indicator region of the `β_ℓ`
/// numerator. `Plus` targets `E{(μ_1 + λ_0 − λ_1)_+ − μ_0}`; `Minus` is kept
/// only as the rejected candidate for the consistency check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum BetaLowerSign {
    Plus,
    Minus,
}

impl BetaLowerSign {
    fn factor(self) -> f64 {
        match self {
            Self::Plus => 1.0,
            Self::Minus => -1.0,
        }
    }
}

/// Per-observation influence values. All finite and bounded by
/// `4·(1/ε + 1)` in absolute value.
#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceComponents {
    pub alpha_l: Vec<f64>,
    pub alpha_u: Vec<f64>,
    pub beta_l_num: Vec<f64>,
    pub beta_u_num: Vec<f64>,
    pub phi0_s: Vec<f64>,
}

impl InfluenceComponents {
    pub fn new(ns: &NuisanceSet, ds: &Dataset) -> Self {
        Self::with_sign(ns, ds, BetaLowerSign::Plus)
    }

    /// Indicators are strict; ties resolve to 0.
    pub fn with_sign(ns: &NuisanceSet, ds: &Dataset, sign: BetaLowerSign) -> Self {
        let p = |z, t| phi(ns, ds, z, t);
        let s0 = p(0, Target::Selection);
        let sy0 = p(0, Target::SelectedOutcome);
        let sy1 = p(1, Target::SelectedOutcome);
        let sym1 = p(1, Target::SelectedOutcomeMinusOne);
        let t0 = p(0, Target::Treated);
        let t1 = p(1, Target::Treated);
        let nc0 = p(0, Target::NotControl);
        let nc1 = p(1, Target::NotControl);
        let ind = |b: bool| f64::from(u8::from(b));
        let n = ds.len();
        let mut ic = Self {
            alpha_l: Vec::with_capacity(n),
            alpha_u: Vec::with_capacity(n),
            beta_l_num: Vec::with_capacity(n),
            beta_u_num: Vec::with_capacity(n),
            phi0_s: s0.clone(),
        };
        for i in 0..n {
            let a_l = ind(ns.theta0(i, 0) > ns.theta0(i, 1));
            let b_l = ind(ns.mu(i, 1) > ns.lambda(i, 1) - ns.lambda(i, 0));
            let b_u = ind(ns.mu(i, 1) > ns.lambda(i, 0));
            ic.alpha_u.push(t1[i] - t0[i]);
            ic.alpha_l.push(a_l * (nc1[i] - nc0[i]));
            ic.beta_u_num.push(b_u * (s0[i] - sy1[i]) + sy1[i] - sy0[i]);
            ic.beta_l_num.push(b_l * (sym1[i] + sign.factor() * s0[i]) - sy0[i]);
        }
        ic
    }

    pub fn len(&self) -> usize {
        self.phi0_s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phi0_s.is_empty()
    }

    /// `δ₁·φ_u^(α) + (1−δ₁)·φ_ℓ^(α)` at row `i`.
    pub fn alpha_mix(&self, i: usize, delta1: f64) -> f64 {
        delta1 * self.alpha_u[i] + (1.0 - delta1) * self.alpha_l[i]
    }

    /// `δ₂·φ_u^(β) + (1−δ₂)·φ_ℓ^(β)` numerators at row `i`.
    pub fn beta_mix(&self, i: usize, delta2: f64) -> f64 {
        delta2 * self.beta_u_num[i] + (1.0 - delta2) * self.beta_l_num[i]
    }
}

/// Standard errors at or below this are treated as zero.
pub const DEGENERATE_SE: f64 = 1e-12;

pub(crate) fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation with the `n − 1` divisor.
pub(crate) fn sample_sd(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)).sqrt()
}

/// Ratio estimate `P_n φ_β / P_n φ_α` and its standard error
/// `sqrt(P_n{(φ_β − ψ̂φ_α)²}) / |P_n φ_α| / √n`.
pub(crate) fn ratio_se(num: impl Fn(usize) -> f64, den: impl Fn(usize) -> f64, n: usize) -> (f64, f64) {
    let nf = n as f64;
    let pn_num = (0..n).map(&num).sum::<f64>() / nf;
    let pn_den = (0..n).map(&den).sum::<f64>() / nf;
    let psi = pn_num / pn_den;
    let var = (0..n).map(|i| (num(i) - psi * den(i)).powi(2)).sum::<f64>() / nf / (pn_den * pn_den);
    (psi, (var / nf).sqrt())
}

/// One bound: the unprocessed estimate, the reported value and its interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundEstimate {
    /// Before clamping, isotonization or truncation.
    pub raw: f64,
    pub estimate: f64,
    /// `None` for bounds reported at a truncated extreme.
    pub se: Option<f64>,
    pub ci: Option<(f64, f64)>,
}

impl BoundEstimate {
    fn with_se(raw: f64, estimate: f64, se: f64) -> Self {
        Self {
            raw,
            estimate,
            se: Some(se),
            ci: Some((estimate - Z_95 * se, estimate + Z_95 * se)),
        }
    }

    fn truncated(raw: f64, estimate: f64) -> Self {
        Self {
            raw,
            estimate,
            se: None,
            ci: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct BoundsFlags {
    pub alpha_clamped: bool,
    pub alpha_isotonized: bool,
    pub beta_clamped: bool,
    pub beta_isotonized: bool,
    /// `ψ̂_ℓ` reported as −1, from a small denominator or clamping.
    pub psi_l_truncated: bool,
    pub psi_u_truncated: bool,
    /// The selected `ψ` denominator fell at or below the floor.
    pub psi_l_denominator_floor: bool,
    pub psi_u_denominator_floor: bool,
    /// Some reported standard error is exactly zero.
    pub degenerate_se: bool,
    /// Nuisances fitted without sample splitting.
    pub diagnostic_mode: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundsReport {
    pub n: usize,
    pub alpha_l: BoundEstimate,
    pub alpha_u: BoundEstimate,
    pub beta_l: BoundEstimate,
    pub beta_u: BoundEstimate,
    /// `Ê{λ_0(X)}`, the mean of `φ̂_0(S)`.
    pub mean_lambda0: BoundEstimate,
    pub psi_l: BoundEstimate,
    pub psi_u: BoundEstimate,
    pub denominator_floor: f64,
    pub flags: BoundsFlags,
    pub margins: Option<MarginDiagnostics>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundsOptions {
    pub denominator_floor: f64,
}

impl Default for BoundsOptions {
    fn default() -> Self {
        Self {
            denominator_floor: DEFAULT_DENOMINATOR_FLOOR,
        }
    }
}

/// Which quantity [`standard_errors`] should report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum BoundTarget {
    AlphaLower,
    AlphaUpper,
    BetaLower,
    BetaUpper,
    MeanLambda0,
    PsiLower,
    PsiUpper,
}

/// Unprocessed estimate and its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StandardError {
    pub estimate: f64,
    pub se: f64,
    pub ci: (f64, f64),
    /// Zero variance.
    pub degenerate: bool,
}

fn require_len(ic: &InfluenceComponents) -> Result<usize> {
    let n = ic.len();
    let ok = [&ic.alpha_l, &ic.alpha_u, &ic.beta_l_num, &ic.beta_u_num]
        .iter()
        .all(|v| v.len() == n);
    if !ok {
        return Err(Error::InvalidParameter("influence columns have different lengths".into()));
    }
    if n < 2 {
        return Err(Error::InvalidParameter("at least two observations are required".into()));
    }
    Ok(n)
}

fn mean_lambda0(ic: &InfluenceComponents) -> Result<f64> {
    let value = mean(&ic.phi0_s);
    if value > 0.0 {
        Ok(value)
    } else {
        Err(Error::NonPositiveSelection { value })
    }
}

/// Unprocessed estimate and delta-method SE for one target. The `ψ` targets
/// use the sign-dependent denominator chosen by the raw `β̂` estimates.
pub fn standard_errors(ic: &InfluenceComponents, target: BoundTarget) -> Result<StandardError> {
    let n = require_len(ic)?;
    let root_n = (n as f64).sqrt();
    let (estimate, se) = match target {
        BoundTarget::AlphaLower => (mean(&ic.alpha_l), sample_sd(&ic.alpha_l) / root_n),
        BoundTarget::AlphaUpper => (mean(&ic.alpha_u), sample_sd(&ic.alpha_u) / root_n),
        BoundTarget::MeanLambda0 => (mean(&ic.phi0_s), sample_sd(&ic.phi0_s) / root_n),
        BoundTarget::BetaLower | BoundTarget::BetaUpper => {
            let num = if target == BoundTarget::BetaLower {
                &ic.beta_l_num
            } else {
                &ic.beta_u_num
            };
            let lam = mean_lambda0(ic)?;
            let beta = mean(num) / lam;
            let scores: Vec<f64> = (0..n).map(|i| (num[i] - beta * ic.phi0_s[i]) / lam).collect();
            (beta, sample_sd(&scores) / root_n)
        }
        BoundTarget::PsiLower | BoundTarget::PsiUpper => {
            let lam = mean_lambda0(ic)?;
            let (delta1, delta2) = if target == BoundTarget::PsiLower {
                let beta_l = mean(&ic.beta_l_num) / lam;
                (f64::from(u8::from(beta_l > 0.0)), 0.0)
            } else {
                let beta_u = mean(&ic.beta_u_num) / lam;
                (f64::from(u8::from(beta_u <= 0.0)), 1.0)
            };
            ratio_se(|i| ic.beta_mix(i, delta2), |i| ic.alpha_mix(i, delta1), n)
        }
    };
    Ok(StandardError {
        estimate,
        se,
        ci: (estimate - Z_95 * se, estimate + Z_95 * se),
        degenerate: se <= DEGENERATE_SE,
    })
}

/// Pools a crossed pair to its midpoint.
fn isotonize(lo: f64, hi: f64) -> (f64, f64, bool) {
    if lo > hi {
        let m = 0.5 * (lo + hi);
        (m, m, true)
    } else {
        (lo, hi, false)
    }
}

/// Theorem-style `ψ` bounds from `α`, `β` bounds and `E{λ_0}`; denominators
/// are returned alongside for the floor check.
pub fn psi_bounds(alpha: (f64, f64), beta: (f64, f64), mean_lambda0: f64) -> ((f64, f64), (f64, f64)) {
    let (a_l, a_u) = alpha;
    let (b_l, b_u) = beta;
    let den_l = (a_u - a_l) * f64::from(u8::from(b_l > 0.0)) + a_l;
    let den_u = (a_l - a_u) * f64::from(u8::from(b_u > 0.0)) + a_u;
    ((b_l * mean_lambda0 / den_l, b_u * mean_lambda0 / den_u), (den_l, den_u))
}

pub fn estimate_bounds(ic: &InfluenceComponents) -> Result<BoundsReport> {
    estimate_bounds_with(ic, BoundsOptions::default())
}

pub fn estimate_bounds_with(ic: &InfluenceComponents, options: BoundsOptions) -> Result<BoundsReport> {
    let n = require_len(ic)?;
    let floor = options.denominator_floor;
    if !(floor >= 0.0 && floor.is_finite()) {
        return Err(Error::InvalidParameter(format!("denominator floor must be nonnegative, got {floor}")));
    }
    let mut flags = BoundsFlags::default();
    let lam = standard_errors(ic, BoundTarget::MeanLambda0)?;
    mean_lambda0(ic)?;
    let se_a_l = standard_errors(ic, BoundTarget::AlphaLower)?;
    let se_a_u = standard_errors(ic, BoundTarget::AlphaUpper)?;
    let se_b_l = standard_errors(ic, BoundTarget::BetaLower)?;
    let se_b_u = standard_errors(ic, BoundTarget::BetaUpper)?;

    let clamp = |v: f64, lo: f64, hi: f64, flag: &mut bool| {
        let c = v.clamp(lo, hi);
        *flag |= c != v;
        c
    };
    let a_l = clamp(se_a_l.estimate, 0.0, 1.0, &mut flags.alpha_clamped);
    let a_u = clamp(se_a_u.estimate, 0.0, 1.0, &mut flags.alpha_clamped);
    let (a_l, a_u, crossed) = isotonize(a_l, a_u);
    flags.alpha_isotonized = crossed;
    let b_l = clamp(se_b_l.estimate, -1.0, 1.0, &mut flags.beta_clamped);
    let b_u = clamp(se_b_u.estimate, -1.0, 1.0, &mut flags.beta_clamped);
    let (b_l, b_u, crossed) = isotonize(b_l, b_u);
    flags.beta_isotonized = crossed;

    let (raw_psi, _) = psi_bounds(
        (se_a_l.estimate, se_a_u.estimate),
        (se_b_l.estimate, se_b_u.estimate),
        lam.estimate,
    );
    let ((psi_l, psi_u), (den_l, den_u)) = psi_bounds((a_l, a_u), (b_l, b_u), lam.estimate);

    let finish = |raw: f64, value: f64, den: f64, extreme: f64, target, floor_flag: &mut bool, trunc: &mut bool| {
        if den <= floor {
            *floor_flag = true;
            *trunc = true;
            return Ok(BoundEstimate::truncated(raw, extreme));
        }
        if !(-1.0..=1.0).contains(&value) {
            *trunc = true;
            return Ok(BoundEstimate::truncated(raw, value.clamp(-1.0, 1.0)));
        }
        let se = standard_errors(ic, target)?;
        Ok::<_, Error>(BoundEstimate::with_se(raw, value, se.se))
    };
    let psi_l = finish(
        raw_psi.0,
        psi_l,
        den_l,
        -1.0,
        BoundTarget::PsiLower,
        &mut flags.psi_l_denominator_floor,
        &mut flags.psi_l_truncated,
    )?;
    let psi_u = finish(
        raw_psi.1,
        psi_u,
        den_u,
        1.0,
        BoundTarget::PsiUpper,
        &mut flags.psi_u_denominator_floor,
        &mut flags.psi_u_truncated,
    )?;

    let report = BoundsReport {
        n,
        alpha_l: BoundEstimate::with_se(se_a_l.estimate, a_l, se_a_l.se),
        alpha_u: BoundEstimate::with_se(se_a_u.estimate, a_u, se_a_u.se),
        beta_l: BoundEstimate::with_se(se_b_l.estimate, b_l, se_b_l.se),
        beta_u: BoundEstimate::with_se(se_b_u.estimate, b_u, se_b_u.se),
        mean_lambda0: BoundEstimate::with_se(lam.estimate, lam.estimate, lam.se),
        psi_l,
        psi_u,
        denominator_floor: floor,
        flags: BoundsFlags {
            degenerate_se: [se_a_l, se_a_u, se_b_l, se_b_u, lam].iter().any(|s| s.degenerate)
                || [psi_l, psi_u].iter().any(|b| b.se.is_some_and(|se| se <= DEGENERATE_SE)),
            ..flags
        },
        margins: None,
        warnings: Vec::new(),
    };
    debug_assert!(report.psi_l.estimate <= report.psi_u.estimate + 1e-12);
    Ok(report)
}

/// Full estimate from nuisances: components, bounds, margin diagnostics and
/// learner warnings in one report.
pub fn estimate_from_nuisances(ns: &NuisanceSet, ds: &Dataset, options: BoundsOptions) -> Result<BoundsReport> {
    let ic = InfluenceComponents::new(ns, ds);
    let mut report = estimate_bounds_with(&ic, options)?;
    report.flags.diagnostic_mode = ns.is_diagnostic();
    report.margins = Some(crate::nuisance::margin_diagnostics(ns));
    report.warnings = ns.warnings().iter().map(ToString::to_string).collect();
    Ok(report)
}

impl BoundsReport {
    pub fn sign_informative(&self) -> bool {
        self.psi_l.estimate > 0.0 || self.psi_u.estimate < 0.0
    }

    pub fn psi_length(&self) -> f64 {
        self.psi_u.estimate - self.psi_l.estimate
    }

    pub fn any_truncated(&self) -> bool {
        self.flags.psi_l_truncated || self.flags.psi_u_truncated
    }

    /// Flat `(name, value)` pairs; missing values are empty strings.
    pub fn record(&self) -> Vec<(String, String)> {
        let opt = |v: Option<f64>| v.map_or_else(String::new, |v| v.to_string());
        let mut out = vec![("n".to_string(), self.n.to_string())];
        for (name, b) in [
            ("alpha_l", &self.alpha_l),
            ("alpha_u", &self.alpha_u),
            ("beta_l", &self.beta_l),
            ("beta_u", &self.beta_u),
            ("mean_lambda0", &self.mean_lambda0),
            ("psi_l", &self.psi_l),
            ("psi_u", &self.psi_u),
        ] {
            out.push((name.to_string(), b.estimate.to_string()));
            out.push((format!("{name}_raw"), b.raw.to_string()));
            out.push((format!("{name}_se"), opt(b.se)));
            out.push((format!("{name}_ci_lo"), opt(b.ci.map(|c| c.0))));
            out.push((format!("{name}_ci_hi"), opt(b.ci.map(|c| c.1))));
        }
        let f = &self.flags;
        for (name, v) in [
            ("alpha_clamped", f.alpha_clamped),
            ("alpha_isotonized", f.alpha_isotonized),
            ("beta_clamped", f.beta_clamped),
            ("beta_isotonized", f.beta_isotonized),
            ("psi_l_truncated", f.psi_l_truncated),
            ("psi_u_truncated", f.psi_u_truncated),
            ("psi_l_denominator_floor", f.psi_l_denominator_floor),
            ("psi_u_denominator_floor", f.psi_u_denominator_floor),
            ("degenerate_se", f.degenerate_se),
            ("diagnostic_mode", f.diagnostic_mode),
            ("margins_fragile", self.margins.as_ref().is_some_and(MarginDiagnostics::fragile)),
        ] {
            out.push((name.to_string(), u8::from(v).to_string()));
        }
        out.push(("denominator_floor".to_string(), self.denominator_floor.to_string()));
        out
    }

    /// Header plus one data row.
    pub fn write_csv(&self, writer: impl Write) -> Result<()> {
        let rec = self.record();
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(rec.iter().map(|(k, _)| k))?;
        w.write_record(rec.iter().map(|(_, v)| v))?;
        w.flush().map_err(|source| Error::Io {
            path: "<report>".into(),
            source,
        })
    }
}

impl fmt::Display for BoundsReport {
    /// `key=value` lines.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.record() {
            writeln!(f, "{k}={v}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(n: usize, a_l: f64, a_u: f64, b_l: f64, b_u: f64, lam: f64) -> InfluenceComponents {
        InfluenceComponents {
            alpha_l: vec![a_l; n],
            alpha_u: vec![a_u; n],
            beta_l_num: vec![b_l * lam; n],
            beta_u_num: vec![b_u * lam; n],
            phi0_s: vec![lam; n],
        }
    }

    #[test]
    fn constant_components_have_zero_se() {
        let r = estimate_bounds(&constant(10, 0.2, 0.4, 0.1, 0.3, 0.5)).unwrap();
        assert!(r.alpha_u.se.unwrap() <= DEGENERATE_SE);
        assert!(r.flags.degenerate_se);
        assert!((r.psi_l.estimate - 0.1 * 0.5 / 0.4).abs() < 1e-15);
        assert!((r.psi_u.estimate - 0.3 * 0.5 / 0.2).abs() < 1e-15);
    }

    #[test]
    fn small_denominator_truncates() {
        let r = estimate_bounds(&constant(10, 0.0, 0.08, -0.19, 0.06, 0.49)).unwrap();
        assert_eq!(r.psi_l.estimate, -1.0);
        assert_eq!(r.psi_u.estimate, 1.0);
        assert!(r.flags.psi_u_denominator_floor && r.flags.psi_u_truncated);
        assert!(r.psi_u.se.is_none());
    }

    #[test]
    fn crossed_pairs_are_pooled() {
        let r = estimate_bounds(&constant(4, 0.5, 0.3, 0.2, 0.1, 0.5)).unwrap();
        assert_eq!(r.alpha_l.estimate, 0.4);
        assert_eq!(r.alpha_u.estimate, 0.4);
        assert!((r.beta_l.estimate - 0.15).abs() < 1e-15);
        assert!(r.flags.alpha_isotonized && r.flags.beta_isotonized);
    }

    #[test]
    fn non_positive_selection_is_fatal() {
        let err = estimate_bounds(&constant(4, 0.1, 0.3, 0.0, 0.1, 0.0)).unwrap_err();
        assert!(matches!(err, Error::NonPositiveSelection { .. }));
    }

    #[test]
    fn psi_denominators_follow_beta_signs() {
        // beta_l > 0 divides by alpha_u; beta_u > 0 divides by alpha_l.
        let ((l, u), (dl, du)) = psi_bounds((0.2, 0.5), (0.1, 0.3), 1.0);
        assert_eq!((dl, du), (0.5, 0.2));
        assert!((l - 0.2).abs() < 1e-15 && (u - 1.5).abs() < 1e-15);
        let (_, (dl, du)) = psi_bounds((0.2, 0.5), (-0.3, -0.1), 1.0);
        assert_eq!((dl, du), (0.2, 0.5));
    }

    #[test]
    fn beta_se_uses_ratio_scores() {
        let ic = InfluenceComponents {
            alpha_l: vec![0.1, 0.2, 0.3],
            alpha_u: vec![0.4, 0.5, 0.6],
            beta_l_num: vec![0.0, 0.1, -0.1],
            beta_u_num: vec![0.2, 0.4, 0.3],
            phi0_s: vec![0.5, 0.7, 0.6],
        };
        let se = standard_errors(&ic, BoundTarget::BetaUpper).unwrap();
        let lam = 0.6;
        let beta = 0.3 / lam;
        let scores: Vec<f64> = (0..3).map(|i| (ic.beta_u_num[i] - beta * ic.phi0_s[i]) / lam).collect();
        assert!((se.estimate - beta).abs() < 1e-12);
        assert!((se.se - sample_sd(&scores) / 3f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn record_is_flat_and_complete() {
        let r = estimate_bounds(&constant(10, 0.0, 0.08, -0.19, 0.06, 0.49)).unwrap();
        let rec = r.record();
        let get = |k: &str| rec.iter().find(|(n, _)| n == k).unwrap().1.clone();
        assert_eq!(get("psi_u_se"), "");
        assert_eq!(get("psi_u_truncated"), "1");
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 2);
    }
}
