//! Probability regressions for binary labels and the K-fold cross-fitting
//! engine that produces out-of-fold predictions.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from;

/// Logistic predictions never leave this band.
pub const LOGISTIC_CLIP: f64 = 1e-6;

/// Borrowed row-major `n × d` covariate block.
#[derive(Debug, Clone, Copy)]
pub struct Features<'a> {
    data: &'a [f64],
    rows: usize,
    dim: usize,
}

impl<'a> Features<'a> {
    pub fn new(data: &'a [f64], rows: usize, dim: usize) -> Result<Self> {
        if data.len() != rows * dim {
            return Err(Error::InvalidParameter(format!(
                "feature block has {} values, expected {rows} x {dim}",
                data.len()
            )));
        }
        Ok(Self { data, rows, dim })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &'a [f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Non-fatal conditions raised while fitting.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum FitWarning {
    /// Every training label was identical; the learner predicts that label.
    DegenerateLabels { value: f64 },
    /// IRLS stopped at `max_iter`; the best iterate is used.
    NotConverged { iterations: usize },
    /// Some training fits fell outside the logistic clip band.
    Separation,
}

impl fmt::Display for FitWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::DegenerateLabels { value } => write!(f, "all training labels equal {value}"),
            Self::NotConverged { iterations } => {
                write!(f, "logistic IRLS did not converge in {iterations} iterations")
            }
            Self::Separation => write!(f, "logistic fit shows (quasi-)separation"),
        }
    }
}

/// A fitted probability regression.
pub trait Predictor: Send + Sync + fmt::Debug {
    fn predict(&self, x: &[f64]) -> f64;
}

/// A learner that can be fitted to weighted binary labels. Implement this to
/// plug a custom regression into [`cross_fit`].
pub trait Learner: Send + Sync {
    fn fit(&self, features: Features<'_>, labels: &[bool], weights: Option<&[f64]>) -> Result<FittedLearner>;
}

#[derive(Debug)]
pub struct FittedLearner {
    predictor: Box<dyn Predictor>,
    warning: Option<FitWarning>,
}

impl FittedLearner {
    pub fn new(predictor: Box<dyn Predictor>, warning: Option<FitWarning>) -> Self {
        Self { predictor, warning }
    }

    /// Always in `[0, 1]`.
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.predictor.predict(x).clamp(0.0, 1.0)
    }

    pub fn warning(&self) -> Option<&FitWarning> {
        self.warning.as_ref()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LearnerSpec {
    MarginalMean,
    LogisticIrls { max_iter: usize, tol: f64, ridge: f64 },
    Knn { k: usize },
}

impl LearnerSpec {
    pub const DEFAULT_KNN_K: usize = 25;

    pub fn logistic() -> Self {
        Self::LogisticIrls {
            max_iter: 25,
            tol: 1e-8,
            ridge: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::MarginalMean => Ok(()),
            Self::LogisticIrls { max_iter, tol, ridge } => {
                if max_iter == 0 {
                    return Err(Error::InvalidParameter("logistic max_iter must be at least 1".into()));
                }
                if !(tol > 0.0 && tol.is_finite()) {
                    return Err(Error::InvalidParameter(format!("logistic tol must be positive, got {tol}")));
                }
                if !(ridge >= 0.0 && ridge.is_finite()) {
                    return Err(Error::InvalidParameter(format!(
                        "logistic ridge must be nonnegative, got {ridge}"
                    )));
                }
                Ok(())
            }
            Self::Knn { k: 0 } => Err(Error::InvalidParameter("knn k must be at least 1".into())),
            Self::Knn { .. } => Ok(()),
        }
    }
}

impl fmt::Display for LearnerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::MarginalMean => write!(f, "marginal-mean"),
            Self::LogisticIrls { max_iter, tol, ridge } => {
                write!(f, "logistic-irls:max_iter={max_iter},tol={tol},ridge={ridge}")
            }
            Self::Knn { k } => write!(f, "knn:k={k}"),
        }
    }
}

/// Accepts `marginal-mean`, `logistic-irls[:max_iter=..,tol=..,ridge=..]`
/// (alias `logistic`) and `knn[:k=..]` (or `knn:25`).
impl FromStr for LearnerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, params) = s.trim().split_once(':').unwrap_or((s.trim(), ""));
        let pairs = params
            .split(',')
            .filter(|p| !p.trim().is_empty())
            .map(|p| match p.split_once('=') {
                Some((k, v)) => (k.trim(), v.trim()),
                None => ("", p.trim()),
            })
            .collect::<Vec<_>>();
        let bad = |what: &str| Error::InvalidParameter(format!("learner `{s}`: {what}"));
        fn num<T: FromStr>(v: &str, bad: impl Fn(&str) -> Error) -> Result<T> {
            v.parse().map_err(|_| bad(&format!("cannot parse `{v}`")))
        }
        let spec = match kind {
            "marginal-mean" | "mean" => {
                if !pairs.is_empty() {
                    return Err(bad("marginal-mean takes no parameters"));
                }
                Self::MarginalMean
            }
            "logistic-irls" | "logistic" => {
                let Self::LogisticIrls {
                    mut max_iter,
                    mut tol,
                    mut ridge,
                } = Self::logistic()
                else {
                    unreachable!()
                };
                for (key, v) in pairs {
                    match key {
                        "max_iter" => max_iter = num(v, bad)?,
                        "tol" => tol = num(v, bad)?,
                        "ridge" => ridge = num(v, bad)?,
                        other => return Err(bad(&format!("unknown parameter `{other}`"))),
                    }
                }
                Self::LogisticIrls { max_iter, tol, ridge }
            }
            "knn" => {
                let mut k = Self::DEFAULT_KNN_K;
                for (key, v) in pairs {
                    match key {
                        "k" | "" => k = num(v, bad)?,
                        other => return Err(bad(&format!("unknown parameter `{other}`"))),
                    }
                }
                Self::Knn { k }
            }
            other => return Err(bad(&format!("unknown learner kind `{other}`"))),
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug)]
struct Constant(f64);

impl Predictor for Constant {
    fn predict(&self, _: &[f64]) -> f64 {
        self.0
    }
}

/// Per-column centering and scaling from training statistics.
#[derive(Debug, Clone)]
struct Standardizer {
    center: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    fn fit(features: Features<'_>, weights: &[f64]) -> Self {
        let d = features.dim();
        let total: f64 = weights.iter().sum();
        let mut center = vec![0.0; d];
        let mut scale = vec![0.0; d];
        for i in 0..features.rows() {
            for (c, x) in center.iter_mut().zip(features.row(i)) {
                *c += weights[i] * x;
            }
        }
        center.iter_mut().for_each(|c| *c /= total);
        for i in 0..features.rows() {
            for ((s, c), x) in scale.iter_mut().zip(&center).zip(features.row(i)) {
                *s += weights[i] * (x - c).powi(2);
            }
        }
        for s in &mut scale {
            let sd = (*s / total).sqrt();
            // Constant columns are left unscaled.
            *s = if sd > 1e-12 { sd } else { 1.0 };
        }
        Self { center, scale }
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (j, o) in out.iter_mut().enumerate() {
            *o = (x[j] - self.center[j]) / self.scale[j];
        }
    }
}

#[derive(Debug)]
struct Logistic {
    standardizer: Standardizer,
    /// Intercept first.
    coef: Vec<f64>,
}

impl Predictor for Logistic {
    fn predict(&self, x: &[f64]) -> f64 {
        let mut z = vec![0.0; x.len()];
        self.standardizer.apply(x, &mut z);
        let eta = self.coef[0] + self.coef[1..].iter().zip(&z).map(|(b, v)| b * v).sum::<f64>();
        sigmoid(eta).clamp(LOGISTIC_CLIP, 1.0 - LOGISTIC_CLIP)
    }
}

fn sigmoid(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug)]
struct Knn {
    standardizer: Standardizer,
    /// Standardized training rows, row-major.
    points: Vec<f64>,
    labels: Vec<f64>,
    weights: Vec<f64>,
    dim: usize,
    k: usize,
}

impl Predictor for Knn {
    /// Weighted label mean over the `k` nearest points, including every point
    /// tied with the `k`-th distance.
    fn predict(&self, x: &[f64]) -> f64 {
        let mut z = vec![0.0; self.dim];
        self.standardizer.apply(x, &mut z);
        let n = self.labels.len();
        let mut dist: Vec<(f64, usize)> = (0..n)
            .map(|i| {
                let p = &self.points[i * self.dim..(i + 1) * self.dim];
                (p.iter().zip(&z).map(|(a, b)| (a - b).powi(2)).sum::<f64>(), i)
            })
            .collect();
        let k = self.k.min(n);
        dist.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0));
        let radius = dist[k - 1].0;
        let (mut num, mut den) = (0.0, 0.0);
        for &(d, i) in &dist {
            if d <= radius {
                num += self.weights[i] * self.labels[i];
                den += self.weights[i];
            }
        }
        num / den
    }
}

fn resolve_weights(n: usize, weights: Option<&[f64]>) -> Result<Vec<f64>> {
    let w = match weights {
        Some(w) => {
            if w.len() != n {
                return Err(Error::InvalidParameter(format!(
                    "{} weights for {n} rows",
                    w.len()
                )));
            }
            if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::InvalidParameter("weights must be finite and nonnegative".into()));
            }
            w.to_vec()
        }
        None => vec![1.0; n],
    };
    if w.iter().sum::<f64>() <= 0.0 {
        return Err(Error::InvalidParameter("fit needs positive total weight".into()));
    }
    Ok(w)
}

impl Learner for LearnerSpec {
    fn fit(&self, features: Features<'_>, labels: &[bool], weights: Option<&[f64]>) -> Result<FittedLearner> {
        self.validate()?;
        let n = features.rows();
        if labels.len() != n {
            return Err(Error::InvalidParameter(format!("{} labels for {n} rows", labels.len())));
        }
        if n == 0 {
            return Err(Error::InvalidParameter("fit needs at least one row".into()));
        }
        let w = resolve_weights(n, weights)?;
        let total: f64 = w.iter().sum();
        let mean = labels.iter().zip(&w).filter(|(y, _)| **y).map(|(_, w)| w).sum::<f64>() / total;
        // Zero-weight rows do not count toward degeneracy.
        let positives = labels.iter().zip(&w).any(|(y, w)| *y && *w > 0.0);
        let negatives = labels.iter().zip(&w).any(|(y, w)| !*y && *w > 0.0);
        if !(positives && negatives) {
            let value = if positives { 1.0 } else { 0.0 };
            return Ok(FittedLearner::new(
                Box::new(Constant(value)),
                Some(FitWarning::DegenerateLabels { value }),
            ));
        }
        match *self {
            Self::MarginalMean => Ok(FittedLearner::new(Box::new(Constant(mean)), None)),
            Self::LogisticIrls { max_iter, tol, ridge } => fit_logistic(features, labels, &w, max_iter, tol, ridge),
            Self::Knn { k } => {
                let standardizer = Standardizer::fit(features, &w);
                let dim = features.dim();
                let mut points = vec![0.0; n * dim];
                for i in 0..n {
                    standardizer.apply(features.row(i), &mut points[i * dim..(i + 1) * dim]);
                }
                // Zero-weight rows are dropped so they never occupy a neighbour slot.
                let keep: Vec<usize> = (0..n).filter(|&i| w[i] > 0.0).collect();
                let points = keep
                    .iter()
                    .flat_map(|&i| points[i * dim..(i + 1) * dim].iter().copied())
                    .collect();
                Ok(FittedLearner::new(
                    Box::new(Knn {
                        standardizer,
                        points,
                        labels: keep.iter().map(|&i| f64::from(u8::from(labels[i]))).collect(),
                        weights: keep.iter().map(|&i| w[i]).collect(),
                        dim,
                        k,
                    }),
                    None,
                ))
            }
        }
    }
}

/// Ridge-penalized logistic regression by Newton-Raphson (IRLS) with step
/// halving on the penalized negative log-likelihood.
fn fit_logistic(
    features: Features<'_>,
    labels: &[bool],
    w: &[f64],
    max_iter: usize,
    tol: f64,
    ridge: f64,
) -> Result<FittedLearner> {
    let d = features.dim();
    let p = d + 1;
    let standardizer = Standardizer::fit(features, w);
    // Zero-weight rows add exact zeros to every sum below.
    let keep: Vec<usize> = (0..features.rows()).filter(|&i| w[i] > 0.0).collect();
    let n = keep.len();
    // Row-major `n × p` design with a leading intercept column.
    let mut design = vec![0.0; n * p];
    for (r, &i) in keep.iter().enumerate() {
        let row = &mut design[r * p..(r + 1) * p];
        row[0] = 1.0;
        standardizer.apply(features.row(i), &mut row[1..]);
    }
    let linear = |beta: &[f64], i: usize| -> f64 { design[i * p..(i + 1) * p].iter().zip(beta).map(|(x, b)| x * b).sum() };
    let y: Vec<f64> = keep.iter().map(|&i| f64::from(u8::from(labels[i]))).collect();
    let w: Vec<f64> = keep.iter().map(|&i| w[i]).collect();
    // Penalized negative log-likelihood and fitted probabilities at `beta`.
    let evaluate = |beta: &[f64], mu: &mut [f64]| -> f64 {
        let mut nll = 0.0;
        for i in 0..n {
            let eta = linear(beta, i);
            let e = (-eta.abs()).exp();
            nll += w[i] * (eta.max(0.0) + e.ln_1p() - y[i] * eta);
            mu[i] = if eta >= 0.0 { 1.0 / (1.0 + e) } else { e / (1.0 + e) };
        }
        nll + 0.5 * ridge * beta.iter().map(|b| b * b).sum::<f64>()
    };

    let total: f64 = w.iter().sum();
    let mean = (0..n).map(|i| w[i] * y[i]).sum::<f64>() / total;
    let mut beta = vec![0.0; p];
    beta[0] = (mean / (1.0 - mean)).ln();
    let mut mu = vec![0.0; n];
    let mut trial = vec![0.0; n];
    let mut value = evaluate(&beta, &mut mu);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let mut g: Vec<f64> = beta.iter().map(|b| ridge * b).collect();
        // Lower triangle, row-major.
        let mut h_acc = vec![0.0; p * p];
        for a in 0..p {
            h_acc[a * p + a] = ridge;
        }
        for (i, row) in design.chunks_exact(p).enumerate() {
            let r = w[i] * (mu[i] - y[i]);
            let h = w[i] * mu[i] * (1.0 - mu[i]);
            for a in 0..p {
                g[a] += row[a] * r;
                for b in 0..=a {
                    h_acc[a * p + b] += row[a] * row[b] * h;
                }
            }
        }
        let grad = DVector::from_vec(g);
        let info = DMatrix::from_fn(p, p, |a, b| h_acc[a.max(b) * p + a.min(b)]);
        let step = match info.clone().cholesky() {
            Some(ch) => ch.solve(&grad),
            None => {
                let jitter = DMatrix::<f64>::identity(p, p) * 1e-8;
                match (info + jitter).cholesky() {
                    Some(ch) => ch.solve(&grad),
                    None => break,
                }
            }
        };
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let candidate: Vec<f64> = beta.iter().zip(step.iter()).map(|(b, s)| b - s * t).collect();
            let v = evaluate(&candidate, &mut trial);
            if v.is_finite() && v <= value {
                accepted = Some((candidate, v));
                break;
            }
            t *= 0.5;
        }
        let Some((candidate, v)) = accepted else {
            // No descent along the Newton direction: at the optimum to machine precision.
            converged = true;
            break;
        };
        let change = (value - v).abs();
        beta = candidate;
        value = v;
        std::mem::swap(&mut mu, &mut trial);
        if change < tol * (value.abs() + 0.1) {
            converged = true;
            break;
        }
    }

    let separated = mu.iter().any(|m| !(LOGISTIC_CLIP..=1.0 - LOGISTIC_CLIP).contains(m));
    let warning = if !converged {
        Some(FitWarning::NotConverged { iterations })
    } else if separated {
        Some(FitWarning::Separation)
    } else {
        None
    };
    Ok(FittedLearner::new(
        Box::new(Logistic {
            standardizer,
            coef: beta,
        }),
        warning,
    ))
}

/// Fold label per observation. Fold sizes differ by at most one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    folds: Vec<usize>,
    k: usize,
    seed: u64,
}

impl FoldAssignment {
    /// Random balanced assignment: a seeded shuffle, then position modulo `k`.
    /// `k = 1` is the no-splitting diagnostic mode.
    pub fn new(n: usize, k: usize, seed: u64) -> Result<Self> {
        if k == 0 || k > n {
            return Err(Error::InvalidParameter(format!("fold count {k} must lie in 1..={n}")));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng_from(seed, &[0xF01D]));
        let mut folds = vec![0; n];
        for (pos, &i) in order.iter().enumerate() {
            folds[i] = pos % k;
        }
        Ok(Self { folds, k, seed })
    }

    pub fn len(&self) -> usize {
        self.folds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.folds.is_empty()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn fold_of(&self, i: usize) -> usize {
        self.folds[i]
    }

    pub fn folds(&self) -> &[usize] {
        &self.folds
    }

    /// No sample splitting: every prediction is in-sample.
    pub fn is_diagnostic(&self) -> bool {
        self.k == 1
    }
}

/// Out-of-fold predictions plus the warnings raised per fold.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossFit {
    pub predictions: Vec<f64>,
    pub warnings: Vec<(usize, FitWarning)>,
}

/// Fits one learner per fold on the rows outside that fold (restricted to
/// `train_mask` when given) and predicts every row of the fold. With `k = 1`
/// the single learner is fitted on all eligible rows.
pub fn cross_fit(
    learner: &dyn Learner,
    features: Features<'_>,
    labels: &[bool],
    train_mask: Option<&[bool]>,
    weights: Option<&[f64]>,
    folds: &FoldAssignment,
) -> Result<CrossFit> {
    let n = features.rows();
    if labels.len() != n || folds.len() != n || train_mask.is_some_and(|m| m.len() != n) {
        return Err(Error::InvalidParameter("cross_fit inputs have mismatched lengths".into()));
    }
    let eligible = |i: usize| train_mask.is_none_or(|m| m[i]);
    let per_fold = (0..folds.k())
        .into_par_iter()
        .map(|fold| -> Result<(Vec<(usize, f64)>, Option<FitWarning>)> {
            let train: Vec<usize> = (0..n)
                .filter(|&i| eligible(i) && (folds.is_diagnostic() || folds.fold_of(i) != fold))
                .collect();
            if train.is_empty() {
                return Err(Error::EmptyTrainingSet { fold });
            }
            let dim = features.dim();
            let x: Vec<f64> = train.iter().flat_map(|&i| features.row(i).iter().copied()).collect();
            let y: Vec<bool> = train.iter().map(|&i| labels[i]).collect();
            let w: Option<Vec<f64>> = weights.map(|w| train.iter().map(|&i| w[i]).collect());
            let fitted = learner.fit(Features::new(&x, train.len(), dim)?, &y, w.as_deref())?;
            let preds = (0..n)
                .filter(|&i| folds.fold_of(i) == fold)
                .map(|i| (i, fitted.predict(features.row(i))))
                .collect();
            Ok((preds, fitted.warning().cloned()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut predictions = vec![f64::NAN; n];
    let mut warnings = Vec::new();
    for (fold, (preds, warning)) in per_fold.into_iter().enumerate() {
        for (i, p) in preds {
            predictions[i] = p;
        }
        if let Some(w) = warning {
            warnings.push((fold, w));
        }
    }
    Ok(CrossFit { predictions, warnings })
}
