//! Sharp partial-identification bounds and a data-driven sensitivity analysis
//! for the survivor-complier average treatment effect (SCATE) in instrumental
//! variable studies where the treatment is only defined for selected units.
//!
//! The pipeline is
//!
//! 1. [`data`]: load and validate `(X, Z, S, A, Y)` observations, with a
//!    tri-state treatment that is undefined whenever `S = 0`.
//! 2. [`nuisance`]: cross-fitted estimates of `π_z`, `θ_z(a|x)`, `λ_z`, `μ_z`
//!    built from the pluggable [`learners`].
//! 3. [`bounds`]: influence-function estimators of the bounds on the
//!    survivor-complier proportion `α`, the survivor ITT effect `β` and the
//!    SCATE `ψ`, with asymptotic confidence intervals.
//! 4. [`sensitivity`]: `ψ*(δ)` over a lattice of interpolation weights.
//!
//! [`oracle`] evaluates every population quantity exactly on finite discrete
//! laws and [`simulation`] reproduces the principal-strata simulation design.

pub mod bounds;
pub mod data;
pub mod error;
pub mod learners;
pub mod nuisance;
pub mod oracle;
pub mod rng;
pub mod sensitivity;
pub mod simulation;

pub use error::{Error, Result};
