use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed delimited input: {0}")]
    Csv(#[from] csv::Error),

    #[error("schema mismatch: {0}")]
    Schema(String),

    /// `row` counts data rows from 1, excluding the header.
    #[error("{violation} at row {row}")]
    InvalidRow { row: usize, violation: RowViolation },

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("instrument arm z={arm} has no selected observations; cannot estimate {what}")]
    EmptyArm { arm: u8, what: &'static str },

    #[error("fold {fold} has an empty training complement")]
    EmptyTrainingSet { fold: usize },

    #[error("estimated P(S=1 | Z=0) is {value}, but must be positive")]
    NonPositiveSelection { value: f64 },

    #[error("every sensitivity cell has alpha denominator below {floor}: instrument too weak (max alpha* = {max_alpha})")]
    WeakInstrument { floor: f64, max_alpha: f64 },

    #[error("infeasible scenario: {0}")]
    Infeasible(String),

    #[error("unknown influence target `{0}`")]
    UnknownTarget(String),
}

/// Which per-observation invariant a row broke.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RowViolation {
    TreatmentWithoutSelection,
    MissingTreatment,
    MissingOutcome,
    NotBinary { column: String, value: String },
    BadCovariate { column: String, value: String },
    WrongWidth { expected: usize, found: usize },
}

impl std::fmt::Display for RowViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::TreatmentWithoutSelection => write!(f, "treatment defined while selection=0"),
            Self::MissingTreatment => write!(f, "treatment undefined while selection=1"),
            Self::MissingOutcome => write!(f, "outcome undefined while selection=1"),
            Self::NotBinary { column, value } => {
                write!(f, "column `{column}` holds `{value}`, expected 0 or 1")
            }
            Self::BadCovariate { column, value } => {
                write!(f, "covariate `{column}` holds `{value}`, expected a finite number")
            }
            Self::WrongWidth { expected, found } => {
                write!(f, "expected {expected} covariates, found {found}")
            }
        }
    }
}
