//! Observations `(X, Z, S, A, Y)` where the treatment only exists for
//! selected units, plus delimited-text ingestion and descriptive summaries.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, RowViolation};

/// Treatment status. `Undefined` exactly when the unit was not selected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Treatment {
    Control,
    Treated,
    Undefined,
}

impl Treatment {
    pub fn from_flag(treated: bool) -> Self {
        if treated {
            Self::Treated
        } else {
            Self::Control
        }
    }

    pub fn is_defined(self) -> bool {
        !matches!(self, Self::Undefined)
    }

    /// `1(A = 1)`; false for undefined treatment.
    pub fn is_treated(self) -> bool {
        matches!(self, Self::Treated)
    }

    /// `1(A ≠ 0)`; true for undefined treatment, since `A = 0` requires `S = 1`.
    pub fn is_not_control(self) -> bool {
        !matches!(self, Self::Control)
    }
}

/// One subject. See [`Dataset`] for the invariants tying the fields together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub covariates: Vec<f64>,
    pub instrument: bool,
    pub selected: bool,
    pub treatment: Treatment,
    pub outcome: Option<bool>,
}

impl Observation {
    fn check(&self, dim: usize) -> Result<(), RowViolation> {
        if self.covariates.len() != dim {
            return Err(RowViolation::WrongWidth {
                expected: dim,
                found: self.covariates.len(),
            });
        }
        if let Some(v) = self.covariates.iter().find(|v| !v.is_finite()) {
            return Err(RowViolation::BadCovariate {
                column: "?".into(),
                value: v.to_string(),
            });
        }
        match (self.selected, self.treatment.is_defined()) {
            (false, true) => return Err(RowViolation::TreatmentWithoutSelection),
            (true, false) => return Err(RowViolation::MissingTreatment),
            _ => {}
        }
        if self.selected && self.outcome.is_none() {
            return Err(RowViolation::MissingOutcome);
        }
        Ok(())
    }
}

/// Validated, immutable, column-oriented sample.
///
/// Invariants: `n ≥ 1`; both instrument arms present; treatment undefined iff
/// `S = 0`; outcome defined whenever `S = 1`; every row has `d` finite
/// covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    covariate_names: Vec<String>,
    covariates: Vec<f64>,
    instrument: Vec<bool>,
    selected: Vec<bool>,
    treatment: Vec<Treatment>,
    outcome: Vec<Option<bool>>,
}

impl Dataset {
    pub fn new(covariate_names: Vec<String>, observations: &[Observation]) -> Result<Self> {
        let dim = covariate_names.len();
        let n = observations.len();
        let mut covariates = Vec::with_capacity(n * dim);
        let mut instrument = Vec::with_capacity(n);
        let mut selected = Vec::with_capacity(n);
        let mut treatment = Vec::with_capacity(n);
        let mut outcome = Vec::with_capacity(n);
        for (i, obs) in observations.iter().enumerate() {
            obs.check(dim).map_err(|violation| Error::InvalidRow {
                row: i + 1,
                violation,
            })?;
            covariates.extend_from_slice(&obs.covariates);
            instrument.push(obs.instrument);
            selected.push(obs.selected);
            treatment.push(obs.treatment);
            outcome.push(obs.outcome);
        }
        Self::from_columns(covariate_names, covariates, instrument, selected, treatment, outcome)
    }

    /// Builds from columns; `covariates` is row-major `n × d`.
    pub fn from_columns(
        covariate_names: Vec<String>,
        covariates: Vec<f64>,
        instrument: Vec<bool>,
        selected: Vec<bool>,
        treatment: Vec<Treatment>,
        outcome: Vec<Option<bool>>,
    ) -> Result<Self> {
        let n = instrument.len();
        let dim = covariate_names.len();
        if selected.len() != n || treatment.len() != n || outcome.len() != n {
            return Err(Error::InvalidDataset("column lengths differ".into()));
        }
        if covariates.len() != n * dim {
            return Err(Error::InvalidDataset(format!(
                "covariate block has {} values, expected {n} x {dim}",
                covariates.len()
            )));
        }
        if n == 0 {
            return Err(Error::InvalidDataset("no observations".into()));
        }
        for i in 0..n {
            let row = &covariates[i * dim..(i + 1) * dim];
            if let Some(j) = row.iter().position(|v| !v.is_finite()) {
                return Err(Error::InvalidRow {
                    row: i + 1,
                    violation: RowViolation::BadCovariate {
                        column: covariate_names[j].clone(),
                        value: row[j].to_string(),
                    },
                });
            }
            let violation = match (selected[i], treatment[i].is_defined(), outcome[i]) {
                (false, true, _) => Some(RowViolation::TreatmentWithoutSelection),
                (true, false, _) => Some(RowViolation::MissingTreatment),
                (true, true, None) => Some(RowViolation::MissingOutcome),
                _ => None,
            };
            if let Some(violation) = violation {
                return Err(Error::InvalidRow { row: i + 1, violation });
            }
        }
        let treated_arm = instrument.iter().filter(|&&z| z).count();
        if treated_arm == 0 || treated_arm == n {
            return Err(Error::InvalidDataset(
                "both instrument arms (Z=0 and Z=1) must be present".into(),
            ));
        }
        Ok(Self {
            covariate_names,
            covariates,
            instrument,
            selected,
            treatment,
            outcome,
        })
    }

    pub fn len(&self) -> usize {
        self.instrument.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instrument.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    /// Row-major `n × d` covariate block.
    pub fn covariates(&self) -> &[f64] {
        &self.covariates
    }

    pub fn covariate_row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.covariates[i * d..(i + 1) * d]
    }

    pub fn instrument(&self) -> &[bool] {
        &self.instrument
    }

    pub fn selected(&self) -> &[bool] {
        &self.selected
    }

    pub fn treatment(&self) -> &[Treatment] {
        &self.treatment
    }

    pub fn outcome(&self) -> &[Option<bool>] {
        &self.outcome
    }

    /// `S·Y`, zero whenever `S = 0`.
    pub fn selected_outcome(&self, i: usize) -> bool {
        self.selected[i] && self.outcome[i] == Some(true)
    }

    pub fn observation(&self, i: usize) -> Observation {
        Observation {
            covariates: self.covariate_row(i).to_vec(),
            instrument: self.instrument[i],
            selected: self.selected[i],
            treatment: self.treatment[i],
            outcome: self.outcome[i],
        }
    }

    /// Rows in the given order; used for permutation and resampling.
    pub fn reorder(&self, order: &[usize]) -> Result<Self> {
        let d = self.dim();
        let mut covariates = Vec::with_capacity(order.len() * d);
        for &i in order {
            covariates.extend_from_slice(self.covariate_row(i));
        }
        Self::from_columns(
            self.covariate_names.clone(),
            covariates,
            order.iter().map(|&i| self.instrument[i]).collect(),
            order.iter().map(|&i| self.selected[i]).collect(),
            order.iter().map(|&i| self.treatment[i]).collect(),
            order.iter().map(|&i| self.outcome[i]).collect(),
        )
    }
}

/// Column mapping for delimited text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schema {
    pub z: String,
    pub s: String,
    pub a: String,
    pub y: String,
    pub covariates: Vec<String>,
    pub delimiter: char,
    pub missing_token: String,
}

impl Default for Schema {
    fn default() -> Self {
        Self {
            z: "z".into(),
            s: "s".into(),
            a: "a".into(),
            y: "y".into(),
            covariates: Vec::new(),
            delimiter: ',',
            missing_token: "NA".into(),
        }
    }
}

impl Schema {
    fn delimiter_byte(&self) -> Result<u8> {
        u8::try_from(self.delimiter)
            .map_err(|_| Error::Schema(format!("delimiter {:?} is not a single byte", self.delimiter)))
    }
}

pub fn load_dataset(path: impl AsRef<Path>, schema: &Schema) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_dataset(file, schema)
}

pub fn read_dataset(reader: impl Read, schema: &Schema) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter_byte()?)
        .has_headers(true)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    let column = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("column `{name}` not found in header")))
    };
    let zc = column(&schema.z)?;
    let sc = column(&schema.s)?;
    let ac = column(&schema.a)?;
    let yc = column(&schema.y)?;
    let xc = schema
        .covariates
        .iter()
        .map(|c| column(c))
        .collect::<Result<Vec<_>>>()?;

    let missing = schema.missing_token.as_str();
    let binary = |column: &str, raw: &str| -> Result<Option<bool>, RowViolation> {
        match raw.trim() {
            "0" => Ok(Some(false)),
            "1" => Ok(Some(true)),
            t if t == missing => Ok(None),
            t => Err(RowViolation::NotBinary {
                column: column.to_string(),
                value: t.to_string(),
            }),
        }
    };

    let mut observations = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        let row = i + 1;
        let field = |c: usize| record.get(c).unwrap_or("");
        let fail = |violation| Error::InvalidRow { row, violation };
        let z = binary(&schema.z, field(zc)).map_err(fail)?;
        let s = binary(&schema.s, field(sc)).map_err(fail)?;
        let (Some(instrument), Some(selected)) = (z, s) else {
            let column = if z.is_none() { &schema.z } else { &schema.s };
            return Err(fail(RowViolation::NotBinary {
                column: column.clone(),
                value: missing.to_string(),
            }));
        };
        let treatment = match binary(&schema.a, field(ac)).map_err(fail)? {
            Some(a) => Treatment::from_flag(a),
            None => Treatment::Undefined,
        };
        let outcome = binary(&schema.y, field(yc)).map_err(fail)?;
        let mut covariates = Vec::with_capacity(xc.len());
        for (name, &c) in schema.covariates.iter().zip(&xc) {
            let raw = field(c).trim();
            let value = raw
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite() && raw != missing)
                .ok_or_else(|| {
                    fail(RowViolation::BadCovariate {
                        column: name.clone(),
                        value: raw.to_string(),
                    })
                })?;
            covariates.push(value);
        }
        let obs = Observation {
            covariates,
            instrument,
            selected,
            treatment,
            outcome,
        };
        obs.check(xc.len()).map_err(fail)?;
        observations.push(obs);
    }
    Dataset::new(schema.covariates.clone(), &observations)
}

/// Writes covariates first, then the `z`, `s`, `a`, `y` columns named by
/// `schema`. Covariate names come from the dataset.
pub fn write_dataset(ds: &Dataset, writer: impl Write, schema: &Schema) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .delimiter(schema.delimiter_byte()?)
        .from_writer(writer);
    let mut header: Vec<&str> = ds.covariate_names().iter().map(String::as_str).collect();
    header.extend([schema.z.as_str(), schema.s.as_str(), schema.a.as_str(), schema.y.as_str()]);
    w.write_record(&header)?;
    let flag = |b: bool| if b { "1" } else { "0" };
    let missing = schema.missing_token.as_str();
    let mut record: Vec<String> = Vec::with_capacity(header.len());
    for i in 0..ds.len() {
        record.clear();
        record.extend(ds.covariate_row(i).iter().map(|v| v.to_string()));
        record.push(flag(ds.instrument[i]).into());
        record.push(flag(ds.selected[i]).into());
        record.push(match ds.treatment[i] {
            Treatment::Control => "0".into(),
            Treatment::Treated => "1".into(),
            Treatment::Undefined => missing.into(),
        });
        record.push(match ds.outcome[i] {
            Some(y) => flag(y).into(),
            None => missing.into(),
        });
        w.write_record(&record)?;
    }
    w.flush().map_err(|source| Error::Io {
        path: "<writer>".into(),
        source,
    })?;
    Ok(())
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>, schema: &Schema) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    write_dataset(ds, std::io::BufWriter::new(file), schema)
}

/// Per-arm descriptive rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ArmSummary {
    pub n: usize,
    /// `P̂(S=1 | Z=z)`.
    pub selection_rate: f64,
    /// `P̂(A=1 | Z=z)`, undefined treatment counted as not treated.
    pub treated_rate: f64,
    /// `P̂(A=1 | S=1, Z=z)`; `None` with no selected units.
    pub treated_rate_selected: Option<f64>,
    /// `P̂(Y=1 | S=1, Z=z)`.
    pub outcome_rate_selected: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Summary {
    pub n: usize,
    /// Indexed by instrument value.
    pub arms: [ArmSummary; 2],
}

pub fn summarize(ds: &Dataset) -> Summary {
    let arm = |z: bool| {
        let mut n = 0usize;
        let mut sel = 0usize;
        let mut treated = 0usize;
        let mut sel_outcome = 0usize;
        for i in (0..ds.len()).filter(|&i| ds.instrument[i] == z) {
            n += 1;
            if ds.selected[i] {
                sel += 1;
                sel_outcome += usize::from(ds.outcome[i] == Some(true));
            }
            treated += usize::from(ds.treatment[i].is_treated());
        }
        let ratio = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
        ArmSummary {
            n,
            selection_rate: sel as f64 / n as f64,
            treated_rate: treated as f64 / n as f64,
            treated_rate_selected: ratio(treated, sel),
            outcome_rate_selected: ratio(sel_outcome, sel),
        }
    };
    Summary {
        n: ds.len(),
        arms: [arm(false), arm(true)],
    }
}

impl fmt::Display for Summary {
    /// `key=value` lines.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>| v.map_or_else(String::new, |v| v.to_string());
        writeln!(f, "n={}", self.n)?;
        for (z, arm) in self.arms.iter().enumerate() {
            writeln!(f, "z{z}.n={}", arm.n)?;
            writeln!(f, "z{z}.selection_rate={}", arm.selection_rate)?;
            writeln!(f, "z{z}.treated_rate={}", arm.treated_rate)?;
            writeln!(f, "z{z}.treated_rate_selected={}", opt(arm.treated_rate_selected))?;
            writeln!(f, "z{z}.outcome_rate_selected={}", opt(arm.outcome_rate_selected))?;
        }
        Ok(())
    }
}
