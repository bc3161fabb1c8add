//! The sensitivity functional `ψ*(δ)` over a lattice of interpolation
//! weights `(δ₁, δ₂) ∈ [0,1]²`.
//!
//! `δ₁` moves the assumed survivor-complier proportion from `α_ℓ` to `α_u`
//! and `δ₂` moves the survivor ITT effect from `β_ℓ` to `β_u`. Each cell
//! carries both the weights and the implied `(α*, β*)`.
//!
//! The corners of the lattice are not the `ψ` bounds in general: the bounds
//! pair `β_ℓ` or `β_u` with whichever `α` bound the sign of `β` selects,
//! while the cell `(δ₁, δ₂)` always pairs the stated weights. Both are
//! reported so either can be plotted.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::bounds::{mean, ratio_se, InfluenceComponents, DEFAULT_DENOMINATOR_FLOOR, Z_95};
use crate::error::{Error, Result};

pub const DEFAULT_RESOLUTION: usize = 21;

pub const GRID_COLUMNS: [&str; 10] = [
    "delta1",
    "delta2",
    "alpha_star",
    "beta_star",
    "psi_star",
    "se",
    "ci_lo",
    "ci_hi",
    "rejects_zero",
    "defined",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CellEstimate {
    /// Clamped to `[−1, 1]`.
    pub psi_star: f64,
    /// Before clamping; the interval is centred here.
    pub psi_star_raw: f64,
    pub se: f64,
    pub ci: (f64, f64),
    pub rejects_zero: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GridCell {
    pub delta1: f64,
    pub delta2: f64,
    pub alpha_star: f64,
    pub beta_star: f64,
    /// `None` when `α*` is at or below the denominator floor.
    pub estimate: Option<CellEstimate>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SensitivityGrid {
    pub m1: usize,
    pub m2: usize,
    pub denominator_floor: f64,
    /// Row-major with `δ₁` outer.
    pub cells: Vec<GridCell>,
}

impl SensitivityGrid {
    pub fn cell(&self, j1: usize, j2: usize) -> &GridCell {
        &self.cells[j1 * self.m2 + j2]
    }

    pub fn defined_cells(&self) -> impl Iterator<Item = (&GridCell, &CellEstimate)> {
        self.cells.iter().filter_map(|c| c.estimate.as_ref().map(|e| (c, e)))
    }
}

/// `δ` values `0, 1/(m−1), …, 1`.
pub fn lattice(m: usize) -> Vec<f64> {
    (0..m).map(|j| j as f64 / (m - 1) as f64).collect()
}

/// Evaluates one cell without the floor rule.
pub fn evaluate_cell(ic: &InfluenceComponents, delta1: f64, delta2: f64) -> CellEstimate {
    let (raw, se) = ratio_se(|i| ic.beta_mix(i, delta2), |i| ic.alpha_mix(i, delta1), ic.len());
    let ci = (raw - Z_95 * se, raw + Z_95 * se);
    CellEstimate {
        psi_star: raw.clamp(-1.0, 1.0),
        psi_star_raw: raw,
        se,
        ci,
        rejects_zero: ci.0 > 0.0 || ci.1 < 0.0,
    }
}

pub fn evaluate_grid(ic: &InfluenceComponents, m1: usize, m2: usize) -> Result<SensitivityGrid> {
    evaluate_grid_with_floor(ic, m1, m2, DEFAULT_DENOMINATOR_FLOOR)
}

pub fn evaluate_grid_with_floor(ic: &InfluenceComponents, m1: usize, m2: usize, floor: f64) -> Result<SensitivityGrid> {
    if m1 < 2 || m2 < 2 {
        return Err(Error::InvalidParameter(format!("grid must be at least 2 x 2, got {m1} x {m2}")));
    }
    if ic.len() < 2 {
        return Err(Error::InvalidParameter("at least two observations are required".into()));
    }
    let lam = mean(&ic.phi0_s);
    if lam <= 0.0 {
        return Err(Error::NonPositiveSelection { value: lam });
    }
    let a_l = mean(&ic.alpha_l);
    let a_u = mean(&ic.alpha_u);
    let b_l = mean(&ic.beta_l_num) / lam;
    let b_u = mean(&ic.beta_u_num) / lam;
    let d1 = lattice(m1);
    let d2 = lattice(m2);
    let cells: Vec<GridCell> = (0..m1 * m2)
        .into_par_iter()
        .map(|c| {
            let (delta1, delta2) = (d1[c / m2], d2[c % m2]);
            let alpha_star = delta1 * a_u + (1.0 - delta1) * a_l;
            let beta_star = delta2 * b_u + (1.0 - delta2) * b_l;
            GridCell {
                delta1,
                delta2,
                alpha_star,
                beta_star,
                estimate: (alpha_star > floor).then(|| evaluate_cell(ic, delta1, delta2)),
            }
        })
        .collect();
    if cells.iter().all(|c| c.estimate.is_none()) {
        return Err(Error::WeakInstrument {
            floor,
            max_alpha: a_l.max(a_u),
        });
    }
    Ok(SensitivityGrid {
        m1,
        m2,
        denominator_floor: floor,
        cells,
    })
}

/// Writes the grid with the fixed [`GRID_COLUMNS`] order. Undefined cells
/// have `defined=0` and empty numeric fields after `beta_star`.
pub fn write_grid(g: &SensitivityGrid, writer: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(GRID_COLUMNS)?;
    for c in &g.cells {
        let mut rec = vec![
            c.delta1.to_string(),
            c.delta2.to_string(),
            c.alpha_star.to_string(),
            c.beta_star.to_string(),
        ];
        match &c.estimate {
            Some(e) => rec.extend([
                e.psi_star.to_string(),
                e.se.to_string(),
                e.ci.0.to_string(),
                e.ci.1.to_string(),
                u8::from(e.rejects_zero).to_string(),
                "1".to_string(),
            ]),
            None => rec.extend(["", "", "", "", "", "0"].map(String::from)),
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|source| Error::Io {
        path: "<grid>".into(),
        source,
    })
}

pub fn export_grid(g: &SensitivityGrid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    write_grid(g, std::io::BufWriter::new(file))
}
