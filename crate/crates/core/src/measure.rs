//! Nonnegative measures on `[0, T]` and the constraint geometry around them.

use crate::error::{Error, Result};
use crate::grid::{GridFunction, ScalarPath, TimeGrid};

/// A nonnegative Radon measure `μ` stored through its cumulative mass
/// `c(t) = μ([0, t])` on the grid nodes.
///
/// An atom at `t = 0` is `c(0) > 0`; an atom elsewhere is a jump of `c`
/// across one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Compensator {
    cumulative: ScalarPath,
}

impl Compensator {
    pub fn new(cumulative: ScalarPath) -> Result<Self> {
        let v = cumulative.values();
        if !(v[0] >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "compensator mass at t = 0 is {}",
                v[0]
            )));
        }
        if let Some(i) = v.windows(2).position(|w| !(w[1] >= w[0])) {
            return Err(Error::InvalidArgument(format!(
                "compensator decreases on cell {i}: {} -> {}",
                v[i],
                v[i + 1]
            )));
        }
        Ok(Self { cumulative })
    }

    pub fn zero(grid: TimeGrid) -> Self {
        Self {
            cumulative: GridFunction::constant(grid, 0.0),
        }
    }

    /// Builds `c` from an atom at the origin and the mass of each cell.
    pub fn from_increments(grid: TimeGrid, initial_atom: f64, increments: &[f64]) -> Result<Self> {
        if increments.len() != grid.steps() {
            return Err(Error::Dimension(format!(
                "{} cell masses for {} cells",
                increments.len(),
                grid.steps()
            )));
        }
        if let Some(i) = increments.iter().position(|&d| !(d >= 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "negative mass {} on cell {i}",
                increments[i]
            )));
        }
        if !(initial_atom >= 0.0) {
            return Err(Error::InvalidArgument(format!("negative atom {initial_atom} at t = 0")));
        }
        let mut values = Vec::with_capacity(grid.len());
        let mut acc = initial_atom;
        values.push(acc);
        for d in increments {
            acc += d;
            values.push(acc);
        }
        Self::new(GridFunction::new(grid, values)?)
    }

    pub fn grid(&self) -> &TimeGrid {
        self.cumulative.grid()
    }

    pub fn cumulative(&self) -> &ScalarPath {
        &self.cumulative
    }

    pub fn total_mass(&self) -> f64 {
        *self.cumulative.last()
    }

    pub fn initial_atom(&self) -> f64 {
        *self.cumulative.first()
    }

    /// Mass of cell `[t_i, t_{i+1}]`.
    pub fn cell_mass(&self, i: usize) -> f64 {
        self.cumulative.at(i + 1) - self.cumulative.at(i)
    }

    /// `μ([0, t]) − μ([0, T])`, the representation that vanishes at `T`.
    pub fn signed_tail(&self, t: f64) -> Result<f64> {
        Ok(self.cumulative.eval(t)? - self.total_mass())
    }

    /// `∫ f dμ` by pairing cell masses with the cell-average of `f`.
    pub fn integrate(&self, f: &ScalarPath) -> Result<f64> {
        if f.grid() != self.grid() {
            return Err(Error::Dimension("integrand and measure on different grids".into()));
        }
        let fv = f.values();
        let mut acc = fv[0] * self.initial_atom();
        for i in 0..self.grid().steps() {
            acc += 0.5 * (fv[i] + fv[i + 1]) * self.cell_mass(i);
        }
        Ok(acc)
    }
}

/// Distance `max_t X₋(t)` from a path to the cone of nonnegative paths,
/// in the sup norm over the grid nodes.
pub fn distance_to_cone(x: &ScalarPath) -> f64 {
    x.values().iter().fold(0.0, |acc, &v| acc.max(-v))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComplementarityReport {
    /// `∫ (m − L) dμ`.
    pub residual: f64,
    /// `max_t (L_t − m_t)₊`.
    pub feasibility_defect: f64,
}

pub fn complementarity_residual(
    mean: &ScalarPath,
    floor: &ScalarPath,
    mu: &Compensator,
) -> Result<ComplementarityReport> {
    if mean.grid() != floor.grid() || mean.grid() != mu.grid() {
        return Err(Error::Dimension("mean, floor and measure on different grids".into()));
    }
    let gap = GridFunction::new(
        *mean.grid(),
        mean.values()
            .iter()
            .zip(floor.values())
            .map(|(m, l)| m - l)
            .collect(),
    )?;
    Ok(ComplementarityReport {
        residual: mu.integrate(&gap)?,
        feasibility_defect: distance_to_cone(&gap),
    })
}
