//! Problem data for the constrained LQ problem
//!
//! ```text
//! dX = (A X + Bᵀu) dt + (C X + D u)ᵀ dW,   X_0 = x
//! J(u) = ½ E[ ∫ (Q X² + uᵀR u) dt + G X_T² ],   E[X_t] ≥ L_t
//! ```
//!
//! with a scalar state, `u ∈ ℝˡ` and an `m`-dimensional Brownian motion.
//! All coefficients are deterministic functions on a [`TimeGrid`].

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::grid::{GridFunction, ScalarPath, TimeGrid};

/// Coefficients of the state equation and cost, sampled on one grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSpec {
    pub grid: TimeGrid,
    /// Control dimension `l`.
    pub control_dim: usize,
    /// Noise dimension `m`.
    pub noise_dim: usize,
    pub a: ScalarPath,
    pub b: GridFunction<DVector<f64>>,
    pub c: GridFunction<DVector<f64>>,
    pub d: GridFunction<DMatrix<f64>>,
    pub q: ScalarPath,
    pub r: GridFunction<DMatrix<f64>>,
    pub g: f64,
    /// Constraint floor `L`.
    pub floor: ScalarPath,
    pub x0: f64,
}

/// All coefficients evaluated at a single time.
#[derive(Debug, Clone)]
pub struct Coefficients {
    pub a: f64,
    pub b: DVector<f64>,
    pub c: DVector<f64>,
    pub d: DMatrix<f64>,
    pub q: f64,
    pub r: DMatrix<f64>,
    pub floor: f64,
}

impl ProblemSpec {
    /// Checks that every coefficient lives on `grid` with the declared shapes.
    pub fn check_dimensions(&self) -> Result<()> {
        let (l, m) = (self.control_dim, self.noise_dim);
        if l == 0 || m == 0 {
            return Err(Error::Dimension("l and m must be at least 1".into()));
        }
        let same_grid = [
            self.a.grid(),
            self.b.grid(),
            self.c.grid(),
            self.d.grid(),
            self.q.grid(),
            self.r.grid(),
            self.floor.grid(),
        ]
        .iter()
        .all(|g| **g == self.grid);
        if !same_grid {
            return Err(Error::Dimension("coefficients live on different grids".into()));
        }
        for (i, b) in self.b.values().iter().enumerate() {
            if b.len() != l {
                return Err(Error::Dimension(format!("B has length {} at node {i}, expected l = {l}", b.len())));
            }
        }
        for (i, c) in self.c.values().iter().enumerate() {
            if c.len() != m {
                return Err(Error::Dimension(format!("C has length {} at node {i}, expected m = {m}", c.len())));
            }
        }
        for (i, d) in self.d.values().iter().enumerate() {
            if d.shape() != (m, l) {
                return Err(Error::Dimension(format!(
                    "D is {:?} at node {i}, expected ({m}, {l})",
                    d.shape()
                )));
            }
        }
        for (i, r) in self.r.values().iter().enumerate() {
            if r.shape() != (l, l) {
                return Err(Error::Dimension(format!(
                    "R is {:?} at node {i}, expected ({l}, {l})",
                    r.shape()
                )));
            }
        }
        Ok(())
    }

    /// Rejects `L_0 > x`: the mean starts below the floor.
    pub fn check_feasible_start(&self) -> Result<()> {
        let floor = *self.floor.first();
        if floor > self.x0 {
            return Err(Error::Infeasible { floor, x: self.x0 });
        }
        Ok(())
    }

    pub fn coefficients_at(&self, t: f64) -> Coefficients {
        Coefficients {
            a: self.a.eval_clamped(t),
            b: self.b.eval_clamped(t),
            c: self.c.eval_clamped(t),
            d: self.d.eval_clamped(t),
            q: self.q.eval_clamped(t),
            r: self.r.eval_clamped(t),
            floor: self.floor.eval_clamped(t),
        }
    }

    pub fn coefficients_at_node(&self, i: usize) -> Coefficients {
        Coefficients {
            a: *self.a.at(i),
            b: self.b.at(i).clone(),
            c: self.c.at(i).clone(),
            d: self.d.at(i).clone(),
            q: *self.q.at(i),
            r: self.r.at(i).clone(),
            floor: *self.floor.at(i),
        }
    }

    /// Same coefficients with a different floor.
    pub fn with_floor(mut self, floor: ScalarPath) -> Result<Self> {
        if *floor.grid() != self.grid {
            return Err(Error::Dimension("floor lives on a different grid".into()));
        }
        self.floor = floor;
        Ok(self)
    }

    /// Resamples every coefficient onto `grid` by piecewise-linear interpolation.
    pub fn resample(&self, grid: TimeGrid) -> Result<Self> {
        if (grid.horizon() - self.grid.horizon()).abs() > 1e-12 * self.grid.horizon() {
            return Err(Error::InvalidArgument(format!(
                "cannot resample horizon {} onto horizon {}",
                self.grid.horizon(),
                grid.horizon()
            )));
        }
        Ok(Self {
            grid,
            control_dim: self.control_dim,
            noise_dim: self.noise_dim,
            a: GridFunction::from_fn(grid, |t| self.a.eval_clamped(t)),
            b: GridFunction::from_fn(grid, |t| self.b.eval_clamped(t)),
            c: GridFunction::from_fn(grid, |t| self.c.eval_clamped(t)),
            d: GridFunction::from_fn(grid, |t| self.d.eval_clamped(t)),
            q: GridFunction::from_fn(grid, |t| self.q.eval_clamped(t)),
            r: GridFunction::from_fn(grid, |t| self.r.eval_clamped(t)),
            g: self.g,
            floor: GridFunction::from_fn(grid, |t| self.floor.eval_clamped(t)),
            x0: self.x0,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ProblemFile> {
        let text = std::fs::read_to_string(path)?;
        ProblemFile::parse(&text)
    }
}

/// Constant-coefficient problem with `l = m = 1`; handy for examples and tests.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarProblem {
    pub horizon: f64,
    pub steps: usize,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub q: f64,
    pub r: f64,
    pub g: f64,
    pub floor: f64,
    pub x0: f64,
}

impl ScalarProblem {
    pub fn build(&self) -> Result<ProblemSpec> {
        let grid = TimeGrid::new(self.horizon, self.steps)?;
        let spec = ProblemSpec {
            grid,
            control_dim: 1,
            noise_dim: 1,
            a: GridFunction::constant(grid, self.a),
            b: GridFunction::constant(grid, DVector::from_element(1, self.b)),
            c: GridFunction::constant(grid, DVector::from_element(1, self.c)),
            d: GridFunction::constant(grid, DMatrix::from_element(1, 1, self.d)),
            q: GridFunction::constant(grid, self.q),
            r: GridFunction::constant(grid, DMatrix::from_element(1, 1, self.r)),
            g: self.g,
            floor: GridFunction::constant(grid, self.floor),
            x0: self.x0,
        };
        spec.check_dimensions()?;
        Ok(spec)
    }
}

/// A parsed problem file: the problem plus the declared assumption margins.
#[derive(Debug, Clone)]
pub struct ProblemFile {
    pub spec: ProblemSpec,
    /// `δ` in `R ⪰ δI`.
    pub delta: f64,
    /// `ε` in `BᵀB ⪰ εI`.
    pub epsilon: f64,
}

pub const DEFAULT_DELTA: f64 = 1e-6;
pub const DEFAULT_EPSILON: f64 = 1e-6;

impl ProblemFile {
    /// Parses the JSON problem format `{T, N, l, m, A, B, C, D, Q, R, G, L, x}`.
    ///
    /// Scalar coefficients are a number or an array of `N + 1` numbers.
    /// Vectors and matrices are nested arrays, optionally with one extra
    /// outer level of `N + 1` nodal values. Optional `delta` and `epsilon`
    /// declare the assumption margins.
    pub fn parse(text: &str) -> Result<Self> {
        let doc: Value = serde_json::from_str(text)
            .map_err(|e| Error::field("<document>", format!("invalid JSON: {e}")))?;
        let obj = doc
            .as_object()
            .ok_or_else(|| Error::field("<document>", "expected a JSON object"))?;
        let get = |key: &str| obj.get(key).ok_or_else(|| Error::field(key, "missing"));

        let horizon = number(get("T")?, "T")?;
        let steps = positive_int(get("N")?, "N")?;
        let l = match obj.get("l") {
            Some(v) => positive_int(v, "l")?,
            None => 1,
        };
        let m = match obj.get("m") {
            Some(v) => positive_int(v, "m")?,
            None => 1,
        };
        let grid = TimeGrid::new(horizon, steps).map_err(|e| Error::field("T", e.to_string()))?;

        let spec = ProblemSpec {
            grid,
            control_dim: l,
            noise_dim: m,
            a: scalar_path(get("A")?, "A", grid)?,
            b: vector_path(get("B")?, "B", grid, l)?,
            c: vector_path(get("C")?, "C", grid, m)?,
            d: matrix_path(get("D")?, "D", grid, m, l)?,
            q: scalar_path(get("Q")?, "Q", grid)?,
            r: matrix_path(get("R")?, "R", grid, l, l)?,
            g: number(get("G")?, "G")?,
            floor: scalar_path(get("L")?, "L", grid)?,
            x0: number(get("x")?, "x")?,
        };
        spec.check_dimensions()?;
        let delta = match obj.get("delta") {
            Some(v) => number(v, "delta")?,
            None => DEFAULT_DELTA,
        };
        let epsilon = match obj.get("epsilon") {
            Some(v) => number(v, "epsilon")?,
            None => DEFAULT_EPSILON,
        };
        Ok(Self { spec, delta, epsilon })
    }
}

fn number(v: &Value, field: &str) -> Result<f64> {
    let x = v
        .as_f64()
        .ok_or_else(|| Error::field(field, format!("expected a number, got {v}")))?;
    if !x.is_finite() {
        return Err(Error::field(field, "not finite"));
    }
    Ok(x)
}

fn positive_int(v: &Value, field: &str) -> Result<usize> {
    match v.as_u64() {
        Some(n) if n > 0 => Ok(n as usize),
        _ => Err(Error::field(field, format!("expected a positive integer, got {v}"))),
    }
}

fn numbers(v: &Value, field: &str, len: usize) -> Result<Vec<f64>> {
    let arr = v
        .as_array()
        .ok_or_else(|| Error::field(field, "expected an array"))?;
    if arr.len() != len {
        return Err(Error::field(field, format!("expected {len} entries, got {}", arr.len())));
    }
    arr.iter().map(|x| number(x, field)).collect()
}

fn scalar_path(v: &Value, field: &str, grid: TimeGrid) -> Result<ScalarPath> {
    if v.is_number() {
        return Ok(GridFunction::constant(grid, number(v, field)?));
    }
    GridFunction::new(grid, numbers(v, field, grid.len())?)
}

fn vector_value(v: &Value, field: &str, dim: usize) -> Result<DVector<f64>> {
    if dim == 1 && v.is_number() {
        return Ok(DVector::from_element(1, number(v, field)?));
    }
    Ok(DVector::from_vec(numbers(v, field, dim)?))
}

fn vector_path(v: &Value, field: &str, grid: TimeGrid, dim: usize) -> Result<GridFunction<DVector<f64>>> {
    let arr = match v.as_array() {
        Some(a) => a,
        None => return Ok(GridFunction::constant(grid, vector_value(v, field, dim)?)),
    };
    let nested = arr.first().is_some_and(Value::is_array);
    if !nested && arr.len() == dim {
        return Ok(GridFunction::constant(grid, vector_value(v, field, dim)?));
    }
    if arr.len() != grid.len() {
        return Err(Error::field(
            field,
            format!("expected {dim} entries or {} nodal values, got {}", grid.len(), arr.len()),
        ));
    }
    let values = arr
        .iter()
        .map(|x| vector_value(x, field, dim))
        .collect::<Result<Vec<_>>>()?;
    GridFunction::new(grid, values)
}

fn matrix_value(v: &Value, field: &str, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    if rows == 1 && cols == 1 && v.is_number() {
        return Ok(DMatrix::from_element(1, 1, number(v, field)?));
    }
    let arr = v
        .as_array()
        .ok_or_else(|| Error::field(field, "expected a nested array"))?;
    if arr.len() != rows {
        return Err(Error::field(field, format!("expected {rows} rows, got {}", arr.len())));
    }
    let mut out = DMatrix::zeros(rows, cols);
    for (i, row) in arr.iter().enumerate() {
        let row = numbers(row, field, cols)?;
        for (j, x) in row.into_iter().enumerate() {
            out[(i, j)] = x;
        }
    }
    Ok(out)
}

fn matrix_path(
    v: &Value,
    field: &str,
    grid: TimeGrid,
    rows: usize,
    cols: usize,
) -> Result<GridFunction<DMatrix<f64>>> {
    let depth = nesting_depth(v);
    if depth <= 2 && !(rows == 1 && cols == 1 && depth == 1) {
        return Ok(GridFunction::constant(grid, matrix_value(v, field, rows, cols)?));
    }
    let arr = v.as_array().expect("depth > 0 implies array");
    if arr.len() != grid.len() {
        return Err(Error::field(
            field,
            format!("expected a {rows}x{cols} matrix or {} nodal matrices, got {} entries", grid.len(), arr.len()),
        ));
    }
    let values = arr
        .iter()
        .map(|x| matrix_value(x, field, rows, cols))
        .collect::<Result<Vec<_>>>()?;
    GridFunction::new(grid, values)
}

fn nesting_depth(v: &Value) -> usize {
    match v.as_array() {
        Some(a) => 1 + a.first().map_or(0, nesting_depth),
        None => 0,
    }
}

/// One line of a [`ValidationReport`].
#[derive(Debug, Clone, PartialEq)]
pub struct AssumptionCheck {
    pub name: &'static str,
    pub passed: bool,
    /// Worst case over the grid; nonnegative iff the check passes.
    pub margin: f64,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    /// `min λ(R_t) − δ`.
    pub control_weight: AssumptionCheck,
    /// `min Q_t`.
    pub state_weight: AssumptionCheck,
    /// `G`.
    pub terminal_weight: AssumptionCheck,
    /// `min λ(B_tᵀB_t) − ε`.
    pub control_gain: AssumptionCheck,
}

impl ValidationReport {
    pub fn checks(&self) -> [&AssumptionCheck; 4] {
        [
            &self.control_weight,
            &self.state_weight,
            &self.terminal_weight,
            &self.control_gain,
        ]
    }

    pub fn passed(&self) -> bool {
        self.checks().iter().all(|c| c.passed)
    }

    pub fn margins(&self) -> [f64; 4] {
        self.checks().map(|c| c.margin)
    }

    /// First failing check as an error, if any.
    pub fn into_result(self) -> Result<Self> {
        if let Some(c) = self.checks().into_iter().find(|c| !c.passed) {
            let mut msg = format!("{} (margin {:e})", c.name, c.margin);
            if let Some(note) = &c.note {
                msg.push_str("; ");
                msg.push_str(note);
            }
            return Err(Error::Assumption(msg));
        }
        Ok(self)
    }
}

/// Checks the weight and gain assumptions on every grid node.
pub fn validate_spec(spec: &ProblemSpec, delta: f64, epsilon: f64) -> Result<ValidationReport> {
    spec.check_dimensions()?;
    for (i, r) in spec.r.values().iter().enumerate() {
        let scale = 1.0 + r.amax();
        if (r - r.transpose()).amax() > 1e-12 * scale {
            return Err(Error::field("R", format!("not symmetric at node {i}")));
        }
    }

    let r_min = spec
        .r
        .values()
        .iter()
        .map(|r| min_eigenvalue(r.clone()))
        .fold(f64::INFINITY, f64::min);
    let q_min = spec.q.min();
    let btb_min = spec
        .b
        .values()
        .iter()
        .map(|b| b.norm_squared())
        .fold(f64::INFINITY, f64::min);

    let control_weight = AssumptionCheck {
        name: "R - delta*I positive semidefinite",
        passed: r_min - delta >= 0.0,
        margin: r_min - delta,
        note: None,
    };
    let state_weight = AssumptionCheck {
        name: "Q >= 0",
        passed: q_min >= 0.0,
        margin: q_min,
        note: None,
    };
    let terminal_weight = AssumptionCheck {
        name: "G >= 0",
        passed: spec.g >= 0.0,
        margin: spec.g,
        note: None,
    };
    let gain_passed = btb_min - epsilon >= 0.0;
    let control_gain = AssumptionCheck {
        name: "B^T B - epsilon*I positive semidefinite",
        passed: gain_passed,
        margin: btb_min - epsilon,
        note: (!gain_passed).then(|| {
            "degenerate control gain: the compensator is not unique and the solution family is unbounded".to_string()
        }),
    };
    Ok(ValidationReport {
        control_weight,
        state_weight,
        terminal_weight,
        control_gain,
    })
}

pub(crate) fn min_eigenvalue(m: DMatrix<f64>) -> f64 {
    if m.nrows() == 1 {
        return m[(0, 0)];
    }
    SymmetricEigen::new(m).eigenvalues.min()
}
