//! The constrained mean problem.
//!
//! With `Y = P X + p` the stochastic part of the problem is carried by the
//! Riccati field `P`, and what remains is a deterministic forward–backward
//! system for the mean `m = E[X]`, the offset field `p` and the compensator
//! `μ`:
//!
//! ```text
//! ṁ = a m − b p,          m_0 = x
//! ṗ = −a p + ν,           p_T = 0
//! ν = n (m − L)₋          (penalized density of μ)
//! ```
//!
//! where `a = A − BᵀK` and `b = Bᵀ S⁻¹ B`. The feedback offset is
//! `k = S⁻¹ B p` and the control is `u = −K X − k`.
//!
//! For a fixed penalty weight the system is solved by an active-set
//! iteration: freeze the set `{m < L}`, solve the now linear two-point
//! problem exactly by a second decoupling `p = π m + ρ`, update the set,
//! repeat. The weight is then increased along a schedule with warm starts.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::grid::{GridFunction, ScalarPath, TimeGrid};
use crate::measure::{complementarity_residual, Compensator};
use crate::problem::ProblemSpec;
use crate::riccati::{hermite, RiccatiSolution};

/// Stiffness budget per RK4 step (`step × rate`).
const STIFFNESS_BUDGET: f64 = 0.05;
/// Substeps per cell used by the moment evaluator.
const MOMENT_SUBSTEPS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    /// Sup-norm change in `p` that ends an active-set solve.
    pub fixed_point: f64,
    pub max_iter: usize,
    /// Relaxation of each active-set update; `1` is the undamped step.
    pub damping: f64,
    /// Feasibility defect must be `≤ feasibility · (1 + ‖L‖∞)`.
    pub feasibility: f64,
    /// `|∫(m − L) dμ|` must be `≤ complementarity · (1 + |V|)`.
    pub complementarity: f64,
    /// Stop the schedule at the first stage meeting both tolerances.
    pub stop_early: bool,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            fixed_point: 1e-10,
            max_iter: 10_000,
            damping: 1.0,
            feasibility: 1e-4,
            complementarity: 1e-4,
            stop_early: true,
        }
    }
}

/// Strictly increasing penalty weights.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltySchedule {
    weights: Vec<f64>,
}

impl PenaltySchedule {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidArgument("empty penalty schedule".into()));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::InvalidArgument("penalty weights must be positive and finite".into()));
        }
        if weights.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument("penalty schedule must be strictly increasing".into()));
        }
        Ok(Self { weights })
    }

    /// `n_j = first · ratio^j` for `j = 0..stages`.
    pub fn geometric(first: f64, ratio: f64, stages: usize) -> Result<Self> {
        if !(ratio > 1.0) {
            return Err(Error::InvalidArgument(format!("schedule ratio must exceed 1, got {ratio}")));
        }
        Self::new((0..stages).map(|j| first * ratio.powi(j as i32)).collect())
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

impl Default for PenaltySchedule {
    fn default() -> Self {
        Self::geometric(1e2, 4.0, 9).expect("default schedule is valid")
    }
}

/// Fine sampling of `[0, T]` for the RK4 sweeps: `sub` steps per cell,
/// every step stored at its two ends and its midpoint.
#[derive(Debug, Clone)]
struct Sweep {
    grid: TimeGrid,
    sub: usize,
    dt: f64,
    drift: Vec<f64>,
    sens: Vec<f64>,
    floor: Vec<f64>,
}

impl Sweep {
    fn new(spec: &ProblemSpec, ric: &RiccatiSolution, weight: f64) -> Result<Self> {
        let grid = spec.grid;
        let h = grid.step();
        let mut drift_max: f64 = 0.0;
        let mut sens_max: f64 = 0.0;
        for i in 0..grid.len() {
            let d = ric.decoupling_at_node(spec, i)?;
            drift_max = drift_max.max(d.mean_drift.abs());
            sens_max = sens_max.max(d.offset_gain);
        }
        let rate = 2.0 * drift_max + 2.0 * (weight * sens_max).sqrt();
        let sub = ((h * rate / STIFFNESS_BUDGET).ceil() as usize).max(1);
        let dt = h / sub as f64;
        let points = 2 * sub * grid.steps() + 1;
        let mut drift = Vec::with_capacity(points);
        let mut sens = Vec::with_capacity(points);
        let mut floor = Vec::with_capacity(points);
        for k in 0..points {
            let t = Self::time(grid, sub, k);
            let d = ric.decoupling_at(spec, t)?;
            drift.push(d.mean_drift);
            sens.push(d.offset_gain);
            floor.push(spec.floor.eval_clamped(t));
        }
        Ok(Self {
            grid,
            sub,
            dt,
            drift,
            sens,
            floor,
        })
    }

    fn time(grid: TimeGrid, sub: usize, k: usize) -> f64 {
        let per_cell = 2 * sub;
        let cell = k / per_cell;
        if cell >= grid.steps() {
            return grid.horizon();
        }
        let t0 = grid.node(cell);
        let t1 = grid.node(cell + 1);
        t0 + (t1 - t0) * (k % per_cell) as f64 / per_cell as f64
    }

    fn len(&self) -> usize {
        self.drift.len()
    }

    fn node_index(&self, i: usize) -> usize {
        2 * self.sub * i
    }

    fn nodal(&self, v: &[f64]) -> Vec<f64> {
        (0..self.grid.len()).map(|i| v[self.node_index(i)]).collect()
    }

    /// RK4 over the fine points; midpoints filled by the cubic Hermite
    /// interpolant of each step, which is accurate to the method's order.
    fn rk4<const D: usize>(
        &self,
        start: [f64; D],
        backward: bool,
        rhs: impl Fn(usize, &[f64; D]) -> [f64; D],
    ) -> Vec<[f64; D]> {
        let np = self.len();
        let steps = (np - 1) / 2;
        let mut out = vec![[0.0; D]; np];
        let axpy = |y: &[f64; D], s: f64, k: &[f64; D]| -> [f64; D] {
            let mut r = *y;
            for d in 0..D {
                r[d] += s * k[d];
            }
            r
        };
        let h = if backward { -self.dt } else { self.dt };
        let (first, _) = if backward { (np - 1, 0) } else { (0, np - 1) };
        out[first] = start;
        let mut f_prev = rhs(first, &start);
        for s in 0..steps {
            let j = if backward { steps - 1 - s } else { s };
            let (from, to) = if backward { (2 * j + 2, 2 * j) } else { (2 * j, 2 * j + 2) };
            let mid = 2 * j + 1;
            let y0 = out[from];
            let k1 = f_prev;
            let k2 = rhs(mid, &axpy(&y0, 0.5 * h, &k1));
            let k3 = rhs(mid, &axpy(&y0, 0.5 * h, &k2));
            let k4 = rhs(to, &axpy(&y0, h, &k3));
            let mut y1 = y0;
            for d in 0..D {
                y1[d] += h / 6.0 * (k1[d] + 2.0 * k2[d] + 2.0 * k3[d] + k4[d]);
            }
            let f1 = rhs(to, &y1);
            let mut ym = [0.0; D];
            for d in 0..D {
                ym[d] = 0.5 * (y0[d] + y1[d]) + h / 8.0 * (k1[d] - f1[d]);
            }
            out[to] = y1;
            out[mid] = ym;
            f_prev = f1;
        }
        out
    }

    /// `ṁ = a m − b p` with `p` given on the fine points.
    fn forward_mean(&self, x0: f64, p: &[f64]) -> Vec<f64> {
        self.rk4([x0], false, |k, y| [self.drift[k] * y[0] - self.sens[k] * p[k]])
            .into_iter()
            .map(|y| y[0])
            .collect()
    }

    /// Exact solve of the linear system obtained by freezing the active set.
    fn solve_linear(&self, x0: f64, weight: f64, active: &[bool]) -> (Vec<f64>, Vec<f64>) {
        let load = |k: usize| if active[k] { weight } else { 0.0 };
        // p = π m + ρ
        let decoupled = self.rk4([0.0, 0.0], true, |k, y| {
            let (pi, rho) = (y[0], y[1]);
            let nk = load(k);
            [
                -2.0 * self.drift[k] * pi + self.sens[k] * pi * pi - nk,
                -self.drift[k] * rho + self.sens[k] * pi * rho + nk * self.floor[k],
            ]
        });
        let mean: Vec<f64> = self
            .rk4([x0], false, |k, y| {
                let [pi, rho] = decoupled[k];
                [(self.drift[k] - self.sens[k] * pi) * y[0] - self.sens[k] * rho]
            })
            .into_iter()
            .map(|y| y[0])
            .collect();
        let offset = decoupled
            .iter()
            .zip(&mean)
            .map(|([pi, rho], m)| pi * m + rho)
            .collect();
        (mean, offset)
    }

    fn density(&self, weight: f64, mean: &[f64]) -> Vec<f64> {
        mean.iter()
            .zip(&self.floor)
            .map(|(m, l)| weight * (l - m).max(0.0))
            .collect()
    }

    /// Composite Simpson over one RK4 step per triple of fine points.
    fn integrate(&self, f: impl Fn(usize) -> f64) -> f64 {
        (0..(self.len() - 1) / 2)
            .map(|j| self.dt / 6.0 * (f(2 * j) + 4.0 * f(2 * j + 1) + f(2 * j + 2)))
            .sum()
    }

    fn cell_integrals(&self, f: impl Fn(usize) -> f64) -> Vec<f64> {
        (0..self.grid.steps())
            .map(|i| {
                (0..self.sub)
                    .map(|s| {
                        let j = i * self.sub + s;
                        self.dt / 6.0 * (f(2 * j) + 4.0 * f(2 * j + 1) + f(2 * j + 2))
                    })
                    .sum()
            })
            .collect()
    }
}

/// Output of one penalized solve.
#[derive(Debug, Clone)]
pub struct PenalizedSolution {
    pub weight: f64,
    pub mean: ScalarPath,
    pub offset_field: ScalarPath,
    pub iterations: usize,
    /// Sup-norm change of `p` at the last iteration.
    pub residual: f64,
    pub converged: bool,
    sweep: Sweep,
    fine_mean: Vec<f64>,
    fine_offset: Vec<f64>,
    fine_density: Vec<f64>,
}

impl PenalizedSolution {
    /// `Y_0 = P_0 x + p_0`.
    pub fn y0(&self, ric: &RiccatiSolution, x0: f64) -> f64 {
        ric.p0() * x0 + *self.offset_field.first()
    }

    /// Nodal penalty density `ν = n (m − L)₋`.
    pub fn density(&self) -> ScalarPath {
        GridFunction::new(self.sweep.grid, self.sweep.nodal(&self.fine_density))
            .expect("nodal extraction has grid length")
    }

    /// `n ∫ (m − L)₋² dt`.
    pub fn penalty_mass(&self) -> f64 {
        if self.weight == 0.0 {
            return 0.0;
        }
        let n = self.weight;
        self.sweep.integrate(|k| {
            let v = (self.sweep.floor[k] - self.fine_mean[k]).max(0.0);
            n * v * v
        })
    }

    /// `∫ L ν dt`.
    fn floor_against_density(&self) -> f64 {
        self.sweep
            .integrate(|k| self.sweep.floor[k] * self.fine_density[k])
    }

    /// `½ ∫ b p² dt`, the offset part of the control cost.
    fn offset_cost(&self) -> f64 {
        0.5 * self
            .sweep
            .integrate(|k| self.sweep.sens[k] * self.fine_offset[k] * self.fine_offset[k])
    }
}

/// Solves the penalized mean system for one weight `n ≥ 0`.
///
/// `p_init` seeds the first active set through the mean it induces;
/// `damping ∈ (0, 1]` relaxes each update. If the iteration stalls the
/// relaxation is halved internally. Exhausting `max_iter` returns the last
/// iterate with `converged = false`.
pub fn solve_penalized(
    spec: &ProblemSpec,
    ric: &RiccatiSolution,
    weight: f64,
    p_init: &ScalarPath,
    damping: f64,
    tol: &Tolerances,
) -> Result<PenalizedSolution> {
    if !(weight.is_finite() && weight >= 0.0) {
        return Err(Error::InvalidArgument(format!("penalty weight must be >= 0, got {weight}")));
    }
    if !(damping > 0.0 && damping <= 1.0) {
        return Err(Error::InvalidArgument(format!("damping must lie in (0, 1], got {damping}")));
    }
    if *p_init.grid() != spec.grid || *ric.grid() != spec.grid {
        return Err(Error::Dimension("initial offset or Riccati solution on a different grid".into()));
    }
    let sweep = Sweep::new(spec, ric, weight)?;
    let x0 = spec.x0;
    let np = sweep.len();
    let mut offset: Vec<f64> = (0..np)
        .map(|k| p_init.eval_clamped(Sweep::time(sweep.grid, sweep.sub, k)))
        .collect();
    let mut mean = sweep.forward_mean(x0, &offset);
    let mut prev = sweep.nodal(&offset);

    let mut relax = damping;
    let mut best = f64::INFINITY;
    let mut since_best = 0;
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < tol.max_iter {
        iterations += 1;
        let active: Vec<bool> = mean.iter().zip(&sweep.floor).map(|(m, l)| m < l).collect();
        let (m_lin, p_lin) = sweep.solve_linear(x0, weight, &active);
        for k in 0..np {
            mean[k] += relax * (m_lin[k] - mean[k]);
            offset[k] += relax * (p_lin[k] - offset[k]);
        }
        if mean.iter().chain(&offset).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "penalized mean system at weight {weight}, iteration {iterations}"
            )));
        }
        let now = sweep.nodal(&offset);
        residual = now
            .iter()
            .zip(&prev)
            .fold(0.0_f64, |acc, (a, b)| acc.max((a - b).abs()));
        prev = now;
        if residual <= tol.fixed_point {
            converged = true;
            break;
        }
        if residual < best {
            best = residual;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= 20 {
                relax *= 0.5;
                since_best = 0;
                best = residual;
            }
        }
    }

    let density = sweep.density(weight, &mean);
    let grid = sweep.grid;
    Ok(PenalizedSolution {
        weight,
        mean: GridFunction::new(grid, sweep.nodal(&mean))?,
        offset_field: GridFunction::new(grid, sweep.nodal(&offset))?,
        iterations,
        residual,
        converged,
        sweep,
        fine_mean: mean,
        fine_offset: offset,
        fine_density: density,
    })
}

/// `V_n = ½ Y_0ⁿ x + (n/2) ∫ (m − L)₋ L dt`.
pub fn penalized_value(stage: &PenalizedSolution, ric: &RiccatiSolution, x0: f64) -> f64 {
    0.5 * stage.y0(ric, x0) * x0 + 0.5 * stage.floor_against_density()
}

/// The same value assembled from its cost terms:
/// `½ P_0 x² + ½ ∫ b p² dt + (n/2) ∫ (m − L)₋² dt`.
pub fn penalized_cost(stage: &PenalizedSolution, ric: &RiccatiSolution, x0: f64) -> f64 {
    0.5 * ric.p0() * x0 * x0 + stage.offset_cost() + 0.5 * stage.penalty_mass()
}

/// Solution of the constrained mean problem.
#[derive(Debug, Clone)]
pub struct MeanSolution {
    /// Optimal mean path `E[X_t]`.
    pub mean: ScalarPath,
    /// Offset field `p` in `Y = P X + p`.
    pub offset_field: ScalarPath,
    /// Feedback offset `k = S⁻¹ B p`.
    pub offset: GridFunction<DVector<f64>>,
    /// Nodal density of `μ` at the final weight.
    pub density: ScalarPath,
    pub mu: Compensator,
    pub n_final: f64,
    /// `Y_0 = P_0 x + p_0`.
    pub y0: f64,
    offset_slope: Vec<f64>,
    floor_integral: f64,
}

impl MeanSolution {
    fn from_stage(spec: &ProblemSpec, ric: &RiccatiSolution, stage: &PenalizedSolution) -> Result<Self> {
        let grid = spec.grid;
        let sweep = &stage.sweep;
        let density = stage.density();
        let mut offset = Vec::with_capacity(grid.len());
        let mut offset_slope = Vec::with_capacity(grid.len());
        for i in 0..grid.len() {
            let dec = ric.decoupling_at_node(spec, i)?;
            let p = *stage.offset_field.at(i);
            offset.push(&dec.offset_map * p);
            offset_slope.push(-dec.mean_drift * p + density.at(i));
        }
        let cells = sweep.cell_integrals(|k| stage.fine_density[k]);
        Ok(Self {
            mean: stage.mean.clone(),
            offset_field: stage.offset_field.clone(),
            offset: GridFunction::new(grid, offset)?,
            density,
            mu: Compensator::from_increments(grid, 0.0, &cells)?,
            n_final: stage.weight,
            y0: stage.y0(ric, spec.x0),
            offset_slope,
            floor_integral: stage.floor_against_density(),
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        self.mean.grid()
    }

    /// `p(t)` by cubic Hermite interpolation with the slopes of the adjoint equation.
    pub fn offset_field_at(&self, t: f64) -> f64 {
        let grid = self.grid();
        let (i, s) = grid.locate_clamped(t);
        hermite(
            *self.offset_field.at(i),
            self.offset_slope[i],
            *self.offset_field.at(i + 1),
            self.offset_slope[i + 1],
            grid.step(),
            s,
        )
    }

    /// Mass of `μ` in the first cell, where an atom at the origin would show.
    pub fn initial_cell_mass(&self) -> f64 {
        self.mu.initial_atom() + self.mu.cell_mass(0)
    }
}

/// One stage of the continuation in `n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageRecord {
    pub weight: f64,
    pub value: f64,
    pub penalty_mass: f64,
    pub iterations: usize,
    pub residual: f64,
    pub fixed_point_converged: bool,
    pub feasibility_defect: f64,
    pub complementarity: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PenaltyTrace {
    pub stages: Vec<StageRecord>,
    /// Whether the last stage met the feasibility and complementarity tolerances.
    pub tolerances_met: bool,
}

impl PenaltyTrace {
    pub fn values_nondecreasing(&self, slack: f64) -> bool {
        self.stages.windows(2).all(|w| w[1].value >= w[0].value - slack)
    }

    pub fn penalty_mass_nonincreasing(&self, slack: f64) -> bool {
        self.stages
            .windows(2)
            .all(|w| w[1].penalty_mass <= w[0].penalty_mass + slack)
    }

    pub fn last(&self) -> Option<&StageRecord> {
        self.stages.last()
    }
}

/// Runs the penalty continuation and assembles the constrained solution.
pub fn solve_constrained(
    spec: &ProblemSpec,
    ric: &RiccatiSolution,
    schedule: &PenaltySchedule,
    tol: &Tolerances,
) -> Result<(MeanSolution, PenaltyTrace)> {
    spec.check_feasible_start()?;
    let floor_scale = 1.0 + spec.floor.sup_norm();
    let mut p_init = GridFunction::constant(spec.grid, 0.0);
    let mut trace = PenaltyTrace::default();
    let mut last = None;
    for &weight in schedule.weights() {
        let stage = solve_penalized(spec, ric, weight, &p_init, tol.damping, tol)?;
        let value = penalized_value(&stage, ric, spec.x0);
        let mu = Compensator::from_increments(
            spec.grid,
            0.0,
            &stage.sweep.cell_integrals(|k| stage.fine_density[k]),
        )?;
        let comp = complementarity_residual(&stage.mean, &spec.floor, &mu)?;
        let met = comp.feasibility_defect <= tol.feasibility * floor_scale
            && comp.residual.abs() <= tol.complementarity * (1.0 + value.abs());
        trace.stages.push(StageRecord {
            weight,
            value,
            penalty_mass: stage.penalty_mass(),
            iterations: stage.iterations,
            residual: stage.residual,
            fixed_point_converged: stage.converged,
            feasibility_defect: comp.feasibility_defect,
            complementarity: comp.residual,
        });
        trace.tolerances_met = met && stage.converged;
        p_init = stage.offset_field.clone();
        last = Some(stage);
        if tol.stop_early && trace.tolerances_met {
            break;
        }
    }
    let stage = last.expect("schedule is nonempty");
    Ok((MeanSolution::from_stage(spec, ric, &stage)?, trace))
}

/// `V = ½ Y_0 x + ½ ∫ L dμ`.
pub fn optimal_value(sol: &MeanSolution, spec: &ProblemSpec) -> f64 {
    0.5 * sol.y0 * spec.x0 + 0.5 * sol.floor_integral
}

/// Cost of the feedback `u = −K X − k` from the closed first and second
/// moment equations, integrated with RK4 on substeps of the grid.
pub fn cost_via_moments(spec: &ProblemSpec, ric: &RiccatiSolution, sol: &MeanSolution) -> Result<f64> {
    let grid = spec.grid;
    let h = grid.step() / MOMENT_SUBSTEPS as f64;
    let rhs = |t: f64, y: [f64; 3]| -> Result<[f64; 3]> {
        let c = spec.coefficients_at(t);
        let dec = ric.decoupling_at(spec, t)?;
        let gain = &dec.gain;
        let k = &dec.offset_map * sol.offset_field_at(t);
        let (m, v) = (y[0], y[1]);
        let diff_gain = &c.c - &c.d * gain;
        let dk = &c.d * &k;
        let bk = c.b.dot(gain);
        let dm = (c.a - bk) * m - c.b.dot(&k);
        let dv = 2.0 * c.a * v - 2.0 * bk * v - 2.0 * c.b.dot(&k) * m
            + diff_gain.norm_squared() * v
            - 2.0 * diff_gain.dot(&dk) * m
            + dk.norm_squared();
        let rk = &c.r * gain;
        let dj = 0.5
            * (c.q * v + gain.dot(&rk) * v + 2.0 * k.dot(&rk) * m + k.dot(&(&c.r * &k)));
        Ok([dm, dv, dj])
    };
    let mut y = [spec.x0, spec.x0 * spec.x0, 0.0];
    let add = |y: &[f64; 3], s: f64, k: &[f64; 3]| [y[0] + s * k[0], y[1] + s * k[1], y[2] + s * k[2]];
    for i in 0..grid.steps() {
        let t0 = grid.node(i);
        for s in 0..MOMENT_SUBSTEPS {
            let t = t0 + s as f64 * h;
            let k1 = rhs(t, y)?;
            let k2 = rhs(t + 0.5 * h, add(&y, 0.5 * h, &k1))?;
            let k3 = rhs(t + 0.5 * h, add(&y, 0.5 * h, &k2))?;
            let k4 = rhs(t + h, add(&y, h, &k3))?;
            for d in 0..3 {
                y[d] += h / 6.0 * (k1[d] + 2.0 * k2[d] + 2.0 * k3[d] + k4[d]);
            }
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("moment equations at t = {t0}")));
        }
    }
    Ok(y[2] + 0.5 * spec.g * y[1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::ScalarProblem;
    use crate::riccati::solve_riccati;

    fn degenerate_binding() -> ScalarProblem {
        ScalarProblem {
            horizon: 1.0,
            steps: 200,
            a: 0.0,
            b: 1.0,
            c: 0.0,
            d: 1.0,
            q: 0.0,
            r: 1.0,
            g: 0.0,
            floor: 1.0,
            x0: 1.0,
        }
    }

    fn binding() -> ScalarProblem {
        ScalarProblem {
            horizon: 1.0,
            steps: 200,
            a: 0.0,
            b: 1.0,
            c: 0.0,
            d: 0.5,
            q: 1.0,
            r: 1.0,
            g: 0.0,
            floor: 0.8,
            x0: 1.0,
        }
    }

    fn zeros(spec: &ProblemSpec) -> ScalarPath {
        GridFunction::constant(spec.grid, 0.0)
    }

    #[test]
    fn inactive_floor_converges_in_one_iteration() {
        let spec = ScalarProblem { floor: -1e6, q: 1.0, g: 0.5, ..binding() }.build().unwrap();
        let ric = solve_riccati(&spec).unwrap();
        let stage = solve_penalized(&spec, &ric, 1e3, &zeros(&spec), 0.5, &Tolerances::default()).unwrap();
        assert_eq!(stage.iterations, 1);
        assert!(stage.converged);
        assert!(stage.offset_field.values().iter().all(|&p| p == 0.0));
        assert!(stage.density().values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_weight_reproduces_unconstrained_solution() {
        let spec = binding().build().unwrap();
        let ric = solve_riccati(&spec).unwrap();
        let stage = solve_penalized(&spec, &ric, 0.0, &zeros(&spec), 1.0, &Tolerances::default()).unwrap();
        assert!(stage.offset_field.sup_norm() == 0.0);
        let v = penalized_value(&stage, &ric, spec.x0);
        assert!((v - 0.5 * ric.p0()).abs() < 1e-15);
    }

    #[test]
    fn degenerate_floor_is_held_by_zero_control() {
        // Zero control keeps the mean on the floor, so the density vanishes.
        let spec = degenerate_binding().build().unwrap();
        let ric = solve_riccati(&spec).unwrap();
        let stage = solve_penalized(&spec, &ric, 1e3, &zeros(&spec), 1.0, &Tolerances::default()).unwrap();
        assert!(stage.mean.values().iter().all(|&m| (m - 1.0).abs() < 1e-14));
        assert!(stage.density().sup_norm() < 1e-10);
        let (sol, _) = solve_constrained(&spec, &ric, &PenaltySchedule::default(), &Tolerances::default()).unwrap();
        let r = complementarity_residual(&sol.mean, &spec.floor, &sol.mu).unwrap();
        assert!(r.residual.abs() < 1e-12);
    }

    #[test]
    fn binding_floor_activates_density() {
        let spec = binding().build().unwrap();
        let ric = solve_riccati(&spec).unwrap();
        let stage = solve_penalized(&spec, &ric, 1e3, &zeros(&spec), 1.0, &Tolerances::default()).unwrap();
        assert!(stage.converged);
        let nu = stage.density();
        assert!(nu.max() > 0.0);
        // Wherever the density is positive the mean sits below the floor by ν / n.
        for i in 0..spec.grid.len() {
            let gap = spec.floor.at(i) - stage.mean.at(i);
            assert!((nu.at(i) - 1e3 * gap.max(0.0)).abs() < 1e-12);
        }
        assert!(stage.mean.min() < 0.8 && stage.mean.min() > 0.8 - 1e-2);
    }

    #[test]
    fn doubling_weight_raises_value_and_lowers_penalty() {
        let spec = binding().build().unwrap();
        let ric = solve_riccati(&spec).unwrap();
        let tol = Tolerances::default();
        let a = solve_penalized(&spec, &ric, 1e3, &zeros(&spec), 1.0, &tol).unwrap();
        let b = solve_penalized(&spec, &ric, 2e3, &a.offset_field, 1.0, &tol).unwrap();
        assert!(penalized_value(&b, &ric, spec.x0) > penalized_value(&a, &ric, spec.x0));
        assert!(b.penalty_mass() < a.penalty_mass());
    }

    #[test]
    fn value_identity_matches_cost_terms() {
        let spec = binding().build().unwrap();
        let ric = solve_riccati(&spec).unwrap();
        let stage = solve_penalized(&spec, &ric, 1e4, &zeros(&spec), 1.0, &Tolerances::default()).unwrap();
        let v = penalized_value(&stage, &ric, spec.x0);
        let c = penalized_cost(&stage, &ric, spec.x0);
        assert!((v - c).abs() < 1e-8 * v.abs(), "{v} vs {c}");
    }

    #[test]
    fn rejects_bad_arguments() {
        let spec = binding().build().unwrap();
        let ric = solve_riccati(&spec).unwrap();
        let tol = Tolerances::default();
        assert!(solve_penalized(&spec, &ric, -1.0, &zeros(&spec), 1.0, &tol).is_err());
        assert!(solve_penalized(&spec, &ric, 1.0, &zeros(&spec), 0.0, &tol).is_err());
        assert!(solve_penalized(&spec, &ric, 1.0, &zeros(&spec), 1.5, &tol).is_err());
        assert!(PenaltySchedule::new(vec![1.0, 1.0]).is_err());
        assert!(PenaltySchedule::new(vec![]).is_err());
    }

    #[test]
    fn infeasible_start_is_rejected() {
        let spec = ScalarProblem { floor: 1.5, ..binding() }.build().unwrap();
        let ric = solve_riccati(&spec).unwrap();
        let out = solve_constrained(&spec, &ric, &PenaltySchedule::default(), &Tolerances::default());
        assert!(matches!(out, Err(Error::Infeasible { .. })));
    }

    #[test]
    fn iteration_cap_is_flagged() {
        let spec = binding().build().unwrap();
        let ric = solve_riccati(&spec).unwrap();
        let tol = Tolerances { max_iter: 1, ..Tolerances::default() };
        let stage = solve_penalized(&spec, &ric, 1e5, &zeros(&spec), 0.5, &tol).unwrap();
        assert!(!stage.converged);
        assert_eq!(stage.iterations, 1);
    }

    #[test]
    fn unconstrained_value_and_moments_agree() {
        let spec = ScalarProblem { floor: -1e6, g: 1.0, c: 0.3, ..binding() }.build().unwrap();
        let ric = solve_riccati(&spec).unwrap();
        let (sol, _) = solve_constrained(&spec, &ric, &PenaltySchedule::default(), &Tolerances::default()).unwrap();
        assert_eq!(sol.mu.total_mass(), 0.0);
        let v = optimal_value(&sol, &spec);
        assert!((v - 0.5 * ric.p0()).abs() < 1e-15);
        let vm = cost_via_moments(&spec, &ric, &sol).unwrap();
        assert!((v - vm).abs() < 1e-9, "{v} vs {vm}");
    }

    #[test]
    fn zero_start_costs_nothing() {
        let spec = ScalarProblem { x0: 0.0, c: 1.0, floor: -1.0, ..binding() }.build().unwrap();
        let ric = solve_riccati(&spec).unwrap();
        let (sol, _) = solve_constrained(&spec, &ric, &PenaltySchedule::default(), &Tolerances::default()).unwrap();
        assert_eq!(optimal_value(&sol, &spec), 0.0);
        assert_eq!(cost_via_moments(&spec, &ric, &sol).unwrap(), 0.0);
    }
}
