//! Backward Riccati equation for the decoupling field `Y = P X + p`.
//!
//! Substituting the ansatz into the forward–backward system and matching
//! the diffusion and drift terms gives, with `β = B + DᵀC` and
//! `S = R + P DᵀD`,
//!
//! ```text
//! Ṗ = −(2 A P + |C|² P + Q − P² βᵀ S⁻¹ β),   P_T = G
//! K = S⁻¹ β P
//! ```
//!
//! The equation is integrated backward with classical RK4; coefficients at
//! the half-step are the piecewise-linear interpolants of the grid data.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::grid::{GridFunction, ScalarPath, TimeGrid};
use crate::problem::{Coefficients, ProblemSpec};

#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    p: ScalarPath,
    p_dot: Vec<f64>,
    gain: GridFunction<DVector<f64>>,
    weight: GridFunction<DMatrix<f64>>,
}

/// Feedback quantities at one time, computed from `P(t)` and the coefficients.
#[derive(Debug, Clone)]
pub struct Decoupling {
    pub p: f64,
    /// `K = S⁻¹ (B + DᵀC) P`.
    pub gain: DVector<f64>,
    /// `S = R + P DᵀD`.
    pub weight: DMatrix<f64>,
    /// `S⁻¹ B`, so that the feedback offset is `k = S⁻¹ B p`.
    pub offset_map: DVector<f64>,
    /// Closed-loop mean drift `A − BᵀK`.
    pub mean_drift: f64,
    /// `Bᵀ S⁻¹ B`, the mean's sensitivity to the offset field.
    pub offset_gain: f64,
}

fn factor(weight: &DMatrix<f64>, t: f64) -> Result<Cholesky<f64, nalgebra::Dyn>> {
    Cholesky::new(weight.clone()).ok_or_else(|| {
        Error::Assumption(format!("S = R + P DᵀD lost positive definiteness at t = {t}"))
    })
}

fn decouple(c: &Coefficients, p: f64, t: f64) -> Result<Decoupling> {
    let dtd = c.d.transpose() * &c.d;
    let weight = &c.r + dtd * p;
    let chol = factor(&weight, t)?;
    let beta = &c.b + c.d.transpose() * &c.c;
    let gain = chol.solve(&beta) * p;
    let offset_map = chol.solve(&c.b);
    let mean_drift = c.a - c.b.dot(&gain);
    let offset_gain = c.b.dot(&offset_map);
    Ok(Decoupling {
        p,
        gain,
        weight,
        offset_map,
        mean_drift,
        offset_gain,
    })
}

fn riccati_rhs(c: &Coefficients, p: f64, t: f64) -> Result<f64> {
    let dtd = c.d.transpose() * &c.d;
    let weight = &c.r + dtd * p;
    let beta = &c.b + c.d.transpose() * &c.c;
    let chol = factor(&weight, t)?;
    let quad = beta.dot(&chol.solve(&beta));
    let v = -(2.0 * c.a * p + c.c.norm_squared() * p + c.q - p * p * quad);
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("Riccati right-hand side at t = {t}")));
    }
    Ok(v)
}

pub fn solve_riccati(spec: &ProblemSpec) -> Result<RiccatiSolution> {
    spec.check_dimensions()?;
    let grid = spec.grid;
    let n = grid.steps();
    let h = grid.step();
    let mut p = vec![0.0; n + 1];
    p[n] = spec.g;

    let mut upper = spec.coefficients_at_node(n);
    for i in (0..n).rev() {
        let t1 = grid.node(i + 1);
        let t0 = grid.node(i);
        let tm = 0.5 * (t0 + t1);
        let mid = spec.coefficients_at(tm);
        let lower = spec.coefficients_at_node(i);
        let y = p[i + 1];
        let k1 = riccati_rhs(&upper, y, t1)?;
        let k2 = riccati_rhs(&mid, y - 0.5 * h * k1, tm)?;
        let k3 = riccati_rhs(&mid, y - 0.5 * h * k2, tm)?;
        let k4 = riccati_rhs(&lower, y - h * k3, t0)?;
        p[i] = y - h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        if !p[i].is_finite() {
            return Err(Error::NonFinite(format!("Riccati solution at t = {t0} (blow-up)")));
        }
        upper = lower;
    }

    let mut p_dot = Vec::with_capacity(n + 1);
    let mut gain = Vec::with_capacity(n + 1);
    let mut weight = Vec::with_capacity(n + 1);
    for (i, &pi) in p.iter().enumerate() {
        let c = spec.coefficients_at_node(i);
        let t = grid.node(i);
        p_dot.push(riccati_rhs(&c, pi, t)?);
        let dec = decouple(&c, pi, t)?;
        gain.push(dec.gain);
        weight.push(dec.weight);
    }

    Ok(RiccatiSolution {
        p: GridFunction::new(grid, p)?,
        p_dot,
        gain: GridFunction::new(grid, gain)?,
        weight: GridFunction::new(grid, weight)?,
    })
}

impl RiccatiSolution {
    pub fn grid(&self) -> &TimeGrid {
        self.p.grid()
    }

    /// Nodal values of `P`.
    pub fn decoupling_field(&self) -> &ScalarPath {
        &self.p
    }

    /// Nodal feedback gains `K`.
    pub fn gain(&self) -> &GridFunction<DVector<f64>> {
        &self.gain
    }

    /// Nodal regularized control weights `S`.
    pub fn control_weight(&self) -> &GridFunction<DMatrix<f64>> {
        &self.weight
    }

    pub fn p0(&self) -> f64 {
        *self.p.first()
    }

    /// `P(t)` by cubic Hermite interpolation with the exact nodal slopes.
    pub fn value_at(&self, t: f64) -> f64 {
        let grid = self.p.grid();
        let (i, s) = grid.locate_clamped(t);
        hermite(
            *self.p.at(i),
            self.p_dot[i],
            *self.p.at(i + 1),
            self.p_dot[i + 1],
            grid.step(),
            s,
        )
    }

    /// Feedback quantities at an arbitrary time, consistent to the order of
    /// the integrator rather than to linear interpolation.
    pub fn decoupling_at(&self, spec: &ProblemSpec, t: f64) -> Result<Decoupling> {
        decouple(&spec.coefficients_at(t), self.value_at(t), t)
    }

    pub fn decoupling_at_node(&self, spec: &ProblemSpec, i: usize) -> Result<Decoupling> {
        decouple(&spec.coefficients_at_node(i), *self.p.at(i), self.grid().node(i))
    }
}

/// Piecewise-linear interpolation of the feedback gain.
pub fn gain_at(sol: &RiccatiSolution, t: f64) -> Result<DVector<f64>> {
    sol.gain.eval(t)
}

/// Cubic Hermite interpolant on one cell of width `h`, local coordinate `s ∈ [0, 1]`.
pub(crate) fn hermite(y0: f64, d0: f64, y1: f64, d1: f64, h: f64, s: f64) -> f64 {
    if s == 0.0 {
        return y0;
    }
    if s == 1.0 {
        return y1;
    }
    let s2 = s * s;
    let s3 = s2 * s;
    let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
    let h10 = s3 - 2.0 * s2 + s;
    let h01 = -2.0 * s3 + 3.0 * s2;
    let h11 = s3 - s2;
    h00 * y0 + h10 * h * d0 + h01 * y1 + h11 * h * d1
}
