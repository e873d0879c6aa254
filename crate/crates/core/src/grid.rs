//! Uniform time grids on `[0, T]` and functions sampled on them.
//!
//! Every coefficient, path and gain in the crate lives on a [`TimeGrid`].
//! Off-node evaluation is piecewise linear; nodal evaluation returns the
//! stored value untouched.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Uniform partition `t_i = i * T / N`, `i = 0..=N`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "horizon must be positive and finite, got {horizon}"
            )));
        }
        if steps == 0 {
            return Err(Error::InvalidArgument("grid needs at least one step".into()));
        }
        Ok(Self { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Spacing `h = T / N`.
    pub fn step(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn len(&self) -> usize {
        self.steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Node `t_i`; the last node is `T` exactly.
    pub fn node(&self, i: usize) -> f64 {
        if i >= self.steps {
            self.horizon
        } else {
            i as f64 * self.horizon / self.steps as f64
        }
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.steps).map(move |i| self.node(i))
    }

    /// Cell index `i` and local coordinate `theta` with `t = t_i + theta * h`.
    pub fn locate(&self, t: f64) -> Result<(usize, f64)> {
        let tol = 1e-12 * self.horizon;
        if !(t >= -tol && t <= self.horizon + tol) {
            return Err(Error::OutOfRange {
                t,
                horizon: self.horizon,
            });
        }
        Ok(self.locate_clamped(t))
    }

    pub(crate) fn locate_clamped(&self, t: f64) -> (usize, f64) {
        let s = (t / self.horizon * self.steps as f64).clamp(0.0, self.steps as f64);
        let i = (s.floor() as usize).min(self.steps - 1);
        (i, (s - i as f64).clamp(0.0, 1.0))
    }
}

/// Values that can be blended linearly between two nodes.
pub trait Lerp: Clone {
    fn lerp(&self, other: &Self, theta: f64) -> Self;
}

impl Lerp for f64 {
    fn lerp(&self, other: &Self, theta: f64) -> Self {
        if theta == 0.0 {
            *self
        } else if theta == 1.0 {
            *other
        } else {
            self + theta * (other - self)
        }
    }
}

impl Lerp for DVector<f64> {
    fn lerp(&self, other: &Self, theta: f64) -> Self {
        if theta == 0.0 {
            self.clone()
        } else if theta == 1.0 {
            other.clone()
        } else {
            self + (other - self) * theta
        }
    }
}

impl Lerp for DMatrix<f64> {
    fn lerp(&self, other: &Self, theta: f64) -> Self {
        if theta == 0.0 {
            self.clone()
        } else if theta == 1.0 {
            other.clone()
        } else {
            self + (other - self) * theta
        }
    }
}

/// A function sampled at the `N + 1` nodes of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction<T> {
    grid: TimeGrid,
    values: Vec<T>,
}

pub type ScalarPath = GridFunction<f64>;

impl<T: Lerp> GridFunction<T> {
    pub fn new(grid: TimeGrid, values: Vec<T>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Dimension(format!(
                "grid function has {} values, grid has {} nodes",
                values.len(),
                grid.len()
            )));
        }
        Ok(Self { grid, values })
    }

    pub fn constant(grid: TimeGrid, value: T) -> Self {
        Self {
            grid,
            values: vec![value; grid.len()],
        }
    }

    pub fn from_fn(grid: TimeGrid, mut f: impl FnMut(f64) -> T) -> Self {
        Self {
            grid,
            values: grid.nodes().map(&mut f).collect(),
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn at(&self, i: usize) -> &T {
        &self.values[i]
    }

    pub fn first(&self) -> &T {
        &self.values[0]
    }

    pub fn last(&self) -> &T {
        &self.values[self.values.len() - 1]
    }

    /// Piecewise-linear evaluation; errors outside `[0, T]`.
    pub fn eval(&self, t: f64) -> Result<T> {
        let (i, theta) = self.grid.locate(t)?;
        Ok(self.values[i].lerp(&self.values[i + 1], theta))
    }

    pub(crate) fn eval_clamped(&self, t: f64) -> T {
        let (i, theta) = self.grid.locate_clamped(t);
        self.values[i].lerp(&self.values[i + 1], theta)
    }

    pub fn map<U: Lerp>(&self, f: impl FnMut(&T) -> U) -> GridFunction<U> {
        GridFunction {
            grid: self.grid,
            values: self.values.iter().map(f).collect(),
        }
    }
}

impl GridFunction<f64> {
    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |acc, v| acc.max(v.abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nodes_are_exact_at_the_ends() {
        let g = TimeGrid::new(0.1, 3).unwrap();
        assert_eq!(g.node(0), 0.0);
        assert_eq!(g.node(3), 0.1);
        let nodes: Vec<f64> = g.nodes().collect();
        assert!(nodes.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(g.step(), 0.1 / 3.0);
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(TimeGrid::new(0.0, 4).is_err());
        assert!(TimeGrid::new(1.0, 0).is_err());
        assert!(TimeGrid::new(f64::NAN, 4).is_err());
    }

    #[test]
    fn nodal_evaluation_is_exact() {
        let g = TimeGrid::new(1.0, 7).unwrap();
        let f = GridFunction::from_fn(g, |t| (3.0 * t).sin());
        for i in 0..=7 {
            assert_eq!(f.eval(g.node(i)).unwrap(), *f.at(i));
        }
    }

    #[test]
    fn midpoint_is_average() {
        let g = TimeGrid::new(2.0, 4).unwrap();
        let f = GridFunction::new(g, vec![0.0, 1.0, 4.0, 9.0, 16.0]).unwrap();
        assert!((f.eval(0.75).unwrap() - 2.5).abs() < 1e-15);
        assert!(f.eval(2.5).is_err());
        assert!(f.eval(-0.1).is_err());
    }

    #[test]
    fn length_is_checked() {
        let g = TimeGrid::new(1.0, 3).unwrap();
        assert!(GridFunction::new(g, vec![1.0; 3]).is_err());
    }
}
