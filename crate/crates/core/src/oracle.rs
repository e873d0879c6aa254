//! Binomial-tree optimizer for the penalized problem.
//!
//! Step `i` has `2^i` equally likely nodes. Node `(i, j)` branches to
//! `(i + 1, 2j)` with `ΔW = +√h` and `(i + 1, 2j + 1)` with `ΔW = −√h`, so
//! increments match the Gaussian mean and variance exactly. Every node carries
//! its own control in `ℝˡ`, stored flat at `(2^i − 1 + j)·l`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{GridFunction, ScalarPath};
use crate::problem::ProblemSpec;

pub const MAX_TREE_STEPS: usize = 12;

struct Level {
    a: f64,
    b: DVector<f64>,
    c: f64,
    d: DVector<f64>,
    q: f64,
    r: DMatrix<f64>,
    floor: f64,
}

pub struct TreeProblem {
    spec: ProblemSpec,
    penalty: f64,
    levels: Vec<Level>,
}

impl TreeProblem {
    pub fn new(spec: ProblemSpec, penalty: f64) -> Result<Self> {
        spec.check_dimensions()?;
        let n = spec.grid.steps();
        if n > MAX_TREE_STEPS {
            return Err(Error::InvalidArgument(format!(
                "tree depth {n} exceeds {MAX_TREE_STEPS}"
            )));
        }
        if spec.noise_dim != 1 {
            return Err(Error::Dimension(format!(
                "the tree has one Brownian driver, the problem has {}",
                spec.noise_dim
            )));
        }
        if !(penalty >= 0.0) || !penalty.is_finite() {
            return Err(Error::InvalidArgument(format!("penalty weight {penalty}")));
        }
        let levels = (0..=n)
            .map(|i| {
                let c = spec.coefficients_at_node(i);
                Level {
                    a: c.a,
                    b: c.b.clone(),
                    c: c.c[0],
                    d: c.d.row(0).transpose(),
                    q: c.q,
                    r: c.r.clone(),
                    floor: c.floor,
                }
            })
            .collect();
        Ok(Self {
            spec,
            penalty,
            levels,
        })
    }

    pub fn spec(&self) -> &ProblemSpec {
        &self.spec
    }

    pub fn penalty(&self) -> f64 {
        self.penalty
    }

    pub fn steps(&self) -> usize {
        self.spec.grid.steps()
    }

    /// Number of control-carrying nodes, `2^N − 1`.
    pub fn nodes(&self) -> usize {
        (1 << self.steps()) - 1
    }

    pub fn control_len(&self) -> usize {
        self.nodes() * self.spec.control_dim
    }

    fn h(&self) -> f64 {
        self.spec.grid.step()
    }

    fn control(&self, controls: &[f64], i: usize, j: usize) -> DVector<f64> {
        let l = self.spec.control_dim;
        let at = ((1 << i) - 1 + j) * l;
        DVector::from_column_slice(&controls[at..at + l])
    }

    fn check(&self, controls: &[f64]) -> Result<()> {
        if controls.len() != self.control_len() {
            return Err(Error::Dimension(format!(
                "{} control entries for {} tree nodes of dimension {}",
                controls.len(),
                self.nodes(),
                self.spec.control_dim
            )));
        }
        Ok(())
    }

    /// States level by level.
    fn states(&self, controls: &[f64]) -> Vec<Vec<f64>> {
        let h = self.h();
        let s = h.sqrt();
        let mut out = vec![vec![self.spec.x0]];
        for i in 0..self.steps() {
            let lv = &self.levels[i];
            let prev = &out[i];
            let mut next = Vec::with_capacity(prev.len() * 2);
            for (j, &x) in prev.iter().enumerate() {
                let u = self.control(controls, i, j);
                for xi in [s, -s] {
                    next.push(x * (1.0 + lv.a * h + lv.c * xi) + u.dot(&(&lv.b * h + &lv.d * xi)));
                }
            }
            out.push(next);
        }
        out
    }

    /// Node-probability means `E[X_i]`.
    pub fn mean_path(&self, controls: &[f64]) -> Result<ScalarPath> {
        self.check(controls)?;
        let means = self
            .states(controls)
            .iter()
            .map(|lv| lv.iter().sum::<f64>() / lv.len() as f64)
            .collect();
        GridFunction::new(self.spec.grid, means)
    }

    /// Controls of the affine feedback `u = −K_i X − k_i` at every node.
    pub fn feedback_controls(&self, gain: &[DVector<f64>], offset: &[DVector<f64>]) -> Result<Vec<f64>> {
        let n = self.steps();
        let l = self.spec.control_dim;
        if gain.len() < n || offset.len() < n || gain.iter().chain(offset).any(|v| v.len() != l) {
            return Err(Error::Dimension("feedback gains do not cover the tree".into()));
        }
        let h = self.h();
        let s = h.sqrt();
        let mut controls = Vec::with_capacity(self.control_len());
        let mut level = vec![self.spec.x0];
        for i in 0..n {
            let lv = &self.levels[i];
            let mut next = Vec::with_capacity(level.len() * 2);
            for &x in &level {
                let u = -(&gain[i] * x) - &offset[i];
                controls.extend(u.iter());
                for xi in [s, -s] {
                    next.push(x * (1.0 + lv.a * h + lv.c * xi) + u.dot(&(&lv.b * h + &lv.d * xi)));
                }
            }
            level = next;
        }
        Ok(controls)
    }
}

fn minus(z: f64) -> f64 {
    (-z).max(0.0)
}

/// The objective split into its summands: per-node running costs and the
/// penalty term level by level, then per-node terminal costs. Differencing
/// two of these term by term avoids cancelling the unchanged bulk of `J`.
pub fn tree_objective_terms(tp: &TreeProblem, controls: &[f64]) -> Result<Vec<f64>> {
    tp.check(controls)?;
    let h = tp.h();
    let states = tp.states(controls);
    let mut terms = Vec::with_capacity(2 * states[tp.steps()].len() + tp.steps());
    for i in 0..tp.steps() {
        let lv = &tp.levels[i];
        let w = 1.0 / states[i].len() as f64;
        let mut mean = 0.0;
        for (j, &x) in states[i].iter().enumerate() {
            let u = tp.control(controls, i, j);
            terms.push(0.5 * h * w * (lv.q * x * x + u.dot(&(&lv.r * &u))));
            mean += x;
        }
        terms.push(0.5 * tp.penalty * h * minus(mean * w - lv.floor).powi(2));
    }
    let last = &states[tp.steps()];
    let w = 1.0 / last.len() as f64;
    terms.extend(last.iter().map(|x| 0.5 * tp.spec.g * w * x * x));
    Ok(terms)
}

/// Penalized cost with exact expectations over the tree.
pub fn tree_objective(tp: &TreeProblem, controls: &[f64]) -> Result<f64> {
    Ok(tree_objective_terms(tp, controls)?.iter().sum())
}

/// Central difference `(J(u + δe_k) − J(u − δe_k)) / 2δ`, summed term by term.
pub fn tree_central_difference(tp: &TreeProblem, controls: &[f64], k: usize, step: f64) -> Result<f64> {
    if k >= controls.len() {
        return Err(Error::Dimension(format!("coordinate {k} of {}", controls.len())));
    }
    let mut up = controls.to_vec();
    let mut dn = controls.to_vec();
    up[k] += step;
    dn[k] -= step;
    let plus = tree_objective_terms(tp, &up)?;
    let minus = tree_objective_terms(tp, &dn)?;
    Ok(plus.iter().zip(&minus).map(|(a, b)| a - b).sum::<f64>() / (2.0 * step))
}

/// Gradient of [`tree_objective`] and the root adjoint `Y₀ = ∂J/∂x`.
pub fn tree_gradient(tp: &TreeProblem, controls: &[f64]) -> Result<(Vec<f64>, f64)> {
    tp.check(controls)?;
    let n = tp.steps();
    let l = tp.spec.control_dim;
    let h = tp.h();
    let s = h.sqrt();
    let states = tp.states(controls);
    let mut grad = vec![0.0; controls.len()];
    let w_last = 1.0 / states[n].len() as f64;
    let mut adj: Vec<f64> = states[n].iter().map(|x| w_last * tp.spec.g * x).collect();
    for i in (0..n).rev() {
        let lv = &tp.levels[i];
        let w = 1.0 / states[i].len() as f64;
        let mean = states[i].iter().sum::<f64>() * w;
        let pen = tp.penalty * h * minus(mean - lv.floor) * w;
        let mut here = Vec::with_capacity(states[i].len());
        for (j, &x) in states[i].iter().enumerate() {
            let u = tp.control(controls, i, j);
            let mut g = (&lv.r * &u) * (w * h);
            let mut lam = w * h * lv.q * x - pen;
            for (c, xi) in [(2 * j, s), (2 * j + 1, -s)] {
                lam += adj[c] * (1.0 + lv.a * h + lv.c * xi);
                g += (&lv.b * h + &lv.d * xi) * adj[c];
            }
            let at = ((1 << i) - 1 + j) * l;
            grad[at..at + l].copy_from_slice(g.as_slice());
            here.push(lam);
        }
        adj = here;
    }
    Ok((grad, adj[0]))
}

/// `(n/2) Σ_i h (E[X_i] − L_i)₋ L_i`, the floor term of the discrete value identity.
pub fn tree_floor_term(tp: &TreeProblem, controls: &[f64]) -> Result<f64> {
    let mean = tp.mean_path(controls)?;
    let h = tp.h();
    Ok((0..tp.steps())
        .map(|i| {
            let lv = &tp.levels[i];
            0.5 * tp.penalty * h * minus(mean.at(i) - lv.floor) * lv.floor
        })
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TreeOptions {
    pub tolerance: f64,
    pub max_iter: usize,
}

impl Default for TreeOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iter: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeSolution {
    pub controls: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    /// Probability-weighted gradient norm at exit.
    pub gradient_norm: f64,
    pub converged: bool,
    pub root_adjoint: f64,
}

/// Gradient descent on the node controls.
///
/// Each coordinate's gradient is divided by its node probability, which
/// turns the search direction into the gradient in the probability-weighted
/// inner product. Steps start from the Barzilai–Borwein length and backtrack
/// until the Armijo condition holds. Stops when
/// `sqrt(Σ g²/w) ≤ tol·(1 + |J|)`.
pub fn tree_minimize(tp: &TreeProblem, init: &[f64], opts: &TreeOptions) -> Result<TreeSolution> {
    tp.check(init)?;
    let l = tp.spec.control_dim;
    let weight: Vec<f64> = (0..tp.steps())
        .flat_map(|i| std::iter::repeat_n(1.0 / (1u64 << i) as f64, (1 << i) * l))
        .collect();
    let mut u = init.to_vec();
    let mut terms = tree_objective_terms(tp, &u)?;
    let mut j: f64 = terms.iter().sum();
    let (mut g, mut y0) = tree_gradient(tp, &u)?;
    let mut dir: Vec<f64> = g.iter().zip(&weight).map(|(g, w)| g / w).collect();
    let mut step = 1.0;
    let mut iterations = 0;
    loop {
        let norm = g.iter().zip(&dir).map(|(a, b)| a * b).sum::<f64>().sqrt();
        if !j.is_finite() || !norm.is_finite() {
            return Err(Error::NonFinite("tree objective".into()));
        }
        let converged = norm <= opts.tolerance * (1.0 + j.abs());
        let finish = |u: Vec<f64>, converged: bool, iterations: usize| TreeSolution {
            controls: u,
            objective: j,
            iterations,
            gradient_norm: norm,
            converged,
            root_adjoint: y0,
        };
        if converged || iterations >= opts.max_iter {
            return Ok(finish(u, converged, iterations));
        }
        iterations += 1;
        let slope = norm * norm;
        let mut trial_step = step;
        // Sufficient decrease is tested on the term-wise difference. Near the
        // optimum that difference sinks below the rounding level of `J`; a
        // step along which the directional derivative is still nonpositive
        // cannot have raised a convex objective, so it is accepted as well.
        let (trial, trial_terms, ng, ny0) = loop {
            let trial: Vec<f64> = u.iter().zip(&dir).map(|(u, d)| u - trial_step * d).collect();
            let tt = tree_objective_terms(tp, &trial)?;
            let decrease: f64 = terms.iter().zip(&tt).map(|(a, b)| a - b).sum();
            let (ng, ny0) = tree_gradient(tp, &trial)?;
            let still_descending = ng.iter().zip(&dir).map(|(a, b)| a * b).sum::<f64>() >= 0.0;
            if decrease >= 1e-4 * trial_step * slope || still_descending {
                break (trial, tt, ng, ny0);
            }
            trial_step *= 0.5;
            if trial_step < 1e-30 {
                return Ok(finish(u, false, iterations));
            }
        };
        let ndir: Vec<f64> = ng.iter().zip(&weight).map(|(g, w)| g / w).collect();
        // Barzilai–Borwein length in the weighted inner product.
        let mut ss = 0.0;
        let mut sy = 0.0;
        for k in 0..u.len() {
            let sk = trial[k] - u[k];
            let yk = ndir[k] - dir[k];
            ss += weight[k] * sk * sk;
            sy += weight[k] * sk * yk;
        }
        step = if sy > 0.0 { ss / sy } else { 2.0 * trial_step };
        u = trial;
        terms = trial_terms;
        j = terms.iter().sum();
        g = ng;
        y0 = ny0;
        dir = ndir;
    }
}

/// Minimizes from several random starts and returns the best solution and
/// the spread of the objectives.
pub fn tree_multistart(
    tp: &TreeProblem,
    starts: usize,
    seed: u64,
    opts: &TreeOptions,
) -> Result<(TreeSolution, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<TreeSolution> = None;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..starts.max(1) {
        let init: Vec<f64> = (0..tp.control_len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let sol = tree_minimize(tp, &init, opts)?;
        lo = lo.min(sol.objective);
        hi = hi.max(sol.objective);
        if best.as_ref().is_none_or(|b| sol.objective < b.objective) {
            best = Some(sol);
        }
    }
    Ok((best.expect("at least one start"), hi - lo))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::ScalarProblem;

    fn base(steps: usize) -> ScalarProblem {
        ScalarProblem {
            horizon: 1.0,
            steps,
            a: 0.3,
            b: 1.0,
            c: 0.4,
            d: 0.5,
            q: 1.0,
            r: 1.0,
            g: 0.5,
            floor: 0.8,
            x0: 1.0,
        }
    }

    fn random_controls(tp: &TreeProblem, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..tp.control_len()).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Exact moment recursion of the Euler chain under `u = −K X − k`.
    fn moment_cost(sp: &ScalarProblem, n: f64, gain: &[f64], offset: &[f64]) -> f64 {
        let h = sp.horizon / sp.steps as f64;
        let (mut m, mut v) = (sp.x0, sp.x0 * sp.x0);
        let mut cost = 0.0;
        for i in 0..sp.steps {
            let (k, kk) = (gain[i], offset[i]);
            let eu = -k * m - kk;
            let euu = k * k * v + 2.0 * k * kk * m + kk * kk;
            let exu = -k * v - kk * m;
            cost += 0.5 * h * (sp.q * v + sp.r * euu) + 0.5 * n * h * minus(m - sp.floor).powi(2);
            let alpha = 1.0 + sp.a * h;
            let nm = alpha * m + h * sp.b * eu;
            let drift2 = alpha * alpha * v + 2.0 * alpha * h * sp.b * exu + h * h * sp.b * sp.b * euu;
            let noise2 = h * (sp.c * sp.c * v + 2.0 * sp.c * sp.d * exu + sp.d * sp.d * euu);
            m = nm;
            v = drift2 + noise2;
        }
        cost + 0.5 * sp.g * v
    }

    #[test]
    fn deterministic_zero_control() {
        let sp = ScalarProblem { c: 0.0, a: 0.0, ..base(6) };
        let tp = TreeProblem::new(sp.build().unwrap(), 10.0).unwrap();
        let j = tree_objective(&tp, &vec![0.0; tp.control_len()]).unwrap();
        assert!((j - (0.5 * 1.0 + 0.5 * 0.5)).abs() < 1e-14);
    }

    #[test]
    fn zero_start_without_cost() {
        let sp = ScalarProblem { q: 0.0, x0: 0.0, floor: -1.0, ..base(5) };
        let tp = TreeProblem::new(sp.build().unwrap(), 100.0).unwrap();
        assert_eq!(tree_objective(&tp, &vec![0.0; tp.control_len()]).unwrap(), 0.0);
        let sol = tree_minimize(&tp, &random_controls(&tp, 1), &TreeOptions::default()).unwrap();
        assert!(sol.converged);
        assert!(sol.objective < 1e-14);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(TreeProblem::new(base(13).build().unwrap(), 1.0).is_err());
        assert!(TreeProblem::new(base(4).build().unwrap(), -1.0).is_err());
        let tp = TreeProblem::new(base(4).build().unwrap(), 1.0).unwrap();
        assert!(tree_objective(&tp, &[0.0; 3]).is_err());
    }

    #[test]
    fn gradient_matches_central_differences() {
        for seed in 0..4 {
            let tp = TreeProblem::new(base(10).build().unwrap(), 50.0).unwrap();
            let u = random_controls(&tp, seed);
            let (g, _) = tree_gradient(&tp, &u).unwrap();
            for k in 0..u.len() {
                let fd = tree_central_difference(&tp, &u, k, 1e-6).unwrap();
                assert!((fd - g[k]).abs() <= 1e-5 * g[k].abs(), "coord {k}: fd {fd} adjoint {}", g[k]);
            }
        }
    }

    #[test]
    fn inactive_penalty_leaves_gradient_unchanged() {
        let sp = ScalarProblem { floor: -100.0, ..base(5) };
        let tp = TreeProblem::new(sp.build().unwrap(), 1e4).unwrap();
        let free = TreeProblem::new(sp.build().unwrap(), 0.0).unwrap();
        let u = random_controls(&tp, 3);
        assert_eq!(tree_gradient(&tp, &u).unwrap(), tree_gradient(&free, &u).unwrap());
    }

    #[test]
    fn linear_feedback_matches_moment_recursion() {
        let sp = base(8);
        let tp = TreeProblem::new(sp.build().unwrap(), 200.0).unwrap();
        let gain: Vec<f64> = (0..8).map(|i| 0.3 + 0.1 * i as f64).collect();
        let offset: Vec<f64> = (0..8).map(|i| 0.2 - 0.07 * i as f64).collect();
        let dv = |v: &[f64]| v.iter().map(|&x| DVector::from_element(1, x)).collect::<Vec<_>>();
        let u = tp.feedback_controls(&dv(&gain), &dv(&offset)).unwrap();
        let tree = tree_objective(&tp, &u).unwrap();
        let exact = moment_cost(&sp, 200.0, &gain, &offset);
        assert!((tree - exact).abs() <= 1e-12 * exact.abs().max(1.0), "{tree} vs {exact}");
    }

    #[test]
    fn unconstrained_optimum_is_discrete_riccati() {
        let sp = ScalarProblem { floor: -100.0, ..base(8) };
        let h = 1.0 / 8.0;
        let mut p = sp.g;
        let mut gains = vec![0.0; 8];
        for i in (0..8).rev() {
            let alpha = 1.0 + sp.a * h;
            let m = sp.r + p * (h * sp.b * sp.b + sp.d * sp.d);
            let gv = p * (alpha * sp.b + sp.d * sp.c);
            gains[i] = gv / m;
            p = h * sp.q + p * alpha * alpha + h * p * sp.c * sp.c - h * gv * gv / m;
        }
        let tp = TreeProblem::new(sp.build().unwrap(), 0.0).unwrap();
        let sol = tree_minimize(&tp, &vec![0.0; tp.control_len()], &TreeOptions::default()).unwrap();
        assert!(sol.converged);
        assert!((sol.objective - 0.5 * p * sp.x0 * sp.x0).abs() < 1e-10, "{} vs {}", sol.objective, 0.5 * p);
        let dv = |v: &[f64]| v.iter().map(|&x| DVector::from_element(1, x)).collect::<Vec<_>>();
        let fb = tp.feedback_controls(&dv(&gains), &dv(&[0.0; 8])).unwrap();
        let (g, _) = tree_gradient(&tp, &fb).unwrap();
        assert!(g.iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn value_identity_at_optimum() {
        let tp = TreeProblem::new(base(7).build().unwrap(), 1e3).unwrap();
        let sol = tree_minimize(&tp, &vec![0.0; tp.control_len()], &TreeOptions::default()).unwrap();
        assert!(sol.converged);
        let floor = tree_floor_term(&tp, &sol.controls).unwrap();
        assert!(floor > 0.0, "the floor should bind");
        let identity = 0.5 * sol.root_adjoint * tp.spec().x0 + floor;
        assert!((identity - sol.objective).abs() <= 1e-6 * sol.objective.abs());
    }

    #[test]
    fn starts_agree() {
        let tp = TreeProblem::new(base(6).build().unwrap(), 1e3).unwrap();
        let (_, spread) = tree_multistart(&tp, 5, 11, &TreeOptions::default()).unwrap();
        assert!(spread <= 1e-8, "spread {spread}");
    }
}
