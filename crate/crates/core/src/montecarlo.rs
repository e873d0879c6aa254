//! Euler–Maruyama simulation of the controlled state under affine feedback.
//!
//! Each path draws its Brownian increments from its own ChaCha stream
//! keyed by `(seed, path index)`. Paths are reduced in fixed chunks whose
//! partial sums are combined in index order, so results are bit-identical
//! for any thread count.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{GridFunction, ScalarPath, TimeGrid};
use crate::obstacle::MeanSolution;
use crate::problem::ProblemSpec;
use crate::riccati::RiccatiSolution;

const CHUNK: usize = 256;

/// Affine feedback `u_t = −K_t X_t − k_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackPolicy {
    pub gain: GridFunction<DVector<f64>>,
    pub offset: GridFunction<DVector<f64>>,
}

impl FeedbackPolicy {
    pub fn new(gain: GridFunction<DVector<f64>>, offset: GridFunction<DVector<f64>>) -> Result<Self> {
        if gain.grid() != offset.grid() {
            return Err(Error::Dimension("gain and offset on different grids".into()));
        }
        let l = gain.first().len();
        if gain.values().iter().chain(offset.values()).any(|v| v.len() != l) {
            return Err(Error::Dimension("gain and offset dimensions differ".into()));
        }
        Ok(Self { gain, offset })
    }

    pub fn zero(grid: TimeGrid, control_dim: usize) -> Self {
        let z = GridFunction::constant(grid, DVector::zeros(control_dim));
        Self {
            gain: z.clone(),
            offset: z,
        }
    }

    /// The feedback built from the Riccati gain and the constrained offset.
    pub fn optimal(ric: &RiccatiSolution, sol: &MeanSolution) -> Self {
        Self {
            gain: ric.gain().clone(),
            offset: sol.offset.clone(),
        }
    }

    /// Riccati gain with no offset: the optimum when the floor never binds.
    pub fn unconstrained(ric: &RiccatiSolution) -> Self {
        let l = ric.gain().first().len();
        Self {
            gain: ric.gain().clone(),
            offset: GridFunction::constant(*ric.grid(), DVector::zeros(l)),
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        self.gain.grid()
    }

    pub fn control_dim(&self) -> usize {
        self.gain.first().len()
    }

    pub fn control(&self, i: usize, x: f64) -> DVector<f64> {
        -(self.gain.at(i) * x) - self.offset.at(i)
    }

    fn check(&self, spec: &ProblemSpec) -> Result<()> {
        if *self.grid() != spec.grid {
            return Err(Error::Dimension("policy grid differs from the problem grid".into()));
        }
        if self.control_dim() != spec.control_dim {
            return Err(Error::Dimension(format!(
                "policy has {} controls, problem has {}",
                self.control_dim(),
                spec.control_dim
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MCConfig {
    pub paths: usize,
    pub seed: u64,
    pub grid: TimeGrid,
    /// Pair each path with its sign-flipped twin; `paths` must be even.
    pub antithetic: bool,
}

impl MCConfig {
    pub fn new(grid: TimeGrid, paths: usize, seed: u64) -> Self {
        Self {
            paths,
            seed,
            grid,
            antithetic: false,
        }
    }

    fn check(&self, spec: &ProblemSpec) -> Result<()> {
        if self.grid != spec.grid {
            return Err(Error::Dimension("Monte Carlo grid differs from the problem grid".into()));
        }
        if self.paths < 2 {
            return Err(Error::InvalidArgument("at least two paths are needed for standard errors".into()));
        }
        if self.antithetic && !self.paths.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "antithetic sampling needs an even path count, got {}",
                self.paths
            )));
        }
        Ok(())
    }

    /// Independent samples: paths, or antithetic pairs.
    fn samples(&self) -> usize {
        if self.antithetic {
            self.paths / 2
        } else {
            self.paths
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MCResult {
    pub cost_mean: f64,
    pub cost_se: f64,
    pub mean_path: ScalarPath,
    pub mean_path_se: ScalarPath,
    pub terminal_second_moment: f64,
    /// Mean and standard error of `Σ_i w_i X_i` when weights were supplied.
    pub functional: Option<(f64, f64)>,
}

/// Per-node closed-loop coefficients: the step is
/// `X += (α X + β) h + (γ X + η)ᵀ ΔW` and the running cost is
/// `c2 X² + c1 X + c0`.
struct ClosedLoop {
    m: usize,
    h: f64,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    gamma: Vec<f64>,
    eta: Vec<f64>,
    c2: Vec<f64>,
    c1: Vec<f64>,
    c0: Vec<f64>,
    terminal: f64,
}

impl ClosedLoop {
    fn new(spec: &ProblemSpec, policy: &FeedbackPolicy) -> Self {
        let n = spec.grid.steps();
        let m = spec.noise_dim;
        let mut cl = ClosedLoop {
            m,
            h: spec.grid.step(),
            alpha: Vec::with_capacity(n),
            beta: Vec::with_capacity(n),
            gamma: Vec::with_capacity(n * m),
            eta: Vec::with_capacity(n * m),
            c2: Vec::with_capacity(n),
            c1: Vec::with_capacity(n),
            c0: Vec::with_capacity(n),
            terminal: 0.5 * spec.g,
        };
        for i in 0..n {
            let c = spec.coefficients_at_node(i);
            let gain = policy.gain.at(i);
            let k = policy.offset.at(i);
            cl.alpha.push(c.a - c.b.dot(gain));
            cl.beta.push(-c.b.dot(k));
            cl.gamma.extend((&c.c - &c.d * gain).iter());
            cl.eta.extend((-(&c.d * k)).iter());
            let rk = &c.r * gain;
            cl.c2.push(0.5 * (c.q + gain.dot(&rk)));
            cl.c1.push(k.dot(&rk));
            cl.c0.push(0.5 * k.dot(&(&c.r * k)));
        }
        cl
    }
}

fn path_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Standard-normal draws for one path, scaled to increments `√h · N(0, I)`.
fn increments(seed: u64, index: usize, steps: usize, m: usize, h: f64) -> Vec<f64> {
    let mut rng = path_rng(seed, index);
    let s = h.sqrt();
    (0..steps * m)
        .map(|_| s * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Running mean and centered second moment, merged with Chan's update.
#[derive(Clone, Copy, Default)]
struct Moments {
    n: f64,
    mean: f64,
    m2: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.n += 1.0;
        let d = x - self.mean;
        self.mean += d / self.n;
        self.m2 += d * (x - self.mean);
    }

    fn merge(&mut self, o: &Moments) {
        if o.n == 0.0 {
            return;
        }
        let n = self.n + o.n;
        let d = o.mean - self.mean;
        self.mean += d * o.n / n;
        self.m2 += o.m2 + d * d * self.n * o.n / n;
        self.n = n;
    }

    fn se(&self) -> f64 {
        (self.m2.max(0.0) / (self.n - 1.0) / self.n).sqrt()
    }
}

struct Sums {
    cost: Moments,
    x: Vec<Moments>,
    terminal_sq: Moments,
    functional: Moments,
}

impl Sums {
    fn new(len: usize) -> Self {
        Self {
            cost: Moments::default(),
            x: vec![Moments::default(); len],
            terminal_sq: Moments::default(),
            functional: Moments::default(),
        }
    }

    fn merge(&mut self, other: &Sums) {
        self.cost.merge(&other.cost);
        for (a, b) in self.x.iter_mut().zip(&other.x) {
            a.merge(b);
        }
        self.terminal_sq.merge(&other.terminal_sq);
        self.functional.merge(&other.functional);
    }
}

/// One trajectory; returns its cost and writes the path into `xs`.
fn trajectory(cl: &ClosedLoop, x0: f64, dw: &[f64], sign: f64, xs: &mut [f64]) -> f64 {
    let mut x = x0;
    let mut cost = 0.0;
    xs[0] = x;
    for i in 0..cl.alpha.len() {
        cost += cl.h * (cl.c2[i] * x * x + cl.c1[i] * x + cl.c0[i]);
        let mut noise = 0.0;
        for j in 0..cl.m {
            noise += (cl.gamma[i * cl.m + j] * x + cl.eta[i * cl.m + j]) * dw[i * cl.m + j];
        }
        x += (cl.alpha[i] * x + cl.beta[i]) * cl.h + sign * noise;
        xs[i + 1] = x;
    }
    cost + cl.terminal * x * x
}

fn run(
    spec: &ProblemSpec,
    policy: &FeedbackPolicy,
    cfg: &MCConfig,
    weights: Option<&[f64]>,
) -> Result<MCResult> {
    cfg.check(spec)?;
    policy.check(spec)?;
    if let Some(w) = weights {
        if w.len() != spec.grid.len() {
            return Err(Error::Dimension(format!(
                "{} functional weights for {} nodes",
                w.len(),
                spec.grid.len()
            )));
        }
    }
    let cl = ClosedLoop::new(spec, policy);
    let steps = spec.grid.steps();
    let len = spec.grid.len();
    let samples = cfg.samples();
    let chunks = samples.div_ceil(CHUNK);

    let partial: Vec<Result<Sums>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut sums = Sums::new(len);
            let mut xs = vec![0.0; len];
            let mut twin = vec![0.0; len];
            for s in c * CHUNK..((c + 1) * CHUNK).min(samples) {
                let dw = increments(cfg.seed, s, steps, cl.m, cl.h);
                let mut cost = trajectory(&cl, spec.x0, &dw, 1.0, &mut xs);
                if cfg.antithetic {
                    cost = 0.5 * (cost + trajectory(&cl, spec.x0, &dw, -1.0, &mut twin));
                    for (a, b) in xs.iter_mut().zip(&twin) {
                        *a = 0.5 * (*a + b);
                    }
                }
                if !cost.is_finite() || xs.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite(format!("trajectory of path {s}")));
                }
                sums.cost.push(cost);
                for (acc, x) in sums.x.iter_mut().zip(&xs) {
                    acc.push(*x);
                }
                sums.terminal_sq.push(if cfg.antithetic {
                    0.5 * (xs_terminal_sq(&twin, &xs))
                } else {
                    xs[steps] * xs[steps]
                });
                if let Some(w) = weights {
                    let f: f64 = w.iter().zip(&xs).map(|(a, b)| a * b).sum();
                    sums.functional.push(f);
                }
            }
            Ok(sums)
        })
        .collect();

    let mut total = Sums::new(len);
    for p in partial {
        total.merge(&p?);
    }
    Ok(MCResult {
        cost_mean: total.cost.mean,
        cost_se: total.cost.se(),
        mean_path: GridFunction::new(spec.grid, total.x.iter().map(|m| m.mean).collect())?,
        mean_path_se: GridFunction::new(spec.grid, total.x.iter().map(|m| m.se()).collect())?,
        terminal_second_moment: total.terminal_sq.mean,
        functional: weights.map(|_| (total.functional.mean, total.functional.se())),
    })
}

// With antithetic pairs `xs` holds the pair average a = (x⁺ + x⁻)/2 and
// `twin` still holds x⁻, so x⁺ = 2a − x⁻ and the pair's terminal second
// moment is x⁺² + x⁻².
fn xs_terminal_sq(twin: &[f64], avg: &[f64]) -> f64 {
    let last = avg.len() - 1;
    let minus = twin[last];
    let plus = 2.0 * avg[last] - minus;
    plus * plus + minus * minus
}

pub fn simulate(spec: &ProblemSpec, policy: &FeedbackPolicy, cfg: &MCConfig) -> Result<MCResult> {
    run(spec, policy, cfg, None)
}

/// Simulates and also estimates `E[Σ_i w_i X_{t_i}]` path by path.
pub fn simulate_functional(
    spec: &ProblemSpec,
    policy: &FeedbackPolicy,
    cfg: &MCConfig,
    weights: &[f64],
) -> Result<MCResult> {
    run(spec, policy, cfg, Some(weights))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParallelogramReport {
    /// `J(u) + J(v) − 2 J((u + v)/2)`.
    pub lhs: f64,
    /// `¼ E[∫ Q (Xᵘ − Xᵛ)² + (u − v)ᵀR(u − v) dt + G (X_Tᵘ − X_Tᵛ)²]`.
    pub rhs: f64,
    pub gap: f64,
    pub cost_u: f64,
}

/// Evaluates both sides of the parallelogram identity under common random
/// numbers. The middle control is the process `(u_t + v_t)/2` built from the
/// two realized controls, whose state is the average of the two states, so
/// the identity holds path by path.
pub fn parallelogram_check(
    spec: &ProblemSpec,
    u_policy: &FeedbackPolicy,
    v_policy: &FeedbackPolicy,
    cfg: &MCConfig,
) -> Result<ParallelogramReport> {
    cfg.check(spec)?;
    u_policy.check(spec)?;
    v_policy.check(spec)?;
    let grid = spec.grid;
    let steps = grid.steps();
    let h = grid.step();
    let m = spec.noise_dim;
    let coeffs: Vec<_> = (0..steps).map(|i| spec.coefficients_at_node(i)).collect();

    let step = |i: usize, x: f64, u: &DVector<f64>, dw: &[f64]| -> f64 {
        let c = &coeffs[i];
        let diffusion = &c.c * x + &c.d * u;
        let noise: f64 = diffusion.iter().zip(dw).map(|(a, b)| a * b).sum();
        x + (c.a * x + c.b.dot(u)) * h + noise
    };
    let running = |i: usize, x: f64, u: &DVector<f64>| -> f64 {
        let c = &coeffs[i];
        0.5 * h * (c.q * x * x + u.dot(&(&c.r * u)))
    };
    let quad = |r: &DMatrix<f64>, w: &DVector<f64>| w.dot(&(r * w));

    let samples = cfg.samples();
    let per_path: Vec<Result<(f64, f64, f64)>> = (0..samples)
        .into_par_iter()
        .map(|s| {
            let dw = increments(cfg.seed, s, steps, m, h);
            let signs: &[f64] = if cfg.antithetic { &[1.0, -1.0] } else { &[1.0] };
            let mut acc = (0.0, 0.0, 0.0);
            for &sign in signs {
                let (mut xu, mut xv, mut xm) = (spec.x0, spec.x0, spec.x0);
                let (mut ju, mut jv, mut jm, mut diff) = (0.0, 0.0, 0.0, 0.0);
                for i in 0..steps {
                    let noise: Vec<f64> = dw[i * m..(i + 1) * m].iter().map(|w| sign * w).collect();
                    let u = u_policy.control(i, xu);
                    let v = v_policy.control(i, xv);
                    let w = (&u + &v) * 0.5;
                    ju += running(i, xu, &u);
                    jv += running(i, xv, &v);
                    jm += running(i, xm, &w);
                    let du = &u - &v;
                    diff += h * (coeffs[i].q * (xu - xv).powi(2) + quad(&coeffs[i].r, &du));
                    xu = step(i, xu, &u, &noise);
                    xv = step(i, xv, &v, &noise);
                    xm = step(i, xm, &w, &noise);
                }
                ju += 0.5 * spec.g * xu * xu;
                jv += 0.5 * spec.g * xv * xv;
                jm += 0.5 * spec.g * xm * xm;
                diff += spec.g * (xu - xv).powi(2);
                if ![ju, jv, jm, diff].iter().all(|v| v.is_finite()) {
                    return Err(Error::NonFinite(format!("trajectory of path {s}")));
                }
                let k = signs.len() as f64;
                acc.0 += (ju + jv - 2.0 * jm) / k;
                acc.1 += 0.25 * diff / k;
                acc.2 += ju / k;
            }
            Ok(acc)
        })
        .collect();

    let (mut lhs, mut rhs, mut cost_u) = (0.0, 0.0, 0.0);
    for r in per_path {
        let (a, b, c) = r?;
        lhs += a;
        rhs += b;
        cost_u += c;
    }
    let n = samples as f64;
    let (lhs, rhs, cost_u) = (lhs / n, rhs / n, cost_u / n);
    Ok(ParallelogramReport {
        lhs,
        rhs,
        gap: lhs - rhs,
        cost_u,
    })
}

/// Settings for [`verification_fuzz`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FuzzOptions {
    /// Admissible perturbations to test.
    pub trials: usize,
    /// Give up after this many candidates.
    pub max_attempts: usize,
    /// Bump amplitude for the gain `K`.
    pub gain_scale: f64,
    /// Bump amplitude for the offset `k`.
    pub offset_scale: f64,
    /// Seed for drawing the perturbations (not the noise).
    pub seed: u64,
}

impl Default for FuzzOptions {
    fn default() -> Self {
        Self {
            trials: 100,
            max_attempts: 2000,
            gain_scale: 0.5,
            offset_scale: 0.5,
            seed: 0x5eed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FuzzReport {
    pub reference_cost: f64,
    pub reference_se: f64,
    /// Perturbations that passed the admissibility screen.
    pub admissible: usize,
    /// Perturbations whose mean path fell below the floor beyond noise.
    pub rejected: usize,
    /// Admissible perturbations costing less than the reference by more than
    /// three combined standard errors.
    pub violations: usize,
    /// Smallest `J(perturbed) − J(reference)` over admissible trials.
    pub min_gap: f64,
    /// The same gap in units of the combined standard error.
    pub min_gap_in_se: f64,
}

/// Random admissible perturbations of an optimal feedback must not lower the cost.
///
/// Each candidate adds smooth Gaussian bumps to `(K, k)` and is simulated
/// with the same noise as the reference. A candidate is inadmissible when its
/// mean path falls below the floor by more than two standard errors plus the
/// reference's own discretization defect.
pub fn verification_fuzz(
    spec: &ProblemSpec,
    optimal: &FeedbackPolicy,
    cfg: &MCConfig,
    opts: &FuzzOptions,
) -> Result<FuzzReport> {
    let reference = simulate(spec, optimal, cfg)?;
    let defect = (0..spec.grid.len())
        .map(|i| spec.floor.at(i) - reference.mean_path.at(i))
        .fold(0.0_f64, f64::max);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = FuzzReport {
        reference_cost: reference.cost_mean,
        reference_se: reference.cost_se,
        admissible: 0,
        rejected: 0,
        violations: 0,
        min_gap: f64::INFINITY,
        min_gap_in_se: f64::INFINITY,
    };
    let mut attempts = 0;
    while report.admissible < opts.trials && attempts < opts.max_attempts {
        attempts += 1;
        let candidate = perturb(optimal, spec.grid.horizon(), opts, &mut rng)?;
        let sim = simulate(spec, &candidate, cfg)?;
        let admissible = (0..spec.grid.len())
            .all(|i| spec.floor.at(i) - sim.mean_path.at(i) <= 2.0 * sim.mean_path_se.at(i) + defect);
        if !admissible {
            report.rejected += 1;
            continue;
        }
        report.admissible += 1;
        let gap = sim.cost_mean - reference.cost_mean;
        let se = (sim.cost_se.powi(2) + reference.cost_se.powi(2)).sqrt();
        if gap < -3.0 * se {
            report.violations += 1;
        }
        report.min_gap = report.min_gap.min(gap);
        report.min_gap_in_se = report.min_gap_in_se.min(gap / se);
    }
    if report.admissible == 0 {
        report.min_gap = 0.0;
        report.min_gap_in_se = 0.0;
    }
    Ok(report)
}

fn perturb(
    policy: &FeedbackPolicy,
    horizon: f64,
    opts: &FuzzOptions,
    rng: &mut ChaCha8Rng,
) -> Result<FeedbackPolicy> {
    let l = policy.control_dim();
    let mut bump = |scale: f64| -> Vec<(f64, f64, f64)> {
        (0..l)
            .map(|_| {
                (
                    scale * rng.gen_range(-1.0..1.0),
                    horizon * rng.gen_range(0.0..1.0),
                    horizon * rng.gen_range(0.05..0.3),
                )
            })
            .collect()
    };
    let gain_bumps = bump(opts.gain_scale);
    let offset_bumps = bump(opts.offset_scale);
    let eval = |bumps: &[(f64, f64, f64)], t: f64| -> DVector<f64> {
        DVector::from_iterator(
            l,
            bumps
                .iter()
                .map(|(a, c, w)| a * (-((t - c) / w).powi(2)).exp()),
        )
    };
    let grid = *policy.grid();
    let gain = GridFunction::new(
        grid,
        grid.nodes()
            .zip(policy.gain.values())
            .map(|(t, k)| k + eval(&gain_bumps, t))
            .collect(),
    )?;
    let offset = GridFunction::new(
        grid,
        grid.nodes()
            .zip(policy.offset.values())
            .map(|(t, k)| k + eval(&offset_bumps, t))
            .collect(),
    )?;
    FeedbackPolicy::new(gain, offset)
}
