use std::fmt::Write as _;

use meanref_core::*;
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::output::{ensure_dir, num, write_text, Table};
use crate::RunArgs;

const DEFAULT_PATHS: usize = 100_000;
const DEFAULT_VERIFY_PATHS: usize = 20_000;

struct Loaded {
    spec: ProblemSpec,
    report: ValidationReport,
}

fn load(args: &RunArgs) -> Result<Loaded> {
    let file = ProblemSpec::load(&args.problem).map_err(|e| match e {
        Error::Io(io) => Error::Field {
            field: "--problem".into(),
            message: format!("{}: {io}", args.problem.display()),
        },
        other => other,
    })?;
    let mut spec = file.spec;
    if let Some(n) = args.grid {
        let grid = TimeGrid::new(spec.grid.horizon(), n).map_err(|e| Error::Field {
            field: "--grid".into(),
            message: e.to_string(),
        })?;
        spec = spec.resample(grid)?;
    }
    let report = validate_spec(&spec, file.delta, file.epsilon)?.into_result()?;
    spec.check_feasible_start()?;
    ensure_dir(&args.out)?;
    Ok(Loaded { spec, report })
}

fn positive(value: Option<f64>, flag: &str, default: f64) -> Result<f64> {
    match value {
        None => Ok(default),
        Some(v) if v.is_finite() && v > 0.0 => Ok(v),
        Some(v) => Err(Error::Field {
            field: flag.into(),
            message: format!("must be positive and finite, got {v}"),
        }),
    }
}

fn tolerances(args: &RunArgs, stop_early: bool) -> Result<Tolerances> {
    let d = Tolerances::default();
    let damping = positive(args.damping, "--damping", d.damping)?;
    if damping > 1.0 {
        return Err(Error::Field {
            field: "--damping".into(),
            message: format!("must lie in (0, 1], got {damping}"),
        });
    }
    let max_iter = match args.max_iter {
        Some(0) => {
            return Err(Error::Field {
                field: "--max-iter".into(),
                message: "must be at least 1".into(),
            })
        }
        Some(n) => n,
        None => d.max_iter,
    };
    Ok(Tolerances {
        fixed_point: positive(args.fp_tol, "--fp-tol", d.fixed_point)?,
        max_iter,
        damping,
        feasibility: positive(args.feas_tol, "--feas-tol", d.feasibility)?,
        complementarity: positive(args.comp_tol, "--comp-tol", d.complementarity)?,
        stop_early,
    })
}

fn schedule(args: &RunArgs, n0: f64, ratio: f64, stages: usize) -> Result<PenaltySchedule> {
    let n0 = positive(args.n0, "--n0", n0)?;
    let ratio = args.ratio.unwrap_or(ratio);
    if !(ratio.is_finite() && ratio > 1.0) {
        return Err(Error::Field {
            field: "--ratio".into(),
            message: format!("must exceed 1, got {ratio}"),
        });
    }
    let stages = args.stages.unwrap_or(stages);
    if stages == 0 {
        return Err(Error::Field {
            field: "--stages".into(),
            message: "must be at least 1".into(),
        });
    }
    PenaltySchedule::geometric(n0, ratio, stages)
}

fn paths(args: &RunArgs, default: usize) -> Result<usize> {
    let p = args.paths.unwrap_or(default);
    if p < 2 {
        return Err(Error::Field {
            field: "--paths".into(),
            message: format!("need at least 2 paths, got {p}"),
        });
    }
    Ok(p)
}

struct Solved {
    ric: RiccatiSolution,
    sol: MeanSolution,
    trace: PenaltyTrace,
}

fn solve_problem(args: &RunArgs, spec: &ProblemSpec, stop_early: bool) -> Result<Solved> {
    let tol = tolerances(args, stop_early)?;
    let schedule = schedule(args, 1e2, 4.0, 9)?;
    let ric = solve_riccati(spec)?;
    let (sol, trace) = solve_constrained(spec, &ric, &schedule, &tol)?;
    Ok(Solved { ric, sol, trace })
}

/// Non-convergence of the last stage or unmet tolerances, reported after the
/// artifacts are written.
fn convergence(trace: &PenaltyTrace) -> Result<()> {
    let last = trace.last().expect("schedule is nonempty");
    if !last.fixed_point_converged {
        return Err(Error::NonConvergence {
            what: "penalized fixed point",
            iterations: last.iterations,
            residual: last.residual,
        });
    }
    if !trace.tolerances_met {
        return Err(Error::NonConvergence {
            what: "penalty schedule (feasibility/complementarity tolerances)",
            iterations: trace.stages.len(),
            residual: last.feasibility_defect.max(last.complementarity.abs()),
        });
    }
    Ok(())
}

fn trace_table(trace: &PenaltyTrace) -> Table {
    let mut t = Table::new([
        "n",
        "V_n",
        "penalty_mass",
        "iterations",
        "residual",
        "converged",
        "feasibility_defect",
        "complementarity",
    ]);
    for s in &trace.stages {
        t.row([
            num(s.weight),
            num(s.value),
            num(s.penalty_mass),
            s.iterations.to_string(),
            num(s.residual),
            s.fixed_point_converged.to_string(),
            num(s.feasibility_defect),
            num(s.complementarity),
        ]);
    }
    t
}

pub fn solve(args: &RunArgs) -> Result<()> {
    let Loaded { spec, report } = load(args)?;
    let Solved { ric, sol, trace } = solve_problem(args, &spec, true)?;
    let l = spec.control_dim;

    let mut header = vec!["t".to_string(), "m".into(), "p".into()];
    header.extend((1..=l).map(|j| format!("K_{j}")));
    header.extend((1..=l).map(|j| format!("k_{j}")));
    header.extend(["c".to_string(), "L".into()]);
    let mut table = Table::new(header);
    for (i, t) in spec.grid.nodes().enumerate() {
        let mut row = vec![num(t), num(*sol.mean.at(i)), num(*sol.offset_field.at(i))];
        row.extend(ric.gain().at(i).iter().map(|v| num(*v)));
        row.extend(sol.offset.at(i).iter().map(|v| num(*v)));
        row.push(num(*sol.mu.cumulative().at(i)));
        row.push(num(*spec.floor.at(i)));
        table.row(row);
    }
    table.write(&args.out, "solution.csv")?;

    let value = optimal_value(&sol, &spec);
    let moments = cost_via_moments(&spec, &ric, &sol)?;
    let comp = complementarity_residual(&sol.mean, &spec.floor, &sol.mu)?;
    let mut text = String::new();
    let _ = writeln!(text, "problem            {}", args.problem.display());
    let _ = writeln!(text, "grid               T = {}  N = {}", num(spec.grid.horizon()), spec.grid.steps());
    let _ = writeln!(text, "assumption margins");
    for c in report.checks() {
        let _ = writeln!(text, "  {:<42} {}", c.name, num(c.margin));
    }
    let _ = writeln!(text, "P_0                {}", num(ric.p0()));
    let _ = writeln!(text, "Y_0                {}", num(sol.y0));
    let _ = writeln!(text, "value (formula)    {}", num(value));
    let _ = writeln!(text, "value (moments)    {}", num(moments));
    let _ = writeln!(text, "value (P_0 x^2/2)  {}", num(0.5 * ric.p0() * spec.x0 * spec.x0));
    let _ = writeln!(text, "mu mass            {}", num(sol.mu.total_mass()));
    let _ = writeln!(text, "mu first cell      {}", num(sol.initial_cell_mass()));
    let _ = writeln!(text, "final weight n     {}", num(sol.n_final));
    let _ = writeln!(text, "feasibility defect {}", num(comp.feasibility_defect));
    let _ = writeln!(text, "complementarity    {}", num(comp.residual));
    let _ = writeln!(text, "tolerances met     {}", trace.tolerances_met);
    let _ = writeln!(text, "trace");
    let _ = writeln!(text, "  {:>24} {:>24} {:>24} {:>6}", "n", "V_n", "penalty_mass", "iter");
    for s in &trace.stages {
        let _ = writeln!(
            text,
            "  {:>24} {:>24} {:>24} {:>6}",
            num(s.weight),
            num(s.value),
            num(s.penalty_mass),
            s.iterations
        );
    }
    write_text(&args.out, "report.txt", &text)?;
    println!("value {} mu_mass {}", num(value), num(sol.mu.total_mass()));
    convergence(&trace)
}

pub fn simulate(args: &RunArgs) -> Result<()> {
    let Loaded { spec, .. } = load(args)?;
    let Solved { ric, sol, trace } = solve_problem(args, &spec, true)?;
    let paths = paths(args, DEFAULT_PATHS)?;
    let mc = meanref_core::simulate(
        &spec,
        &FeedbackPolicy::optimal(&ric, &sol),
        &MCConfig::new(spec.grid, paths, args.seed),
    )?;
    let mut table = Table::new(["t", "mean", "se", "m", "L"]);
    for (i, t) in spec.grid.nodes().enumerate() {
        table.row([
            num(t),
            num(*mc.mean_path.at(i)),
            num(*mc.mean_path_se.at(i)),
            num(*sol.mean.at(i)),
            num(*spec.floor.at(i)),
        ]);
    }
    table.write(&args.out, "meanpath.csv")?;

    let value = optimal_value(&sol, &spec);
    let moments = cost_via_moments(&spec, &ric, &sol)?;
    let mut summary = Table::new([
        "paths",
        "seed",
        "cost_mean",
        "cost_se",
        "value_formula",
        "value_moments",
        "z_score",
        "terminal_second_moment",
    ]);
    summary.row([
        paths.to_string(),
        args.seed.to_string(),
        num(mc.cost_mean),
        num(mc.cost_se),
        num(value),
        num(moments),
        num((mc.cost_mean - value) / mc.cost_se),
        num(mc.terminal_second_moment),
    ]);
    summary.write(&args.out, "summary.csv")?;
    println!("cost {} se {} value {}", num(mc.cost_mean), num(mc.cost_se), num(value));
    convergence(&trace)
}

fn random_policy(grid: TimeGrid, l: usize, rng: &mut ChaCha8Rng) -> Result<FeedbackPolicy> {
    let k0: Vec<f64> = (0..l).map(|_| rng.gen_range(-1.0..2.0)).collect();
    let k1: Vec<f64> = (0..l).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let o0: Vec<f64> = (0..l).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let o1: Vec<f64> = (0..l).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let horizon = grid.horizon();
    FeedbackPolicy::new(
        GridFunction::from_fn(grid, |t| {
            DVector::from_iterator(l, (0..l).map(|j| k0[j] + k1[j] * t / horizon))
        }),
        GridFunction::from_fn(grid, |t| {
            DVector::from_iterator(l, (0..l).map(|j| o0[j] + o1[j] * (3.0 * t / horizon).sin()))
        }),
    )
}

/// Returns the number of failed checks.
pub fn verify(args: &RunArgs) -> Result<usize> {
    let Loaded { spec, .. } = load(args)?;
    let Solved { ric, sol, trace } = solve_problem(args, &spec, false)?;
    let paths = paths(args, DEFAULT_VERIFY_PATHS)?;
    let cfg = MCConfig::new(spec.grid, paths, args.seed);
    let optimal = FeedbackPolicy::optimal(&ric, &sol);
    let mut table = Table::new(["check", "value", "reference", "tolerance", "pass"]);
    let mut failed = 0;
    let mut add = |name: &str, value: f64, reference: f64, tolerance: f64, pass: bool| {
        if !pass {
            failed += 1;
        }
        table.row([name.to_string(), num(value), num(reference), num(tolerance), pass.to_string()]);
    };

    let value = optimal_value(&sol, &spec);
    let moments = cost_via_moments(&spec, &ric, &sol)?;
    let rel = (value - moments).abs() / value.abs().max(f64::MIN_POSITIVE);
    add("value_moments", moments, value, 1e-6, rel <= 1e-6 || value == moments);

    let grid = spec.grid;
    let mut weights = vec![0.0; grid.len()];
    weights[0] += sol.mu.initial_atom();
    for i in 0..grid.steps() {
        weights[i] += 0.5 * sol.mu.cell_mass(i);
        weights[i + 1] += 0.5 * sol.mu.cell_mass(i);
    }
    let mc = simulate_functional(&spec, &optimal, &cfg, &weights)?;
    add(
        "value_monte_carlo",
        mc.cost_mean,
        value,
        3.0 * mc.cost_se,
        (mc.cost_mean - value).abs() <= 3.0 * mc.cost_se,
    );

    let comp = complementarity_residual(&sol.mean, &spec.floor, &sol.mu)?;
    let comp_tol = 1e-4 * (1.0 + value.abs());
    add("complementarity", comp.residual, 0.0, comp_tol, comp.residual.abs() <= comp_tol);
    let feas_tol = 1e-4 * (1.0 + spec.floor.sup_norm());
    add(
        "feasibility_defect",
        comp.feasibility_defect,
        0.0,
        feas_tol,
        comp.feasibility_defect <= feas_tol,
    );

    let (estimate, se) = mc.functional.expect("weights were supplied");
    let duality = estimate - sol.mu.integrate(&spec.floor)?;
    add("duality_gap_monte_carlo", duality, 0.0, 3.0 * se, duality.abs() <= 3.0 * se);

    let mut rng = ChaCha8Rng::seed_from_u64(args.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut worst: f64 = 0.0;
    for _ in 0..args.pairs {
        let u = random_policy(grid, spec.control_dim, &mut rng)?;
        let v = random_policy(grid, spec.control_dim, &mut rng)?;
        let rep = parallelogram_check(&spec, &u, &v, &cfg)?;
        worst = worst.max(rep.gap.abs() / (1.0 + rep.cost_u.abs()));
    }
    add("parallelogram_scaled_gap", worst, 0.0, 1e-10, worst <= 1e-10);

    let fuzz = verification_fuzz(
        &spec,
        &optimal,
        &cfg,
        &FuzzOptions {
            trials: args.trials,
            seed: args.seed,
            ..FuzzOptions::default()
        },
    )?;
    add(
        "fuzz_admissible",
        fuzz.admissible as f64,
        args.trials as f64,
        0.0,
        fuzz.admissible == args.trials,
    );
    add("fuzz_violations", fuzz.violations as f64, 0.0, 0.0, fuzz.violations == 0);
    add("fuzz_min_gap_in_se", fuzz.min_gap_in_se, -3.0, 0.0, fuzz.violations == 0);

    table.write(&args.out, "verify.csv")?;
    println!("verify: {failed} failed checks");
    convergence(&trace)?;
    Ok(failed)
}

pub fn sweep(args: &RunArgs) -> Result<()> {
    let Loaded { spec, .. } = load(args)?;
    let Solved { trace, .. } = solve_problem(args, &spec, false)?;
    trace_table(&trace).write(&args.out, "trace.csv")?;
    let last = trace.last().expect("schedule is nonempty");
    println!("stages {} final V_n {}", trace.stages.len(), num(last.value));
    convergence(&trace)
}

pub fn oracle_compare(args: &RunArgs) -> Result<()> {
    let Loaded { spec, .. } = load(args)?;
    let tol = tolerances(args, false)?;
    let schedule = schedule(args, 1e3, 4.0, 1)?;
    let tree_grid = TimeGrid::new(spec.grid.horizon(), args.tree_steps).map_err(|e| Error::Field {
        field: "--tree-steps".into(),
        message: e.to_string(),
    })?;
    let tree_spec = spec.resample(tree_grid)?;
    let ric = solve_riccati(&spec)?;

    let mut table = Table::new([
        "n",
        "V_n_solver",
        "V_n_oracle",
        "gap",
        "tolerance",
        "within",
        "oracle_iterations",
        "oracle_converged",
    ]);
    let mut p_init = GridFunction::constant(spec.grid, 0.0);
    let mut failure = None;
    for &n in schedule.weights() {
        let stage = solve_penalized(&spec, &ric, n, &p_init, tol.damping, &tol)?;
        let vn = penalized_value(&stage, &ric, spec.x0);
        let tp = TreeProblem::new(tree_spec.clone(), n)?;
        let tree = tree_minimize(&tp, &vec![0.0; tp.control_len()], &TreeOptions::default())?;
        let gap = (vn - tree.objective).abs();
        let bound = 0.05 * vn.abs() + 1e-3;
        table.row([
            num(n),
            num(vn),
            num(tree.objective),
            num(gap),
            num(bound),
            (gap <= bound).to_string(),
            tree.iterations.to_string(),
            tree.converged.to_string(),
        ]);
        if !stage.converged && failure.is_none() {
            failure = Some(Error::NonConvergence {
                what: "penalized fixed point",
                iterations: stage.iterations,
                residual: stage.residual,
            });
        }
        if !tree.converged && failure.is_none() {
            failure = Some(Error::NonConvergence {
                what: "tree gradient descent",
                iterations: tree.iterations,
                residual: tree.gradient_norm,
            });
        }
        p_init = stage.offset_field.clone();
    }
    table.write(&args.out, "compare.csv")?;
    println!("compared {} weights", schedule.weights().len());
    failure.map_or(Ok(()), Err)
}
