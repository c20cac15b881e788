//! End-to-end acceptance run: one PASS/FAIL line per criterion, nonzero exit
//! if any criterion fails.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use convex_screen::constraints::{assemble_nodes, start_for_nodes, SystemOptions};
use convex_screen::lattice::{build_lattice, Domain, Lattice};
use convex_screen::problem::{builtin_problem, CostModel, Density, GradientBox, ProblemSpec, Sense, BUILTIN_NAMES};
use convex_screen::pwa::{evaluate, gradient_ae, reconstruct, PiecewiseAffineFunction};
use convex_screen::risk::{risk_objective, solve_risk, FiniteMarket, RiskObjective, RiskProblem};
use convex_screen::solver::{
    convergence_study, solve_on_lattice, DecisionState, DiscreteObjective, Objective, SolveReport,
    SolverSettings,
};
use rand::rngs::StdRng;
use rand::{RngExt, SeedableRng};
use rayon::prelude::*;

use common::*;

struct Solved {
    name: &'static str,
    lattice: Lattice,
    report: SolveReport,
    state: DecisionState,
    seconds: f64,
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn solve_builtins() -> Vec<Solved> {
    BUILTIN_NAMES
        .par_iter()
        .map(|&name| {
            let b = builtin_problem(name).unwrap();
            let lattice = build_lattice(b.spec.domain, b.recommended_k).unwrap();
            let clock = Instant::now();
            let (report, state) = solve_on_lattice(&b.spec, &lattice, &SolverSettings::default())
                .unwrap_or_else(|e| panic!("{name}: {e}"));
            Solved {
                name,
                lattice,
                report,
                state,
                seconds: clock.elapsed().as_secs_f64(),
            }
        })
        .collect()
}

fn six_type_problem() -> RiskProblem {
    let wealth = [-2.0, -1.7, 1.4, -0.7, -0.5, 0.0].iter().map(|w| 4.0 * w).collect();
    let probabilities = [1.0, 1.5, 2.5, 2.5, 1.5, 1.0].iter().map(|p| p / 10.0).collect();
    let market = FiniteMarket::new(wealth, probabilities, 1.0).unwrap();
    let types = (1..=6).map(|i| i as f64 / 6.0).collect();
    RiskProblem::new(market, types).unwrap()
}

fn criterion_1() -> Outcome {
    let spec = builtin_problem("mussa_rosen_1d").unwrap().spec;
    let lattice = build_lattice(spec.domain, 50).unwrap();
    let clock = Instant::now();
    let (_, state) = solve_on_lattice(&spec, &lattice, &SolverSettings::default()).unwrap();
    let seconds = clock.elapsed().as_secs_f64();
    let mut ev: f64 = 0.0;
    let mut ed: f64 = 0.0;
    for i in 0..lattice.len() {
        let t = lattice.center(i)[0];
        ev = ev.max((state.values[i] - mussa_rosen_value(t)).abs());
        ed = ed.max((state.slopes[i] - mussa_rosen_slope(t)).abs());
    }
    outcome(
        ev <= 2e-2 && ed <= 6e-2 && seconds <= 30.0,
        format!("max|v-v*|={ev:.3e} max|D-Dv*|={ed:.3e} time={seconds:.2}s"),
    )
}

fn criterion_2(solved: &[Solved]) -> Outcome {
    let mins: Vec<String> = solved
        .iter()
        .map(|s| format!("{}:k={} min_v={:.2e}", s.name, s.lattice.k(), s.state.min_value()))
        .collect();
    outcome(solved.iter().all(|s| s.state.min_value() <= 1e-6), mins.join(" "))
}

fn midpoint_failures(f: &PiecewiseAffineFunction, rng: &mut StdRng, trials: usize) -> usize {
    let d = *f.domain();
    let mut failures = 0;
    for _ in 0..trials {
        let a: Vec<f64> = (0..d.n).map(|_| rng.random_range(d.a..d.b)).collect();
        let b: Vec<f64> = (0..d.n).map(|_| rng.random_range(d.a..d.b)).collect();
        let mid: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect();
        if evaluate(f, &mid).0 > 0.5 * (evaluate(f, &a).0 + evaluate(f, &b).0) + 1e-12 {
            failures += 1;
        }
    }
    failures
}

fn criterion_3(solved: &[Solved], risk: Option<&(Vec<f64>, Vec<f64>, Vec<f64>)>) -> Outcome {
    let mut rng = StdRng::seed_from_u64(3);
    let mut pass = true;
    let mut parts = Vec::new();
    for s in solved {
        let worst = worst_convexity_row(s.lattice.centers(), s.lattice.dim(), &s.state.values, &s.state.slopes);
        let failures = match reconstruct(&s.state, &s.lattice) {
            Ok(f) => midpoint_failures(&f, &mut rng, 10_000),
            Err(_) => 10_000,
        };
        pass &= worst <= 1e-7 && failures == 0;
        parts.push(format!("{}: row={worst:.1e} midpoint_failures={failures}", s.name));
    }
    if let Some((types, v, slope)) = risk {
        let worst = worst_convexity_row(types, 1, v, slope);
        let domain = Domain::new(types[0], types[types.len() - 1], 1).unwrap();
        let f = PiecewiseAffineFunction::from_planes(domain, types.clone(), v.clone(), slope.clone()).unwrap();
        let failures = midpoint_failures(&f, &mut rng, 10_000);
        pass &= worst <= 1e-7 && failures == 0;
        parts.push(format!("risk: row={worst:.1e} midpoint_failures={failures}"));
    } else {
        pass = false;
        parts.push("risk: no solution".into());
    }
    outcome(pass, parts.join("; "))
}

fn criterion_4() -> Outcome {
    let mut rng = StdRng::seed_from_u64(4);
    let mut worst_gap: f64 = 0.0;
    let mut worst_kkt: f64 = 0.0;
    let mut worst_oracle_violation: f64 = f64::NEG_INFINITY;
    for _ in 0..20 {
        let inst = random_qp(&mut rng);
        let report = inst.solve_from(&inst.start());
        let oracle = inst.oracle();
        worst_gap = worst_gap.max((report.objective - oracle.value).abs());
        worst_kkt = worst_kkt.max(report.kkt_residual);
        worst_oracle_violation = worst_oracle_violation.max(oracle.max_violation);
    }
    outcome(
        worst_gap <= 1e-6 && worst_kkt <= 1e-8,
        format!(
            "20 instances: max|J-J_oracle|={worst_gap:.2e} max kkt={worst_kkt:.2e} oracle violation={worst_oracle_violation:.1e}"
        ),
    )
}

fn criterion_5() -> Outcome {
    let clock = Instant::now();
    let settings = SolverSettings::default();
    let mr = builtin_problem("mussa_rosen_1d").unwrap().spec;
    let rc = builtin_problem("rochet_chone_uniform").unwrap().spec;
    let (mr_rows, rc_rows) = rayon::join(
        || convergence_study(&mr, &[10, 20, 40, 80], &settings, 8).unwrap(),
        || convergence_study(&rc, &[5, 9, 13, 17], &settings, 8).unwrap(),
    );
    let seconds = clock.elapsed().as_secs_f64();
    let mr_err: Vec<f64> = mr_rows.iter().map(|r| (r.functional - MUSSA_ROSEN_SURPLUS).abs()).collect();
    let rc_gap: Vec<f64> = rc_rows.iter().map(|r| r.discretization_gap).collect();
    let strictly = mr_err.windows(2).all(|w| w[1] < w[0]);
    let decreasing = rc_gap.windows(2).all(|w| w[1] <= w[0]);
    outcome(
        strictly && decreasing && seconds <= 300.0,
        format!("|I-I*|=[{}] |J-I|=[{}] time={seconds:.1}s", list(&mr_err), list(&rc_gap)),
    )
}

fn list(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:.3e}")).collect::<Vec<_>>().join(", ")
}

fn criterion_6(solved: &[Solved]) -> Outcome {
    let s = solved.iter().find(|s| s.name == "rochet_chone_uniform").unwrap();
    let excluded: Vec<usize> = (0..s.lattice.len()).filter(|&i| s.state.values[i] <= 1e-6).collect();
    let corner = s.lattice.locate(&[1.0, 1.0]);
    let adjacent = excluded.contains(&corner);
    let f = reconstruct(&s.state, &s.lattice).unwrap();
    let mut rng = StdRng::seed_from_u64(6);
    let (mut checked, mut outside) = (0, 0);
    let mut extreme = (f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..20_000 {
        let theta = [rng.random_range(1.0..2.0), rng.random_range(1.0..2.0)];
        // skip points where two planes tie (kinks)
        let (best, active) = evaluate(&f, &theta);
        let runner_up = (0..f.len())
            .filter(|&i| i != active)
            .map(|i| f.plane_value(i, &theta))
            .fold(f64::NEG_INFINITY, f64::max);
        if best - runner_up <= 1e-9 {
            continue;
        }
        checked += 1;
        let g = gradient_ae(&f, &theta);
        for &gj in &g {
            extreme = (extreme.0.min(gj), extreme.1.max(gj));
            if !(0.0..=2.0).contains(&gj) {
                outside += 1;
            }
        }
    }
    outcome(
        adjacent && outside == 0 && checked > 0,
        format!(
            "excluded nodes={} corner node excluded={adjacent} gradient range=[{:.3e}, {:.6}] outside [0,2]: {outside} of {checked}",
            excluded.len(),
            extreme.0,
            extreme.1
        ),
    )
}

type RiskState = (Vec<f64>, Vec<f64>, Vec<f64>);

fn criterion_7() -> (Outcome, Option<RiskState>) {
    let problem = six_type_problem();
    match solve_risk(&problem, &SolverSettings::default()) {
        Ok(sol) => {
            let top = &sol.strikes[3..];
            let spread = top.iter().fold(f64::NEG_INFINITY, |m, k| m.max(*k))
                - top.iter().fold(f64::INFINITY, |m, k| m.min(*k));
            let improved = sol.risk_after < sol.risk_before;
            let detail = format!(
                "strikes={:.6?} top-three spread={spread:.3e} risk {:.4} -> {:.4}",
                sol.strikes, sol.risk_before, sol.risk_after
            );
            let state = (sol.types.clone(), sol.v.clone(), sol.slope.clone());
            (outcome(spread <= 1e-3 && improved, detail), Some(state))
        }
        Err(e) => (outcome(false, format!("solve failed: {e}")), None),
    }
}

fn custom_free_spec(cost: CostModel, q: GradientBox, a: f64, b: f64, n: usize, sense: Sense) -> ProblemSpec {
    ProblemSpec {
        name: "gradient-check".into(),
        domain: Domain::new(a, b, n).unwrap(),
        gradient_set: q,
        cost,
        density: Density::Uniform,
        sense,
        dirichlet: None,
        upper_bound_v: None,
    }
}

/// Worst relative gap between the analytic and central-difference gradient
/// over 50 random strictly feasible points.
fn discrete_gradient_check(spec: &ProblemSpec, k: usize, rng: &mut StdRng) -> f64 {
    let lattice = build_lattice(spec.domain, k).unwrap();
    let objective = DiscreteObjective::new(&lattice, spec).unwrap();
    let q = spec.effective_gradient_box();
    let d = spec.domain;
    let system = assemble_nodes(lattice.centers(), d.n, &SystemOptions::new(q.clone())).unwrap();
    let base = start_for_nodes(lattice.centers(), d.n, &q, d.a, d.b, None).unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        // shrink toward the interior start, then add a small jitter that keeps strict feasibility
        let r = rng.random_range(0.3..1.0);
        let mut x: Vec<f64> = base.iter().map(|v| v * r).collect();
        loop {
            let trial: Vec<f64> = x.iter().map(|v| v + rng.random_range(-1e-5..1e-5)).collect();
            if system.slacks(&trial).iter().all(|s| *s > 0.0) {
                x = trial;
                break;
            }
        }
        let mut g = vec![0.0; x.len()];
        objective.gradient(&x, &mut g).unwrap();
        let fd = central_difference(&|y| objective.value(y).unwrap(), &x, 1e-6);
        worst = worst.max(relative_error(&g, &fd));
    }
    worst
}

#[derive(Debug)]
struct Quartic;

impl convex_screen::problem::Cost for Quartic {
    fn value(&self, p: &[f64]) -> convex_screen::Result<f64> {
        Ok(p.iter().map(|x| 0.25 * x.powi(4) + 0.5 * x * x).sum())
    }
    fn gradient(&self, p: &[f64], out: &mut [f64]) -> convex_screen::Result<()> {
        for (o, x) in out.iter_mut().zip(p) {
            *o = x.powi(3) + x;
        }
        Ok(())
    }
    fn hessian(&self, p: &[f64], out: &mut [f64]) -> convex_screen::Result<()> {
        let n = p.len();
        out.iter_mut().for_each(|h| *h = 0.0);
        for i in 0..n {
            out[i * n + i] = 3.0 * p[i] * p[i] + 1.0;
        }
        Ok(())
    }
}

fn criterion_8() -> Outcome {
    let mut rng = StdRng::seed_from_u64(8);
    let box2 = GradientBox::uniform(2, 0.0, 3.0).unwrap();
    let quad = custom_free_spec(CostModel::QuadraticHalfNorm { scale: 1.5 }, box2.clone(), 1.0, 2.0, 2, Sense::MinimizeI);
    let sqrt = custom_free_spec(
        CostModel::SqrtNegativeSlope { xi: 1.0 },
        GradientBox::uniform(1, -4.0, 0.0).unwrap(),
        0.0,
        1.0,
        1,
        Sense::MaximizeSurplus,
    );
    let custom = custom_free_spec(
        CostModel::Custom(std::sync::Arc::new(Quartic)),
        box2,
        1.0,
        2.0,
        2,
        Sense::MinimizeI,
    );
    let mut gaussian = quad.clone();
    gaussian.density = builtin_problem("rochet_chone_gaussian").unwrap().spec.density;

    let errors = [
        ("quadratic", discrete_gradient_check(&quad, 4, &mut rng)),
        ("quadratic-gaussian", discrete_gradient_check(&gaussian, 4, &mut rng)),
        ("sqrt", discrete_gradient_check(&sqrt, 8, &mut rng)),
        ("custom", discrete_gradient_check(&custom, 3, &mut rng)),
        ("risk", risk_gradient_check(&mut rng)),
    ];
    let pass = errors.iter().all(|(_, e)| *e <= 1e-5);
    let detail: Vec<String> = errors.iter().map(|(n, e)| format!("{n}={e:.2e}")).collect();
    outcome(pass, detail.join(" "))
}

fn risk_gradient_check(rng: &mut StdRng) -> f64 {
    let problem = six_type_problem();
    let objective = RiskObjective::new(&problem);
    let atoms: Vec<f64> = problem.market.wealth.iter().map(|w| w.abs()).collect();
    let n = problem.types.len();
    let cap = problem.slope_cap();
    let mut worst: f64 = 0.0;
    let mut accepted = 0;
    while accepted < 50 {
        // convex, decreasing profile α(1−θ)² + β(1−θ) + γ sampled at the types
        let (alpha, beta, gamma) = (rng.random_range(0.1..2.0), rng.random_range(0.05..2.0), rng.random_range(0.01..1.0));
        let v: Vec<f64> = problem.types.iter().map(|t| alpha * (1.0 - t).powi(2) + beta * (1.0 - t) + gamma).collect();
        let slope: Vec<f64> = problem.types.iter().map(|t| -2.0 * alpha * (1.0 - t) - beta).collect();
        if slope.iter().any(|s| -s >= cap) {
            continue;
        }
        // the strike map has kinks where a strike crosses an atom of |W|
        let near_kink = slope.iter().any(|&s| {
            let k = problem.strike(s).unwrap();
            atoms.iter().any(|a| (k - a).abs() < 1e-4)
        });
        if near_kink {
            continue;
        }
        accepted += 1;
        let mut x = v.clone();
        x.extend(&slope);
        let mut g = vec![0.0; 2 * n];
        objective.gradient(&x, &mut g).unwrap();
        let fd = central_difference(&|y| risk_objective(&problem, &y[..n], &y[n..]).unwrap(), &x, 1e-6);
        worst = worst.max(relative_error(&g, &fd));
    }
    worst
}

fn main() -> ExitCode {
    let clock = Instant::now();
    let solved = solve_builtins();
    for s in &solved {
        eprintln!(
            "solved {} k={} objective={:.10} kkt={:.1e} iterations={} in {:.1}s",
            s.name,
            s.lattice.k(),
            s.report.objective,
            s.report.kkt_residual,
            s.report.newton_iterations,
            s.seconds
        );
    }
    let (c7, risk_state) = criterion_7();
    let results = [
        criterion_1(),
        criterion_2(&solved),
        criterion_3(&solved, risk_state.as_ref()),
        criterion_4(),
        criterion_5(),
        criterion_6(&solved),
        c7,
        criterion_8(),
    ];
    let mut failed = 0;
    for (i, r) in results.iter().enumerate() {
        println!("{} criterion {}: {}", if r.pass { "PASS" } else { "FAIL" }, i + 1, r.detail);
        failed += usize::from(!r.pass);
    }
    println!("acceptance: {} passed, {failed} failed in {:.1}s", results.len() - failed, clock.elapsed().as_secs_f64());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
