//! Primal log-barrier Newton method for `min f(x)` over `{x : A x ≤ b}`.
//!
//! Each stage minimizes `φ_μ(x) = f(x) − μ Σ_r log(b_r − a_r·x)` by damped
//! Newton steps, then shrinks `μ`. Duals come from the Newton system:
//! `λ_r = μ/s_r + μ (a_r·dx)/s_r²`.

use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::objective::{LinearObjective, Objective};
use crate::constraints::{ConstraintSystem, RowTag};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSettings {
    pub barrier_initial: f64,
    pub barrier_shrink: f64,
    pub kkt_tol: f64,
    /// Relative target for `rows · μ`.
    pub gap_tol: f64,
    pub max_newton_iters: usize,
    pub max_stages: usize,
    pub armijo: f64,
    pub backtrack: f64,
    pub min_step: f64,
    pub fraction_to_boundary: f64,
    /// First diagonal shift tried when the Newton matrix is not positive definite.
    pub regularization: f64,
    pub verbose: bool,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            barrier_initial: 1.0,
            barrier_shrink: 0.2,
            kkt_tol: 1e-8,
            gap_tol: 1e-9,
            max_newton_iters: 50,
            max_stages: 80,
            armijo: 1e-4,
            backtrack: 0.5,
            min_step: 1e-14,
            fraction_to_boundary: 0.99,
            regularization: 1e-12,
            verbose: false,
        }
    }
}

impl SolverSettings {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("barrier_initial", self.barrier_initial),
            ("kkt_tol", self.kkt_tol),
            ("gap_tol", self.gap_tol),
            ("armijo", self.armijo),
            ("min_step", self.min_step),
            ("regularization", self.regularization),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidInput(format!("{name} must be positive, got {v}")));
            }
        }
        let unit = [
            ("barrier_shrink", self.barrier_shrink),
            ("backtrack", self.backtrack),
            ("fraction_to_boundary", self.fraction_to_boundary),
        ];
        for (name, v) in unit {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::InvalidInput(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        if self.max_newton_iters == 0 || self.max_stages == 0 {
            return Err(Error::InvalidInput("iteration limits must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TraceRecord {
    pub stage: usize,
    pub iter: usize,
    pub objective: f64,
    pub barrier_value: f64,
    pub residual: f64,
    pub step: f64,
    pub mu: f64,
    /// Smallest slack `b_r − a_r·x` at the accepted point.
    pub min_slack: f64,
}

impl TraceRecord {
    pub fn line(&self) -> String {
        format!(
            "stage={} iter={} objective={:.12e} residual={:.3e} step={:.3e} mu={:.3e} min_slack={:.3e}",
            self.stage, self.iter, self.objective, self.residual, self.step, self.mu, self.min_slack
        )
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SolveReport {
    #[serde(skip)]
    pub x_opt: Vec<f64>,
    #[serde(skip)]
    pub multipliers: Vec<f64>,
    pub objective: f64,
    pub kkt_residual: f64,
    pub barrier_stages: usize,
    pub newton_iterations: usize,
    pub wall_time: f64,
    pub duality_gap_estimate: f64,
    pub final_mu: f64,
    #[serde(skip)]
    pub trace: Vec<TraceRecord>,
}

/// Stop rule checked after every stage, given the iterate and `rows · μ`.
pub type StageStop<'a> = &'a dyn Fn(&[f64], f64) -> bool;

pub fn solve(
    objective: &dyn Objective,
    system: &ConstraintSystem,
    start: &[f64],
    settings: &SolverSettings,
) -> Result<SolveReport> {
    solve_until(objective, system, start, settings, None)
}

struct Workspace<'a> {
    objective: &'a dyn Objective,
    system: &'a ConstraintSystem,
    mu: f64,
}

impl Workspace<'_> {
    /// `φ_μ(x)`, or `None` outside the strict interior or the objective's domain.
    fn barrier_value(&self, x: &[f64]) -> Option<(f64, f64)> {
        let mut log_sum = 0.0;
        for r in 0..self.system.len() {
            let s = self.system.rhs[r] - self.system.rows.row_dot(r, x);
            if !(s > 0.0) {
                return None;
            }
            log_sum += s.ln();
        }
        let f = self.objective.value(x).ok()?;
        f.is_finite().then_some((f - self.mu * log_sum, f))
    }

    fn gradient(&self, x: &[f64], slacks: &[f64]) -> Result<Vec<f64>> {
        let mut g = vec![0.0; x.len()];
        self.objective.gradient(x, &mut g)?;
        for (r, &s) in slacks.iter().enumerate() {
            let w = self.mu / s;
            let (idx, val) = self.system.rows.row(r);
            for (&c, &a) in idx.iter().zip(val) {
                g[c] += w * a;
            }
        }
        Ok(g)
    }

    /// Residual of the KKT conditions at `x` for the Newton-corrected duals
    /// `λ_r = μ/s_r + μ (a_r·dx)/s_r²`, together with those duals.
    fn kkt(&self, x: &[f64], slacks: &[f64], rates: &[f64]) -> Result<(f64, Vec<f64>)> {
        let mut r = vec![0.0; x.len()];
        self.objective.gradient(x, &mut r)?;
        let mut comp = 0.0f64;
        let mut dual_inf = 0.0f64;
        let lambda: Vec<f64> = slacks
            .iter()
            .zip(rates)
            .map(|(&s, &rate)| self.mu / s * (1.0 + rate / s))
            .collect();
        for (row, (&l, &s)) in lambda.iter().zip(slacks).enumerate() {
            comp = comp.max((l * s).abs());
            dual_inf = dual_inf.max(-l);
            let (idx, val) = self.system.rows.row(row);
            for (&c, &a) in idx.iter().zip(val) {
                r[c] += l * a;
            }
        }
        Ok((inf_norm(&r).max(comp).max(dual_inf), lambda))
    }

    /// Newton direction with the slope blocks eliminated first. Returns `None`
    /// when the objective is not slope-separable or a factorization fails.
    fn reduced_direction(&self, x: &[f64], slacks: &[f64], g: &[f64]) -> Result<Option<DVector<f64>>> {
        let layout = self.system.layout;
        let (m, n) = (layout.node_count, layout.dim);
        if layout.extras != 0 || n == 0 || self.system.cols() != layout.len() {
            return Ok(None);
        }
        let Some(blocks) = self.objective.slope_blocks(x) else {
            return Ok(None);
        };
        let mut blocks = blocks?;
        let mut svv = DMatrix::<f64>::zeros(m, m);
        let mut mvd = DMatrix::<f64>::zeros(m, m * n);
        for (r, &s) in slacks.iter().enumerate() {
            let w = self.mu / (s * s);
            let (idx, val) = self.system.rows.row(r);
            for (&ca, &va) in idx.iter().zip(val) {
                for (&cb, &vb) in idx.iter().zip(val) {
                    let h = w * va * vb;
                    match (ca < m, cb < m) {
                        (true, true) => svv[(ca, cb)] += h,
                        (true, false) => mvd[(ca, cb - m)] += h,
                        (false, false) => {
                            let (na, nb) = ((ca - m) / n, (cb - m) / n);
                            if na != nb {
                                return Ok(None);
                            }
                            blocks[na * n * n + (ca - m) % n * n + (cb - m) % n] += h;
                        }
                        (false, true) => {}
                    }
                }
            }
        }

        let gv = DVector::from_column_slice(&g[..m]);
        let mut rhs = -gv;
        let mut factors = Vec::with_capacity(m);
        for i in 0..m {
            let b = DMatrix::from_row_slice(n, n, &blocks[i * n * n..(i + 1) * n * n]);
            let Some(ch) = Cholesky::new(b) else {
                return Ok(None);
            };
            let c = mvd.columns(i * n, n).into_owned();
            let w = ch.solve(&c.transpose()).transpose();
            svv.gemm(-1.0, &w, &c.transpose(), 1.0);
            let gi = DVector::from_column_slice(&g[m + i * n..m + (i + 1) * n]);
            rhs.gemv(1.0, &w, &gi, 1.0);
            factors.push(ch);
        }
        let Some(ch) = Cholesky::new(svv) else {
            return Ok(None);
        };
        let dv = ch.solve(&rhs);
        let mut dx = DVector::zeros(layout.len());
        dx.rows_mut(0, m).copy_from(&dv);
        for (i, f) in factors.iter().enumerate() {
            let c = mvd.columns(i * n, n);
            let gi = DVector::from_column_slice(&g[m + i * n..m + (i + 1) * n]);
            let di = f.solve(&(-gi - c.transpose() * &dv));
            dx.rows_mut(m + i * n, n).copy_from(&di);
        }
        Ok(Some(dx))
    }

    fn newton_matrix(&self, x: &[f64], slacks: &[f64]) -> Result<DMatrix<f64>> {
        let n = x.len();
        let mut h = DMatrix::zeros(n, n);
        self.objective.add_hessian(x, &mut h)?;
        for (r, &s) in slacks.iter().enumerate() {
            let w = self.mu / (s * s);
            let (idx, val) = self.system.rows.row(r);
            for (&ca, &va) in idx.iter().zip(val) {
                for (&cb, &vb) in idx.iter().zip(val) {
                    h[(ca, cb)] += w * va * vb;
                }
            }
        }
        Ok(h)
    }
}

/// Solves `M d = −g`, shifting the diagonal by growing multiples until the
/// factorization succeeds.
fn newton_direction(m: DMatrix<f64>, g: &[f64], shift0: f64) -> Option<DVector<f64>> {
    let rhs = -DVector::from_column_slice(g);
    let scale = m.diagonal().amax().max(1.0);
    if let Some(ch) = Cholesky::new(m.clone()) {
        return Some(ch.solve(&rhs));
    }
    let mut shift = shift0 * scale;
    while shift <= 1e8 * scale {
        let mut shifted = m.clone();
        for i in 0..shifted.nrows() {
            shifted[(i, i)] += shift;
        }
        if let Some(ch) = Cholesky::new(shifted) {
            return Some(ch.solve(&rhs));
        }
        shift *= 10.0;
    }
    None
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

pub fn solve_until(
    objective: &dyn Objective,
    system: &ConstraintSystem,
    start: &[f64],
    settings: &SolverSettings,
    stop: Option<StageStop>,
) -> Result<SolveReport> {
    settings.validate()?;
    let clock = Instant::now();
    let dim = system.cols();
    if objective.dim() != dim || start.len() != dim {
        return Err(Error::InvalidInput(format!(
            "objective has {} variables, system {}, start {}",
            objective.dim(),
            dim,
            start.len()
        )));
    }
    let slacks = system.slacks(start);
    if let Some((row, &slack)) = slacks.iter().enumerate().find(|(_, s)| !(**s > 0.0)) {
        return Err(Error::InfeasibleStart { row, slack });
    }

    let rows = system.len() as f64;
    let mut ws = Workspace {
        objective,
        system,
        mu: settings.barrier_initial,
    };
    let mut x = start.to_vec();
    let mut trace = Vec::new();
    let mut newton_iterations = 0;
    let mut f_x = objective.value(&x)?;
    let mut kkt = (f64::INFINITY, vec![0.0; system.len()]);
    let mut final_attempts = 0;

    let report = |x: &[f64], f: f64, kkt: &(f64, Vec<f64>), mu: f64, stages, iters, trace: &Vec<TraceRecord>| {
        SolveReport {
            x_opt: x.to_vec(),
            multipliers: kkt.1.iter().map(|l| l.max(0.0)).collect(),
            objective: f,
            kkt_residual: kkt.0,
            barrier_stages: stages,
            newton_iterations: iters,
            wall_time: clock.elapsed().as_secs_f64(),
            duality_gap_estimate: rows * mu,
            final_mu: mu,
            trace: trace.clone(),
        }
    };

    for stage in 1..=settings.max_stages {
        let final_stage = rows * ws.mu <= settings.gap_tol * (1.0 + f_x.abs());
        let mut converged = false;
        for iter in 1..=settings.max_newton_iters {
            let slacks = system.slacks(&x);
            let g = ws.gradient(&x, &slacks)?;
            let (phi, _) = ws
                .barrier_value(&x)
                .ok_or_else(|| Error::Evaluation("barrier undefined at iterate".into()))?;
            let direction = match ws.reduced_direction(&x, &slacks, &g)? {
                Some(dx) => Some(dx),
                None => newton_direction(ws.newton_matrix(&x, &slacks)?, &g, settings.regularization),
            };
            let Some(dx) = direction else {
                return Err(Error::LineSearch {
                    report: Box::new(report(&x, f_x, &kkt, ws.mu, stage, newton_iterations, &trace)),
                });
            };
            let rates: Vec<f64> = (0..system.len())
                .map(|r| system.rows.row_dot(r, dx.as_slice()))
                .collect();
            kkt = ws.kkt(&x, &slacks, &rates)?;
            if final_stage && kkt.0 <= settings.kkt_tol {
                converged = true;
                break;
            }
            let slope: f64 = g.iter().zip(dx.iter()).map(|(a, b)| a * b).sum();
            let decrement = -slope;
            if !final_stage && (decrement * 0.5 <= 1e-10 || inf_norm(&g) <= settings.kkt_tol) {
                break;
            }

            let alpha_max = slacks
                .iter()
                .zip(&rates)
                .filter(|(_, r)| **r > 0.0)
                .map(|(s, r)| s / r)
                .fold(f64::INFINITY, f64::min);
            let mut alpha = (settings.fraction_to_boundary * alpha_max).min(1.0);
            let roundoff = 8.0 * f64::EPSILON * (phi.abs() + 1.0);
            let mut accepted = None;
            while alpha >= settings.min_step {
                let trial: Vec<f64> = x.iter().zip(dx.iter()).map(|(a, d)| a + alpha * d).collect();
                if let Some((phi_new, f_new)) = ws.barrier_value(&trial) {
                    if phi_new <= phi + settings.armijo * alpha * slope.min(0.0) + roundoff {
                        accepted = Some((trial, phi_new, f_new));
                        break;
                    }
                }
                alpha *= settings.backtrack;
            }
            let Some((trial, phi_new, f_new)) = accepted else {
                if final_stage || decrement * 0.5 > 1e-10 {
                    return Err(Error::LineSearch {
                        report: Box::new(report(&x, f_x, &kkt, ws.mu, stage, newton_iterations, &trace)),
                    });
                }
                break;
            };
            x = trial;
            f_x = f_new;
            newton_iterations += 1;
            let record = TraceRecord {
                stage,
                iter,
                objective: f_new,
                barrier_value: phi_new,
                residual: inf_norm(&g),
                step: alpha,
                mu: ws.mu,
                min_slack: system.slacks(&x).into_iter().fold(f64::INFINITY, f64::min),
            };
            if settings.verbose {
                eprintln!("{}", record.line());
            }
            trace.push(record);
        }

        let gap = rows * ws.mu;
        if let Some(stop) = stop {
            if stop(&x, gap) {
                return Ok(report(&x, f_x, &kkt, ws.mu, stage, newton_iterations, &trace));
            }
        }
        if converged {
            return Ok(report(&x, f_x, &kkt, ws.mu, stage, newton_iterations, &trace));
        }
        if final_stage {
            final_attempts += 1;
            if final_attempts >= 3 {
                break;
            }
        }
        ws.mu *= settings.barrier_shrink;
    }
    Err(Error::NotConverged {
        report: Box::new(report(
            &x,
            f_x,
            &kkt,
            ws.mu,
            settings.max_stages,
            newton_iterations,
            &trace,
        )),
    })
}

/// Returns `hint` if it is strictly feasible, otherwise a strictly feasible
/// point found by minimizing the largest row violation `t` over
/// `{a_r·x − t ≤ b_r}`.
pub fn feasible_start(system: &ConstraintSystem, hint: &[f64]) -> Result<Vec<f64>> {
    let slacks = system.slacks(hint);
    let worst = slacks.iter().copied().fold(f64::INFINITY, f64::min);
    if worst > 0.0 {
        return Ok(hint.to_vec());
    }

    let mut aux = system.with_extra_column(|_| -1.0);
    let t_col = system.cols();
    let t0 = 1.0 - worst;
    aux.push_row(&[(t_col, -1.0)], 1.0, RowTag::Auxiliary);
    let v_range = system.layout.v_range();
    let v_cap = hint[v_range.clone()]
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()))
        * 10.0
        + 10.0;
    for c in v_range {
        aux.push_row(&[(c, 1.0)], v_cap, RowTag::Auxiliary);
    }

    let mut start = hint.to_vec();
    start.push(t0);
    let mut c = vec![0.0; t_col + 1];
    c[t_col] = 1.0;
    let objective = LinearObjective { c };
    let stop = |x: &[f64], gap: f64| {
        let t = x[t_col];
        t < 0.0 && gap <= 0.5 * t.abs()
    };
    let settings = SolverSettings::default();
    let outcome = solve_until(&objective, &aux, &start, &settings, Some(&stop));
    let x = match outcome {
        Ok(r) => r.x_opt,
        Err(Error::NotConverged { report }) | Err(Error::LineSearch { report }) => report.x_opt,
        Err(e) => return Err(e),
    };
    let t = x[t_col];
    let point = x[..t_col].to_vec();
    if t < 0.0 && system.slacks(&point).iter().all(|&s| s > 0.0) {
        Ok(point)
    } else {
        Err(Error::Infeasible(format!(
            "smallest achievable row violation is {t:e}"
        )))
    }
}
