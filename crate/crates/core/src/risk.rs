//! Risk transfer to a population of agents on a finite state space.
//!
//! A type-`θ` agent takes the call payoff `(|W| − K(θ))^+` and is described by
//! a convex, nonincreasing indirect utility `v` with `v′(θ) = −Var[payoff]`.
//! Strikes are eliminated through `K = F(−v′)`, where `F` inverts the
//! variance map, leaving a program in `(v, v′)` with linear constraints.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::constraints::{assemble_nodes, start_for_nodes, DecisionLayout, SystemOptions};
use crate::error::{Error, Result};
use crate::problem::GradientBox;
use crate::solver::{feasible_start, solve, Objective, SolveReport, SolverSettings};

/// Absolute accuracy of the variance inversion.
pub const STRIKE_TOL: f64 = 1e-10;

pub const DEFAULT_V_CAP: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FiniteMarket {
    pub wealth: Vec<f64>,
    pub probabilities: Vec<f64>,
    #[serde(default = "default_beta")]
    pub beta: f64,
}

fn default_beta() -> f64 {
    1.0
}

impl FiniteMarket {
    pub fn new(wealth: Vec<f64>, probabilities: Vec<f64>, beta: f64) -> Result<Self> {
        let market = FiniteMarket {
            wealth,
            probabilities,
            beta,
        };
        market.validate()?;
        Ok(market)
    }

    pub fn validate(&self) -> Result<()> {
        if self.wealth.len() < 2 || self.wealth.len() != self.probabilities.len() {
            return Err(Error::InvalidInput(
                "market needs at least two states with one probability each".into(),
            ));
        }
        if self.wealth.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidInput("wealth must be finite".into()));
        }
        if self.probabilities.iter().any(|p| !(*p >= 0.0)) {
            return Err(Error::InvalidInput("probabilities must be nonnegative".into()));
        }
        let total: f64 = self.probabilities.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidInput(format!(
                "probabilities sum to {total}, not 1"
            )));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidInput("beta must be positive".into()));
        }
        Ok(())
    }

    pub fn states(&self) -> usize {
        self.wealth.len()
    }

    /// `‖W‖_∞`, the largest meaningful strike.
    pub fn max_loss(&self) -> f64 {
        self.wealth.iter().fold(0.0f64, |m, w| m.max(w.abs()))
    }

    /// Variance of the payoff at strike zero.
    pub fn max_variance(&self) -> f64 {
        payoff_moments(self, 0.0).1
    }
}

/// Mean and variance of `(|W| − K)^+`, plus the probability that it is positive.
fn payoff_moments(market: &FiniteMarket, strike: f64) -> (f64, f64, f64) {
    let mut mean = 0.0;
    let mut second = 0.0;
    let mut active = 0.0;
    for (w, p) in market.wealth.iter().zip(&market.probabilities) {
        let x = (w.abs() - strike).max(0.0);
        if x > 0.0 {
            active += p;
        }
        mean += p * x;
        second += p * x * x;
    }
    (mean, (second - mean * mean).max(0.0), active)
}

pub fn call_payoff_stats(market: &FiniteMarket, strike: f64) -> Result<(f64, f64)> {
    let top = market.max_loss();
    if !(strike >= 0.0 && strike <= top) {
        return Err(Error::Domain(format!(
            "strike {strike} outside [0, {top}]"
        )));
    }
    let (mean, var, _) = payoff_moments(market, strike);
    Ok((mean, var))
}

/// Smallest strike whose payoff variance equals `target`.
pub fn invert_variance(market: &FiniteMarket, target: f64) -> Result<f64> {
    let (mean0, vmax, _) = payoff_moments(market, 0.0);
    // variances are E[X²] − E[X]², so their rounding scales with E[X²]
    let noise = 8.0 * f64::EPSILON * (vmax + mean0 * mean0);
    if !(target >= 0.0) || target > vmax * (1.0 + 1e-12) + noise {
        return Err(Error::Domain(format!(
            "target variance {target} outside [0, {vmax}]"
        )));
    }
    // plateaus are flat only up to that rounding
    let reached = |k: f64| {
        let (mean, var, _) = payoff_moments(market, k);
        var <= target + 8.0 * f64::EPSILON * (var + mean * mean)
    };
    if reached(0.0) {
        return Ok(0.0);
    }
    // variance is nonincreasing: keep lo unreached and hi reached
    let (mut lo, mut hi) = (0.0, market.max_loss());
    while hi - lo > STRIKE_TOL {
        let mid = 0.5 * (lo + hi);
        if reached(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(polish_strike(market, target, lo, hi).unwrap_or(hi))
}

/// Exact root of the variance quadratic on the atom-free interval around the
/// bracket, when there is one.
fn polish_strike(market: &FiniteMarket, target: f64, lo: f64, hi: f64) -> Option<f64> {
    let (mut a, mut b, mut p) = (0.0, 0.0, 0.0);
    for (w, q) in market.wealth.iter().zip(&market.probabilities) {
        let x = w.abs();
        if x > hi {
            a += q * x;
            b += q * x * x;
            p += q;
        }
    }
    let one_minus = 1.0 - p;
    if !(p > 0.0 && one_minus > 1e-14) {
        return None;
    }
    // variance = (b − a²) − 2a(1−p)K + p(1−p)K²
    let qa = p * one_minus;
    let qb = a * one_minus;
    let qc = b - a * a - target;
    let disc = qb * qb - qa * qc;
    if disc < 0.0 {
        return None;
    }
    let root = qc / (qb + disc.sqrt());
    (root >= lo - STRIKE_TOL && root <= hi + STRIKE_TOL).then_some(root.clamp(lo, hi))
}

/// `log Σ_j p_j exp(−β X_j)`.
pub fn entropic_risk(market: &FiniteMarket, position: &[f64]) -> Result<f64> {
    if position.len() != market.states() {
        return Err(Error::InvalidInput("position length differs from state count".into()));
    }
    if position.iter().any(|x| !x.is_finite()) {
        return Err(Error::Evaluation("position is not finite".into()));
    }
    let exponents: Vec<f64> = position.iter().map(|x| -market.beta * x).collect();
    let shift = exponents
        .iter()
        .zip(&market.probabilities)
        .filter(|(_, p)| **p > 0.0)
        .map(|(e, _)| *e)
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = exponents
        .iter()
        .zip(&market.probabilities)
        .map(|(e, p)| p * (e - shift).exp())
        .sum();
    Ok(shift + sum.ln())
}

/// Sign with which the centered agent payoffs enter the principal's position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferOrientation {
    /// Position `W + avg_i (X_i − E X_i)`.
    #[default]
    AgentsAbsorb,
    /// Position `W − avg_i (X_i − E X_i)`.
    PrincipalPays,
}

impl TransferOrientation {
    fn sign(self) -> f64 {
        match self {
            TransferOrientation::AgentsAbsorb => 1.0,
            TransferOrientation::PrincipalPays => -1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RiskProblem {
    pub market: FiniteMarket,
    pub types: Vec<f64>,
    #[serde(default = "default_v_cap")]
    pub v_cap: f64,
    /// Defaults to the largest attainable variance.
    #[serde(default)]
    pub slope_cap: Option<f64>,
    #[serde(default)]
    pub orientation: TransferOrientation,
}

fn default_v_cap() -> f64 {
    DEFAULT_V_CAP
}

impl RiskProblem {
    pub fn new(market: FiniteMarket, types: Vec<f64>) -> Result<Self> {
        let problem = RiskProblem {
            market,
            types,
            v_cap: DEFAULT_V_CAP,
            slope_cap: None,
            orientation: TransferOrientation::default(),
        };
        problem.validate()?;
        Ok(problem)
    }

    pub fn validate(&self) -> Result<()> {
        self.market.validate()?;
        if self.types.is_empty() {
            return Err(Error::InvalidInput("at least one type is required".into()));
        }
        if self.types.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            return Err(Error::InvalidInput("types must lie in (0, 1]".into()));
        }
        if self.types.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput("types must be strictly increasing".into()));
        }
        if !(self.v_cap > 0.0 && self.v_cap.is_finite()) {
            return Err(Error::InvalidInput("v_cap must be positive".into()));
        }
        let cap = self.slope_cap();
        if !(cap > 0.0) || cap > self.market.max_variance() * (1.0 + 1e-12) {
            return Err(Error::InvalidInput(format!(
                "slope_cap must lie in (0, {}]",
                self.market.max_variance()
            )));
        }
        Ok(())
    }

    pub fn slope_cap(&self) -> f64 {
        self.slope_cap.unwrap_or_else(|| self.market.max_variance())
    }

    pub fn layout(&self) -> DecisionLayout {
        DecisionLayout::new(self.types.len(), 1)
    }

    /// Strike implied by a slope.
    pub fn strike(&self, slope: f64) -> Result<f64> {
        invert_variance(&self.market, (-slope).max(0.0))
    }

    /// Principal's position after transferring the centered payoffs at `strikes`.
    pub fn position(&self, strikes: &[f64]) -> Vec<f64> {
        let scale = self.orientation.sign() / strikes.len() as f64;
        let mut position = self.market.wealth.clone();
        for &k in strikes {
            let (mean, _, _) = payoff_moments(&self.market, k);
            for (pos, w) in position.iter_mut().zip(&self.market.wealth) {
                *pos += scale * ((w.abs() - k).max(0.0) - mean);
            }
        }
        position
    }

    /// Riemann sum of the income `θ v′ − v` over the types.
    pub fn income(&self, v: &[f64], slope: &[f64]) -> f64 {
        let n = self.types.len() as f64;
        self.types
            .iter()
            .zip(v.iter().zip(slope))
            .map(|(t, (v, s))| t * s - v)
            .sum::<f64>()
            / n
    }
}

/// `ρ(position) − income`.
pub fn risk_objective(problem: &RiskProblem, v: &[f64], slope: &[f64]) -> Result<f64> {
    let n = problem.types.len();
    if v.len() != n || slope.len() != n {
        return Err(Error::InvalidInput("one value and one slope per type required".into()));
    }
    if slope.iter().any(|s| *s > 1e-12) {
        return Err(Error::Domain("slopes must be nonpositive".into()));
    }
    let strikes = slope
        .iter()
        .map(|&s| problem.strike(s))
        .collect::<Result<Vec<_>>>()?;
    Ok(entropic_risk(&problem.market, &problem.position(&strikes))? - problem.income(v, slope))
}

/// `risk_objective` as a function of the flat vector `(v, slope)`.
#[derive(Debug, Clone)]
pub struct RiskObjective<'a> {
    problem: &'a RiskProblem,
}

impl<'a> RiskObjective<'a> {
    pub fn new(problem: &'a RiskProblem) -> Self {
        RiskObjective { problem }
    }

    fn split<'x>(&self, x: &'x [f64]) -> (&'x [f64], &'x [f64]) {
        x.split_at(self.problem.types.len())
    }
}

impl Objective for RiskObjective<'_> {
    fn dim(&self) -> usize {
        2 * self.problem.types.len()
    }

    fn value(&self, x: &[f64]) -> Result<f64> {
        let (v, s) = self.split(x);
        risk_objective(self.problem, v, s)
    }

    fn gradient(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        let p = self.problem;
        let market = &p.market;
        let n = p.types.len();
        let (_, slope) = self.split(x);
        let strikes = slope
            .iter()
            .map(|&s| p.strike(s))
            .collect::<Result<Vec<_>>>()?;
        let position = p.position(&strikes);

        // ∂ρ/∂position_j = −β q_j with q the exponentially tilted probabilities
        let exps: Vec<f64> = position.iter().map(|x| -market.beta * x).collect();
        let shift = exps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = exps
            .iter()
            .zip(&market.probabilities)
            .map(|(e, q)| q * (e - shift).exp())
            .collect();
        let total: f64 = weights.iter().sum();

        let inv_n = 1.0 / n as f64;
        let orient = p.orientation.sign();
        for i in 0..n {
            out[i] = inv_n;
            let k = strikes[i];
            let (mean, _, active) = payoff_moments(market, k);
            let dvar = -2.0 * (1.0 - active) * mean;
            if !(dvar < 0.0) {
                return Err(Error::Evaluation(format!(
                    "strike map not differentiable at slope {}",
                    slope[i]
                )));
            }
            let dk_ds = -1.0 / dvar;
            let drho_dk: f64 = market
                .wealth
                .iter()
                .zip(&weights)
                .map(|(w, q)| {
                    let itm = if w.abs() > k { 1.0 } else { 0.0 };
                    -market.beta * (q / total) * orient * inv_n * (active - itm)
                })
                .sum();
            out[n + i] = drho_dk * dk_ds - p.types[i] * inv_n;
        }
        Ok(())
    }

    /// Central differences of the analytic gradient, one-sided where the
    /// stencil leaves the slope range.
    fn add_hessian(&self, x: &[f64], h: &mut DMatrix<f64>) -> Result<()> {
        let dim = x.len();
        let mut fd = DMatrix::zeros(dim, dim);
        let mut g0 = vec![0.0; dim];
        self.gradient(x, &mut g0)?;
        let mut gp = vec![0.0; dim];
        let mut gm = vec![0.0; dim];
        for j in 0..dim {
            let step = 1e-6 * (1.0 + x[j].abs());
            let mut xp = x.to_vec();
            xp[j] += step;
            let mut xm = x.to_vec();
            xm[j] -= step;
            let plus = self.gradient(&xp, &mut gp).is_ok();
            let minus = self.gradient(&xm, &mut gm).is_ok();
            for r in 0..dim {
                fd[(r, j)] = match (plus, minus) {
                    (true, true) => (gp[r] - gm[r]) / (2.0 * step),
                    (true, false) => (gp[r] - g0[r]) / step,
                    (false, true) => (g0[r] - gm[r]) / step,
                    (false, false) => 0.0,
                };
            }
        }
        *h += (&fd + fd.transpose()) * 0.5;
        Ok(())
    }

    fn is_convex(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RiskSolution {
    pub types: Vec<f64>,
    pub v: Vec<f64>,
    pub slope: Vec<f64>,
    pub strikes: Vec<f64>,
    pub risk_before: f64,
    pub risk_after: f64,
    pub income: f64,
    pub objective: f64,
    pub report: SolveReport,
}

pub fn solve_risk(problem: &RiskProblem, settings: &SolverSettings) -> Result<RiskSolution> {
    problem.validate()?;
    let types = &problem.types;
    let cap = problem.slope_cap();
    let options = SystemOptions {
        upper_bound_v: Some(problem.v_cap),
        ..SystemOptions::new(GradientBox::uniform(1, -cap, 0.0)?)
    };
    let system = assemble_nodes(types, 1, &options)?;
    let q = &options.gradient_box;
    let (a, b) = (types[0], types[types.len() - 1]);
    let (a, b) = if b > a { (a, b) } else { (a - 0.5, a + 0.5) };
    let hint = start_for_nodes(types, 1, q, a, b, None)?;
    let start = feasible_start(&system, &hint)?;

    let objective = RiskObjective::new(problem);
    let report = solve(&objective, &system, &start, settings)?;
    let n = types.len();
    let v = report.x_opt[..n].to_vec();
    let slope = report.x_opt[n..2 * n].to_vec();
    let strikes = slope
        .iter()
        .map(|&s| problem.strike(s))
        .collect::<Result<Vec<_>>>()?;
    let risk_before = entropic_risk(&problem.market, &problem.market.wealth)?;
    let risk_after = entropic_risk(&problem.market, &problem.position(&strikes))?;
    Ok(RiskSolution {
        types: types.clone(),
        income: problem.income(&v, &slope),
        objective: report.objective,
        v,
        slope,
        strikes,
        risk_before,
        risk_after,
        report,
    })
}
