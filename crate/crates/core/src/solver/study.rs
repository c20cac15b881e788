use rayon::prelude::*;
use serde::Serialize;

use super::{solve_on_lattice, SolverSettings};
use crate::error::{Error, Result};
use crate::lattice::build_lattice;
use crate::problem::ProblemSpec;
use crate::pwa::{functional_value, reconstruct};

/// One refinement level. Objective values are in the problem's own sense.
#[derive(Debug, Clone, Serialize)]
pub struct StudyRow {
    pub k: usize,
    pub nodes: usize,
    /// Discrete objective `J_k`.
    pub discrete: f64,
    /// Quadrature of the continuous functional at the envelope.
    pub functional: f64,
    /// `|J_k − I[v̄_k]|`.
    pub discretization_gap: f64,
    /// `|J_k − J_{k_prev}|`, absent for the first level.
    pub delta_discrete: Option<f64>,
    /// `|I[v̄_k] − I[v̄_{k_prev}]|`, absent for the first level.
    pub delta_functional: Option<f64>,
    pub newton_iterations: usize,
    pub wall_time: f64,
}

/// Solves at every `k` (concurrently) and tabulates discrete against
/// continuous objective values.
pub fn convergence_study(
    spec: &ProblemSpec,
    k_list: &[usize],
    settings: &SolverSettings,
    subdivisions: usize,
) -> Result<Vec<StudyRow>> {
    if k_list.is_empty() {
        return Err(Error::InvalidInput("k list is empty".into()));
    }
    if k_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidInput("k list must be strictly increasing".into()));
    }
    let sign = spec.sense.sign();
    let solved: Vec<StudyRow> = k_list
        .par_iter()
        .map(|&k| {
            let lattice = build_lattice(spec.domain, k)?;
            let (report, state) = solve_on_lattice(spec, &lattice, settings)?;
            let envelope = reconstruct(&state, &lattice)?;
            let functional = functional_value(&envelope, spec, subdivisions)?;
            let discrete = sign * report.objective;
            Ok(StudyRow {
                k,
                nodes: lattice.len(),
                discrete,
                functional,
                discretization_gap: (discrete - functional).abs(),
                delta_discrete: None,
                delta_functional: None,
                newton_iterations: report.newton_iterations,
                wall_time: report.wall_time,
            })
        })
        .collect::<Result<_>>()?;

    let mut rows = solved;
    for j in 1..rows.len() {
        rows[j].delta_discrete = Some((rows[j].discrete - rows[j - 1].discrete).abs());
        rows[j].delta_functional = Some((rows[j].functional - rows[j - 1].functional).abs());
    }
    Ok(rows)
}
