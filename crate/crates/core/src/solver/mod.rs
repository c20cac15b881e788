//! Interior-point solution of the discretized program.

mod barrier;
mod objective;
mod study;

pub use barrier::{
    feasible_start, solve, solve_until, SolveReport, SolverSettings, StageStop, TraceRecord,
};
pub use objective::{DiscreteObjective, LinearObjective, Objective, QuadraticObjective};
pub use study::{convergence_study, StudyRow};

use serde::Serialize;

use crate::constraints::{assemble, start_for_nodes, DecisionLayout};
use crate::error::{Error, Result};
use crate::lattice::{build_lattice, Lattice};
use crate::problem::ProblemSpec;

/// Per-node values and slopes unpacked from a decision vector.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecisionState {
    pub dim: usize,
    pub values: Vec<f64>,
    /// Node-major slopes, `dim` per node.
    pub slopes: Vec<f64>,
    /// Strikes implied by the slopes, for the risk-transfer problem.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub strikes: Option<Vec<f64>>,
}

impl DecisionState {
    pub fn from_x(layout: DecisionLayout, x: &[f64]) -> Result<Self> {
        if x.len() < layout.node_count * (1 + layout.dim) {
            return Err(Error::InvalidInput("decision vector too short".into()));
        }
        Ok(DecisionState {
            dim: layout.dim,
            values: x[layout.v_range()].to_vec(),
            slopes: x[layout.d_range()].to_vec(),
            strikes: None,
        })
    }

    pub fn to_x(&self) -> Vec<f64> {
        let mut x = self.values.clone();
        x.extend_from_slice(&self.slopes);
        x
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn slope(&self, i: usize) -> &[f64] {
        &self.slopes[i * self.dim..(i + 1) * self.dim]
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

pub fn solve_problem(
    spec: &ProblemSpec,
    k: usize,
    settings: &SolverSettings,
) -> Result<(SolveReport, DecisionState)> {
    let lattice = build_lattice(spec.domain, k)?;
    solve_on_lattice(spec, &lattice, settings)
}

pub fn solve_on_lattice(
    spec: &ProblemSpec,
    lattice: &Lattice,
    settings: &SolverSettings,
) -> Result<(SolveReport, DecisionState)> {
    let system = assemble(lattice, spec)?;
    let objective = DiscreteObjective::new(lattice, spec)?;
    let domain = lattice.domain();
    let hint = start_for_nodes(
        lattice.centers(),
        lattice.dim(),
        &spec.effective_gradient_box(),
        domain.a,
        domain.b,
        None,
    )?;
    let start = feasible_start(&system, &hint)?;
    let report = solve(&objective, &system, &start, settings)?;
    let state = DecisionState::from_x(system.layout, &report.x_opt)?;
    Ok((report, state))
}
