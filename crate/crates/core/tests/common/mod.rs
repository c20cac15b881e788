#![allow(dead_code)]

use convex_screen::constraints::{assemble_nodes, start_for_nodes, ConstraintSystem, SystemOptions};
use convex_screen::lattice::{build_lattice, Domain, Lattice};
use convex_screen::problem::GradientBox;
use convex_screen::solver::{feasible_start, solve, QuadraticObjective, SolveReport, SolverSettings};
use nalgebra::{DMatrix, DVector};
use rand::rngs::StdRng;
use rand::RngExt;

/// Exact minimizer of the 1-D quadratic problem on [1, 2].
pub fn mussa_rosen_value(theta: f64) -> f64 {
    (theta - 1.0).powi(2)
}

pub fn mussa_rosen_slope(theta: f64) -> f64 {
    2.0 * (theta - 1.0)
}

/// ∫_1^2 θ·2(θ−1) − 2(θ−1)² − (θ−1)² dθ.
pub const MUSSA_ROSEN_SURPLUS: f64 = 2.0 / 3.0;

/// Dense copy of the constraint rows.
pub fn dense_rows(system: &ConstraintSystem) -> DMatrix<f64> {
    let mut a = DMatrix::zeros(system.len(), system.cols());
    for r in 0..system.len() {
        let (idx, val) = system.rows.row(r);
        for (&c, &v) in idx.iter().zip(val) {
            a[(r, c)] += v;
        }
    }
    a
}

pub struct OracleResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub max_violation: f64,
    pub sweeps: usize,
}

/// Minimizes `½xᵀHx + cᵀx` over `Ax ≤ b` by projected coordinate ascent on
/// the dual (Hildreth's method), run until a full sweep moves no multiplier
/// by more than `1e-15` relative, or `max_sweeps` is reached.
pub fn hildreth(h: &DMatrix<f64>, c: &DVector<f64>, a: &DMatrix<f64>, b: &[f64], max_sweeps: usize) -> OracleResult {
    let hinv = h.clone().cholesky().expect("oracle needs a positive definite H").inverse();
    let rows = a.nrows();
    let a_rows: Vec<Vec<f64>> = (0..rows).map(|r| a.row(r).iter().copied().collect()).collect();
    // columns H⁻¹ a_r and diagonal a_rᵀ H⁻¹ a_r
    let ha: Vec<Vec<f64>> = (0..rows)
        .map(|r| (&hinv * a.row(r).transpose()).as_slice().to_vec())
        .collect();
    let dot = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(p, q)| p * q).sum::<f64>();
    let diag: Vec<f64> = (0..rows).map(|r| dot(&a_rows[r], &ha[r])).collect();
    let mut lambda = vec![0.0; rows];
    let mut x = (-(&hinv * c)).as_slice().to_vec();
    let mut sweeps = 0;
    while sweeps < max_sweeps {
        sweeps += 1;
        let mut moved = 0.0f64;
        let mut scale = 0.0f64;
        for r in 0..rows {
            if diag[r] <= 0.0 {
                continue;
            }
            let excess = dot(&a_rows[r], &x) - b[r];
            let next = (lambda[r] + excess / diag[r]).max(0.0);
            let delta = next - lambda[r];
            if delta != 0.0 {
                for (xi, hi) in x.iter_mut().zip(&ha[r]) {
                    *xi -= delta * hi;
                }
                lambda[r] = next;
                moved = moved.max(delta.abs());
            }
            scale = scale.max(next);
        }
        if moved <= 1e-15 * (1.0 + scale) {
            break;
        }
    }
    let xv = DVector::from_column_slice(&x);
    let value = 0.5 * xv.dot(&(h * &xv)) + c.dot(&xv);
    let max_violation = (0..rows)
        .map(|r| dot(&a_rows[r], &x) - b[r])
        .fold(f64::NEG_INFINITY, f64::max);
    OracleResult {
        x,
        value,
        max_violation,
        sweeps,
    }
}

/// Convexity-constrained QP over a small lattice with a random positive
/// definite Hessian.
pub struct QpInstance {
    pub lattice: Lattice,
    pub q: GradientBox,
    pub system: ConstraintSystem,
    pub h: DMatrix<f64>,
    pub c: DVector<f64>,
}

pub fn random_qp(rng: &mut StdRng) -> QpInstance {
    let n = rng.random_range(1..=2usize);
    let k = rng.random_range(2..=4usize);
    let a = rng.random_range(-1.0..1.0);
    let domain = Domain::new(a, a + rng.random_range(0.5..2.0), n).unwrap();
    let lattice = build_lattice(domain, k).unwrap();
    let lo: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..0.0)).collect();
    let hi: Vec<f64> = lo.iter().map(|l| l + rng.random_range(0.5..3.0)).collect();
    let q = GradientBox::new(lo, hi).unwrap();
    let system = assemble_nodes(lattice.centers(), n, &SystemOptions::new(q.clone())).unwrap();
    let dim = system.cols();
    let b = DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-0.5..0.5));
    let h = b.transpose() * &b / dim as f64 + DMatrix::identity(dim, dim) * rng.random_range(0.2..1.0);
    let c = DVector::from_fn(dim, |_, _| rng.random_range(-2.0..2.0));
    QpInstance {
        lattice,
        q,
        system,
        h,
        c,
    }
}

impl QpInstance {
    pub fn start(&self) -> Vec<f64> {
        let d = self.lattice.domain();
        let hint = start_for_nodes(self.lattice.centers(), d.n, &self.q, d.a, d.b, None).unwrap();
        feasible_start(&self.system, &hint).unwrap()
    }

    pub fn solve_from(&self, start: &[f64]) -> SolveReport {
        let objective = QuadraticObjective::new(self.h.clone(), self.c.clone()).unwrap();
        solve(&objective, &self.system, start, &SolverSettings::default()).unwrap()
    }

    pub fn oracle(&self) -> OracleResult {
        hildreth(&self.h, &self.c, &dense_rows(&self.system), &self.system.rhs, 400_000)
    }
}

/// `max_{i≠j} v_i − v_j + D_i·(θ_j − θ_i)` computed straight from the state.
pub fn worst_convexity_row(centers: &[f64], n: usize, values: &[f64], slopes: &[f64]) -> f64 {
    let m = values.len();
    let mut worst = f64::NEG_INFINITY;
    for i in 0..m {
        let ti = &centers[i * n..(i + 1) * n];
        let di = &slopes[i * n..(i + 1) * n];
        for j in (0..m).filter(|&j| j != i) {
            let tj = &centers[j * n..(j + 1) * n];
            let row = values[i] - values[j]
                + di.iter().zip(tj.iter().zip(ti)).map(|(d, (a, b))| d * (a - b)).sum::<f64>();
            worst = worst.max(row);
        }
    }
    worst
}

/// Central difference of `f` along every coordinate.
pub fn central_difference(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut y = x.to_vec();
    (0..x.len())
        .map(|i| {
            let step = h * (1.0 + x[i].abs());
            y[i] = x[i] + step;
            let up = f(&y);
            y[i] = x[i] - step;
            let down = f(&y);
            y[i] = x[i];
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// `‖a − b‖∞ / max(1, ‖b‖∞)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    let scale = b.iter().fold(1.0f64, |m, y| m.max(y.abs()));
    diff / scale
}
