//! The convex envelope `v̄(θ) = max_i [v_i + D_i·(θ − θ_i)]` of a solved state.

use std::io::Write;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lattice::{build_lattice, Domain, Lattice};
use crate::problem::ProblemSpec;
use crate::solver::DecisionState;

/// Violation allowed on the convexity rows when reconstructing.
pub const RECONSTRUCT_TOL: f64 = 1e-7;

pub const DEFAULT_SUBDIVISIONS: usize = 8;

#[derive(Debug, Clone)]
pub struct PiecewiseAffineFunction {
    domain: Domain,
    /// Cells per axis of the lattice the planes came from, if any.
    k: Option<usize>,
    anchors: Vec<f64>,
    values: Vec<f64>,
    slopes: Vec<f64>,
}

impl PiecewiseAffineFunction {
    /// Builds from flattened anchors and slopes (`domain.n` per plane).
    pub fn from_planes(
        domain: Domain,
        anchors: Vec<f64>,
        values: Vec<f64>,
        slopes: Vec<f64>,
    ) -> Result<Self> {
        domain.validate()?;
        let n = domain.n;
        if values.is_empty() || anchors.len() != n * values.len() || slopes.len() != n * values.len()
        {
            return Err(Error::InvalidInput("plane data has inconsistent lengths".into()));
        }
        Ok(PiecewiseAffineFunction {
            domain,
            k: None,
            anchors,
            values,
            slopes,
        })
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn plane_value(&self, i: usize, theta: &[f64]) -> f64 {
        let n = self.domain.n;
        let anchor = &self.anchors[i * n..(i + 1) * n];
        let slope = &self.slopes[i * n..(i + 1) * n];
        self.values[i]
            + slope
                .iter()
                .zip(theta.iter().zip(anchor))
                .map(|(d, (t, a))| d * (t - a))
                .sum::<f64>()
    }

    pub fn slope(&self, i: usize) -> &[f64] {
        let n = self.domain.n;
        &self.slopes[i * n..(i + 1) * n]
    }

    /// Copy without plane `i`.
    pub fn without_plane(&self, i: usize) -> Result<Self> {
        let n = self.domain.n;
        let cut = |v: &[f64], w: usize| {
            let mut out = v.to_vec();
            out.drain(i * w..(i + 1) * w);
            out
        };
        let mut f = Self::from_planes(
            self.domain,
            cut(&self.anchors, n),
            cut(&self.values, 1),
            cut(&self.slopes, n),
        )?;
        f.k = self.k;
        Ok(f)
    }
}

/// Envelope of the planes of `state`, after checking the convexity rows.
pub fn reconstruct(state: &DecisionState, lattice: &Lattice) -> Result<PiecewiseAffineFunction> {
    let m = lattice.len();
    let n = lattice.dim();
    if state.len() != m || state.dim != n || state.slopes.len() != m * n {
        return Err(Error::InvalidInput("state does not match lattice".into()));
    }
    let worst = (0..m)
        .into_par_iter()
        .map(|i| {
            let ti = lattice.center(i);
            let di = state.slope(i);
            let mut worst = (f64::NEG_INFINITY, i, i);
            for j in (0..m).filter(|&j| j != i) {
                let tj = lattice.center(j);
                let row = state.values[i] - state.values[j]
                    + di.iter().zip(tj.iter().zip(ti)).map(|(d, (a, b))| d * (a - b)).sum::<f64>();
                if row > worst.0 {
                    worst = (row, i, j);
                }
            }
            worst
        })
        .reduce(|| (f64::NEG_INFINITY, 0, 0), |a, b| if b.0 > a.0 { b } else { a });
    if worst.0 > RECONSTRUCT_TOL {
        return Err(Error::InvalidInput(format!(
            "convexity row ({}, {}) violated by {:e}",
            worst.1, worst.2, worst.0
        )));
    }
    let mut f = PiecewiseAffineFunction::from_planes(
        *lattice.domain(),
        lattice.centers().to_vec(),
        state.values.clone(),
        state.slopes.clone(),
    )?;
    f.k = Some(lattice.k());
    Ok(f)
}

/// Maximum over planes and the smallest index attaining it.
pub fn evaluate(f: &PiecewiseAffineFunction, theta: &[f64]) -> (f64, usize) {
    let mut best = (f.plane_value(0, theta), 0);
    for i in 1..f.len() {
        let v = f.plane_value(i, theta);
        if v > best.0 {
            best = (v, i);
        }
    }
    best
}

/// Slope of the active plane: the gradient wherever the envelope is
/// differentiable, and the smallest-index selection at kinks.
pub fn gradient_ae(f: &PiecewiseAffineFunction, theta: &[f64]) -> Vec<f64> {
    f.slope(evaluate(f, theta).1).to_vec()
}

/// Midpoint-rule quadrature of the functional at `f`, in the problem's own
/// sense, on `(subdivisions · k)^n` cells.
///
/// The integrand jumps wherever the active plane changes, so a cell whose
/// corners do not share one active plane is split further into
/// [`straddle_split`]`^n` midpoint cells. Cells with a common active plane at
/// every corner lie inside that plane's (convex) region and need no split.
pub fn functional_value(
    f: &PiecewiseAffineFunction,
    spec: &ProblemSpec,
    subdivisions: usize,
) -> Result<f64> {
    let k = f.k.ok_or_else(|| {
        Error::InvalidInput("envelope has no lattice; use functional_value_on_grid".into())
    })?;
    if subdivisions == 0 {
        return Err(Error::InvalidInput("subdivisions must be at least 1".into()));
    }
    functional_value_on_grid(f, spec, subdivisions * k)
}

/// Per-axis split of a cell that straddles a facet.
pub fn straddle_split(n: usize) -> usize {
    match n {
        1 => 256,
        2 => 16,
        3 => 6,
        _ => 2,
    }
}

pub fn functional_value_on_grid(
    f: &PiecewiseAffineFunction,
    spec: &ProblemSpec,
    cells_per_axis: usize,
) -> Result<f64> {
    if spec.domain != f.domain {
        return Err(Error::InvalidInput("envelope and problem domains differ".into()));
    }
    let grid = build_lattice_unbounded(f.domain, cells_per_axis)?;
    let n = f.domain.n;
    let h = grid.spacing();
    let split = straddle_split(n);
    let integrand = |theta: &[f64]| {
        let (value, active) = evaluate(f, theta);
        spec.natural_integrand(theta, value, f.slope(active))
    };
    let terms: Vec<f64> = (0..grid.len())
        .into_par_iter()
        .map(|q| {
            let center = grid.center(q);
            let (value, active) = evaluate(f, center);
            let whole = spec.natural_integrand(center, value, f.slope(active))?;
            if cell_has_one_plane(f, center, h, active) {
                return Ok(whole);
            }
            let fine = h / split as f64;
            let mut theta = vec![0.0; n];
            let mut total = 0.0;
            for s in 0..split.pow(n as u32) {
                let mut rest = s;
                for (t, c) in theta.iter_mut().zip(center) {
                    *t = c - 0.5 * h + ((rest % split) as f64 + 0.5) * fine;
                    rest /= split;
                }
                total += integrand(&theta)?;
            }
            Ok(total / split.pow(n as u32) as f64)
        })
        .collect::<Result<_>>()?;
    Ok(grid.cell_volume() * terms.iter().sum::<f64>())
}

/// Whether plane `active` attains the envelope at every corner of the cube
/// of side `h` around `center`.
fn cell_has_one_plane(f: &PiecewiseAffineFunction, center: &[f64], h: f64, active: usize) -> bool {
    let n = center.len();
    let mut corner = vec![0.0; n];
    (0..1usize << n).all(|mask| {
        for (a, (t, c)) in corner.iter_mut().zip(center).enumerate() {
            *t = if mask >> a & 1 == 1 { c + 0.5 * h } else { c - 0.5 * h };
        }
        let (top, _) = evaluate(f, &corner);
        f.plane_value(active, &corner) >= top - 1e-13 * (1.0 + top.abs())
    })
}

fn build_lattice_unbounded(domain: Domain, k: usize) -> Result<Lattice> {
    crate::lattice::build_lattice_with_budget(domain, k, usize::MAX)
}

/// Writes `theta_1..theta_n,value,grad_1..grad_n` at the centers of a
/// `cells_per_axis^n` grid.
pub fn write_csv<W: Write>(f: &PiecewiseAffineFunction, cells_per_axis: usize, out: W) -> Result<()> {
    let grid = build_lattice(f.domain, cells_per_axis)?;
    let n = f.domain.n;
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = (1..=n).map(|j| format!("theta_{j}")).collect();
    header.push("value".into());
    header.extend((1..=n).map(|j| format!("grad_{j}")));
    w.write_record(&header)?;
    for q in 0..grid.len() {
        let theta = grid.center(q);
        let (value, active) = evaluate(f, theta);
        let mut record: Vec<String> = theta.iter().map(|t| t.to_string()).collect();
        record.push(value.to_string());
        record.extend(f.slope(active).iter().map(|d| d.to_string()));
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::sample_quadratic;
    use crate::problem::builtin_problem;

    fn two_planes() -> PiecewiseAffineFunction {
        PiecewiseAffineFunction::from_planes(
            Domain::new(0.0, 1.0, 1).unwrap(),
            vec![0.0, 1.0],
            vec![0.0, 1.0],
            vec![0.0, 2.0],
        )
        .unwrap()
    }

    #[test]
    fn two_plane_examples() {
        let f = two_planes();
        assert_eq!(evaluate(&f, &[0.25]), (0.0, 0));
        assert_eq!(gradient_ae(&f, &[0.9]), vec![2.0]);
        // planes tie at 0.5
        assert_eq!(evaluate(&f, &[0.5]), (0.0, 0));
        assert_eq!(gradient_ae(&f, &[0.5]), vec![0.0]);
    }

    #[test]
    fn single_plane_is_affine() {
        let f = PiecewiseAffineFunction::from_planes(
            Domain::new(0.0, 2.0, 2).unwrap(),
            vec![1.0, 1.0],
            vec![3.0],
            vec![0.5, -1.0],
        )
        .unwrap();
        assert_eq!(evaluate(&f, &[2.0, 0.0]).0, 3.0 + 0.5 + 1.0);
    }

    fn sampled_state(lattice: &Lattice) -> DecisionState {
        let x = sample_quadratic(lattice.centers(), 1, &[1.0], 1.0, &[0.0], 0.0);
        DecisionState::from_x(crate::constraints::DecisionLayout::new(lattice.len(), 1), &x).unwrap()
    }

    #[test]
    fn sampled_quadratic_envelope_is_a_minorant() {
        for k in [1, 4, 13] {
            let lat = build_lattice(Domain::new(1.0, 2.0, 1).unwrap(), k).unwrap();
            let f = reconstruct(&sampled_state(&lat), &lat).unwrap();
            for i in 0..lat.len() {
                let t = lat.center(i)[0];
                assert!((evaluate(&f, &[t]).0 - (t - 1.0).powi(2)).abs() <= 1e-12);
            }
            for q in 0..=1000 {
                let t = 1.0 + q as f64 / 1000.0;
                assert!(evaluate(&f, &[t]).0 <= (t - 1.0).powi(2) + 1e-12);
            }
        }
    }

    #[test]
    fn reconstruct_rejects_nonconvex_state() {
        let lat = build_lattice(Domain::new(1.0, 2.0, 1).unwrap(), 3).unwrap();
        let mut state = sampled_state(&lat);
        state.values[1] += 1.0;
        assert!(reconstruct(&state, &lat).is_err());
    }

    #[test]
    fn zero_envelope_has_zero_functional() {
        let spec = builtin_problem("rochet_chone_uniform").unwrap().spec;
        let lat = build_lattice(spec.domain, 4).unwrap();
        let state = DecisionState {
            dim: 2,
            values: vec![0.0; 16],
            slopes: vec![0.0; 32],
            strikes: None,
        };
        let f = reconstruct(&state, &lat).unwrap();
        assert_eq!(functional_value(&f, &spec, 8).unwrap(), 0.0);
    }

    #[test]
    fn exact_samples_approach_closed_form_surplus() {
        // ∫_1^2 θ·2(θ−1) − 2(θ−1)² − (θ−1)² dθ = 2/3
        let spec = builtin_problem("mussa_rosen_1d").unwrap().spec;
        let lat = build_lattice(spec.domain, 20).unwrap();
        let f = reconstruct(&sampled_state(&lat), &lat).unwrap();
        let errors: Vec<f64> = [1, 4, 16]
            .iter()
            .map(|&s| (functional_value(&f, &spec, s).unwrap() - 2.0 / 3.0).abs())
            .collect();
        assert!(errors[2] < errors[0]);
        assert!(errors[2] < 2e-3, "{errors:?}");
    }

    #[test]
    fn csv_export_layout() {
        let f = two_planes();
        let mut buf = Vec::new();
        write_csv(&f, 4, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "theta_1,value,grad_1");
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[4], "0.875,0.75,2");
    }
}
