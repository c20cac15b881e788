use nalgebra::{DMatrix, DVector};

use crate::constraints::DecisionLayout;
use crate::error::{Error, Result};
use crate::lattice::Lattice;
use crate::problem::ProblemSpec;

/// A twice-differentiable function of the flat decision vector.
pub trait Objective: Sync {
    fn dim(&self) -> usize;
    fn value(&self, x: &[f64]) -> Result<f64>;
    fn gradient(&self, x: &[f64], out: &mut [f64]) -> Result<()>;
    /// Adds the Hessian at `x` into `h`.
    fn add_hessian(&self, x: &[f64], h: &mut DMatrix<f64>) -> Result<()>;
    fn is_convex(&self) -> bool {
        true
    }
    /// For objectives whose Hessian vanishes on the value block and is block
    /// diagonal by node on the slope block: the node blocks, `n × n` each,
    /// row-major. `None` means use [`Objective::add_hessian`].
    fn slope_blocks(&self, _x: &[f64]) -> Option<Result<Vec<f64>>> {
        None
    }
}

/// `J_k(x) = Σ_i w_i (v_i − θ_i·D_i + C(D_i))` with `w_i = cell volume · f(θ_i)`.
///
/// Always the minimized form; multiply by `spec.sense.sign()` for the
/// problem's own convention.
#[derive(Debug, Clone)]
pub struct DiscreteObjective {
    spec: ProblemSpec,
    points: Vec<f64>,
    weights: Vec<f64>,
    layout: DecisionLayout,
}

impl DiscreteObjective {
    pub fn new(lattice: &Lattice, spec: &ProblemSpec) -> Result<Self> {
        spec.validate()?;
        if spec.dim() != lattice.dim() {
            return Err(Error::InvalidInput(
                "problem and lattice dimensions differ".into(),
            ));
        }
        let weights: Vec<f64> = (0..lattice.len())
            .map(|i| lattice.cell_volume() * spec.density_at(lattice.center(i)))
            .collect();
        if let Some(bad) = weights.iter().position(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidInput(format!(
                "density is negative or not finite at node {bad}"
            )));
        }
        Ok(DiscreteObjective {
            spec: spec.clone(),
            points: lattice.centers().to_vec(),
            weights,
            layout: DecisionLayout::new(lattice.len(), lattice.dim()),
        })
    }

    pub fn layout(&self) -> DecisionLayout {
        self.layout
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn spec(&self) -> &ProblemSpec {
        &self.spec
    }

    fn node(&self, i: usize) -> &[f64] {
        let n = self.layout.dim;
        &self.points[i * n..(i + 1) * n]
    }

    fn slope<'a>(&self, x: &'a [f64], i: usize) -> &'a [f64] {
        let start = self.layout.d(i, 0);
        &x[start..start + self.layout.dim]
    }
}

impl Objective for DiscreteObjective {
    fn dim(&self) -> usize {
        self.layout.len()
    }

    fn value(&self, x: &[f64]) -> Result<f64> {
        let mut total = 0.0;
        for i in 0..self.layout.node_count {
            let p = self.slope(x, i);
            let dot: f64 = self.node(i).iter().zip(p).map(|(t, q)| t * q).sum();
            total += self.weights[i] * (x[i] - dot + self.spec.cost.value(p)?);
        }
        Ok(total)
    }

    fn gradient(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        let n = self.layout.dim;
        out.fill(0.0);
        for i in 0..self.layout.node_count {
            let w = self.weights[i];
            out[i] = w;
            let start = self.layout.d(i, 0);
            let g = &mut out[start..start + n];
            self.spec.cost.gradient(self.slope(x, i), g)?;
            for (gj, t) in g.iter_mut().zip(self.node(i)) {
                *gj = w * (*gj - t);
            }
        }
        Ok(())
    }

    fn add_hessian(&self, x: &[f64], h: &mut DMatrix<f64>) -> Result<()> {
        let n = self.layout.dim;
        let mut block = vec![0.0; n * n];
        for i in 0..self.layout.node_count {
            self.spec.cost.hessian(self.slope(x, i), &mut block)?;
            let start = self.layout.d(i, 0);
            for a in 0..n {
                for b in 0..n {
                    h[(start + a, start + b)] += self.weights[i] * block[a * n + b];
                }
            }
        }
        Ok(())
    }

    fn is_convex(&self) -> bool {
        self.spec.cost.is_convex()
    }

    fn slope_blocks(&self, x: &[f64]) -> Option<Result<Vec<f64>>> {
        let n = self.layout.dim;
        let mut blocks = vec![0.0; self.layout.node_count * n * n];
        for (i, block) in blocks.chunks_mut(n * n).enumerate() {
            if let Err(e) = self.spec.cost.hessian(self.slope(x, i), block) {
                return Some(Err(e));
            }
            for h in block.iter_mut() {
                *h *= self.weights[i];
            }
        }
        Some(Ok(blocks))
    }
}

/// `½ xᵀ H x + cᵀ x`.
#[derive(Debug, Clone)]
pub struct QuadraticObjective {
    h: DMatrix<f64>,
    c: DVector<f64>,
    convex: bool,
}

impl QuadraticObjective {
    pub fn new(h: DMatrix<f64>, c: DVector<f64>) -> Result<Self> {
        if !h.is_square() || h.nrows() != c.len() {
            return Err(Error::InvalidInput("quadratic objective shape mismatch".into()));
        }
        let sym = (&h + h.transpose()) * 0.5;
        let convex = sym.symmetric_eigenvalues().min() >= -1e-12 * (1.0 + h.amax());
        Ok(QuadraticObjective { h, c, convex })
    }

    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn linear(&self) -> &DVector<f64> {
        &self.c
    }
}

impl Objective for QuadraticObjective {
    fn dim(&self) -> usize {
        self.c.len()
    }

    fn value(&self, x: &[f64]) -> Result<f64> {
        let x = DVector::from_column_slice(x);
        Ok(0.5 * x.dot(&(&self.h * &x)) + self.c.dot(&x))
    }

    fn gradient(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        let g = &self.h * DVector::from_column_slice(x) + &self.c;
        out.copy_from_slice(g.as_slice());
        Ok(())
    }

    fn add_hessian(&self, _x: &[f64], h: &mut DMatrix<f64>) -> Result<()> {
        *h += &self.h;
        Ok(())
    }

    fn is_convex(&self) -> bool {
        self.convex
    }
}

/// `cᵀ x`.
#[derive(Debug, Clone)]
pub struct LinearObjective {
    pub c: Vec<f64>,
}

impl Objective for LinearObjective {
    fn dim(&self) -> usize {
        self.c.len()
    }

    fn value(&self, x: &[f64]) -> Result<f64> {
        Ok(self.c.iter().zip(x).map(|(c, x)| c * x).sum())
    }

    fn gradient(&self, _x: &[f64], out: &mut [f64]) -> Result<()> {
        out.copy_from_slice(&self.c);
        Ok(())
    }

    fn add_hessian(&self, _x: &[f64], _h: &mut DMatrix<f64>) -> Result<()> {
        Ok(())
    }
}
