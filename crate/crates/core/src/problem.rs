//! The continuous problem: minimize `I[v] = ∫ L(θ, v, ∇v) f(θ) dθ` over convex
//! `v ≥ 0` with `∇v ∈ Q`, where `L(θ, z, p) = z − θ·p + C(p)`.
//!
//! Every problem is stored in minimizing form. [`Sense`] only records how the
//! user thinks about it: a surplus-maximization problem reports the negated
//! minimized value.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::Domain;

/// Slack used when checking that a gradient lies in `Q`.
pub const GRADIENT_TOL: f64 = 1e-9;

/// Inner bound keeping `√(−p)` differentiable: admissible slopes satisfy `p ≤ −SQRT_SLOPE_MARGIN`.
pub const SQRT_SLOPE_MARGIN: f64 = 1e-8;

pub const ROCHET_CHONE_Q_MAX: f64 = 3.0;
pub const CET_Q_MAX: f64 = 4.0;

/// Axis-aligned box of admissible gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradientBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl GradientBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let b = GradientBox { lower, upper };
        b.validate()?;
        Ok(b)
    }

    pub fn uniform(n: usize, lower: f64, upper: f64) -> Result<Self> {
        Self::new(vec![lower; n], vec![upper; n])
    }

    pub fn validate(&self) -> Result<()> {
        if self.lower.len() != self.upper.len() || self.lower.is_empty() {
            return Err(Error::InvalidInput(
                "gradient box bounds must be non-empty and of equal length".into(),
            ));
        }
        for (l, u) in self.lower.iter().zip(&self.upper) {
            if l.is_nan() || u.is_nan() || l > u {
                return Err(Error::InvalidInput(format!(
                    "gradient box needs lower <= upper, got [{l}, {u}]"
                )));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, p: &[f64], tol: f64) -> bool {
        p.len() == self.dim()
            && p
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(&x, (&l, &u))| x >= l - tol && x <= u + tol)
    }

    pub fn contains_strictly(&self, p: &[f64]) -> bool {
        p.len() == self.dim()
            && p
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(&x, (&l, &u))| x > l && x < u)
    }

    pub fn has_interior(&self) -> bool {
        self.lower.iter().zip(&self.upper).all(|(l, u)| l < u)
    }

    pub fn intersect(&self, other: &GradientBox) -> GradientBox {
        GradientBox {
            lower: self
                .lower
                .iter()
                .zip(&other.lower)
                .map(|(a, b)| a.max(*b))
                .collect(),
            upper: self
                .upper
                .iter()
                .zip(&other.upper)
                .map(|(a, b)| a.min(*b))
                .collect(),
        }
    }
}

/// A user-supplied cost `C(p)`.
pub trait Cost: Send + Sync + fmt::Debug {
    fn value(&self, p: &[f64]) -> Result<f64>;
    fn gradient(&self, p: &[f64], out: &mut [f64]) -> Result<()>;
    /// Row-major `n × n` Hessian.
    fn hessian(&self, p: &[f64], out: &mut [f64]) -> Result<()>;
    /// Region where the cost is finite and `C^1`; `None` means everywhere.
    fn admissible(&self, _n: usize) -> Option<GradientBox> {
        None
    }
    fn is_convex(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone)]
pub enum CostModel {
    /// `C(p) = scale · ½‖p‖²`.
    QuadraticHalfNorm { scale: f64 },
    /// Scalar `C(p) = −√(−ξ p)` for `p ≤ 0`; enters a surplus as `+√(−ξ v′)`.
    SqrtNegativeSlope { xi: f64 },
    Custom(Arc<dyn Cost>),
}

impl CostModel {
    pub fn quadratic() -> Self {
        CostModel::QuadraticHalfNorm { scale: 1.0 }
    }

    pub fn sqrt_negative_slope() -> Self {
        CostModel::SqrtNegativeSlope { xi: 1.0 }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CostModel::QuadraticHalfNorm { .. } => "quadratic_half_norm",
            CostModel::SqrtNegativeSlope { .. } => "sqrt_negative_slope",
            CostModel::Custom(_) => "custom",
        }
    }

    pub fn is_convex(&self) -> bool {
        match self {
            CostModel::Custom(c) => c.is_convex(),
            _ => true,
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        match self {
            CostModel::QuadraticHalfNorm { scale } if !(*scale > 0.0 && scale.is_finite()) => Err(
                Error::InvalidInput(format!("quadratic cost scale must be positive, got {scale}")),
            ),
            CostModel::SqrtNegativeSlope { xi } if !(*xi > 0.0 && xi.is_finite()) => Err(
                Error::InvalidInput(format!("sqrt cost parameter must be positive, got {xi}")),
            ),
            CostModel::SqrtNegativeSlope { .. } if n != 1 => Err(Error::InvalidInput(
                "sqrt_negative_slope cost is only defined in one dimension".into(),
            )),
            _ => Ok(()),
        }
    }

    /// Region where the cost is finite and differentiable.
    pub fn admissible(&self, n: usize) -> Option<GradientBox> {
        match self {
            CostModel::QuadraticHalfNorm { .. } => None,
            CostModel::SqrtNegativeSlope { .. } => Some(GradientBox {
                lower: vec![f64::NEG_INFINITY; n],
                upper: vec![-SQRT_SLOPE_MARGIN; n],
            }),
            CostModel::Custom(c) => c.admissible(n),
        }
    }

    pub fn value(&self, p: &[f64]) -> Result<f64> {
        match self {
            CostModel::QuadraticHalfNorm { scale } => {
                Ok(0.5 * scale * p.iter().map(|x| x * x).sum::<f64>())
            }
            CostModel::SqrtNegativeSlope { xi } => {
                let q = -xi * p[0];
                if q < 0.0 || q.is_nan() {
                    return Err(Error::Evaluation(format!(
                        "sqrt cost undefined at positive slope {}",
                        p[0]
                    )));
                }
                Ok(-q.sqrt())
            }
            CostModel::Custom(c) => c.value(p),
        }
    }

    pub fn gradient(&self, p: &[f64], out: &mut [f64]) -> Result<()> {
        match self {
            CostModel::QuadraticHalfNorm { scale } => {
                for (o, x) in out.iter_mut().zip(p) {
                    *o = scale * x;
                }
                Ok(())
            }
            CostModel::SqrtNegativeSlope { xi } => {
                let q = -xi * p[0];
                if !(q > 0.0) {
                    return Err(Error::Evaluation(format!(
                        "sqrt cost not differentiable at slope {}",
                        p[0]
                    )));
                }
                // d/dp of −√(−ξp)
                out[0] = 0.5 * xi / q.sqrt();
                Ok(())
            }
            CostModel::Custom(c) => c.gradient(p, out),
        }
    }

    pub fn hessian(&self, p: &[f64], out: &mut [f64]) -> Result<()> {
        let n = p.len();
        match self {
            CostModel::QuadraticHalfNorm { scale } => {
                out.fill(0.0);
                for i in 0..n {
                    out[i * n + i] = *scale;
                }
                Ok(())
            }
            CostModel::SqrtNegativeSlope { xi } => {
                let q = -xi * p[0];
                if !(q > 0.0) {
                    return Err(Error::Evaluation(format!(
                        "sqrt cost not twice differentiable at slope {}",
                        p[0]
                    )));
                }
                out[0] = 0.25 * xi * xi / (q * q.sqrt());
                Ok(())
            }
            CostModel::Custom(c) => c.hessian(p, out),
        }
    }
}

/// Multivariate normal density, evaluated without renormalizing over the box.
#[derive(Debug, Clone)]
pub struct Gaussian {
    mean: Vec<f64>,
    covariance: DMatrix<f64>,
    precision: DMatrix<f64>,
    scale: f64,
}

impl Gaussian {
    pub fn new(mean: Vec<f64>, covariance: Vec<Vec<f64>>) -> Result<Self> {
        let n = mean.len();
        if n == 0 || covariance.len() != n || covariance.iter().any(|r| r.len() != n) {
            return Err(Error::InvalidInput(format!(
                "gaussian covariance must be {n}x{n}"
            )));
        }
        let cov = DMatrix::from_fn(n, n, |i, j| covariance[i][j]);
        for i in 0..n {
            for j in 0..i {
                if (cov[(i, j)] - cov[(j, i)]).abs() > 1e-12 * (1.0 + cov[(i, j)].abs()) {
                    return Err(Error::InvalidInput("covariance must be symmetric".into()));
                }
            }
        }
        let eig = cov.clone().symmetric_eigen();
        if eig.eigenvalues.iter().any(|&e| !(e > 0.0)) {
            return Err(Error::InvalidInput(
                "covariance must be positive definite".into(),
            ));
        }
        let det: f64 = eig.eigenvalues.iter().product();
        let precision = cov
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::InvalidInput("covariance is singular".into()))?;
        let scale = (2.0 * std::f64::consts::PI).powf(-(n as f64) / 2.0) / det.sqrt();
        Ok(Gaussian {
            mean,
            covariance: cov,
            precision,
            scale,
        })
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn covariance(&self) -> Vec<Vec<f64>> {
        let n = self.mean.len();
        (0..n)
            .map(|i| (0..n).map(|j| self.covariance[(i, j)]).collect())
            .collect()
    }

    pub fn pdf(&self, theta: &[f64]) -> f64 {
        let d = DVector::from_iterator(
            self.mean.len(),
            theta.iter().zip(&self.mean).map(|(t, m)| t - m),
        );
        let q = (d.transpose() * &self.precision * &d)[(0, 0)];
        self.scale * (-0.5 * q).exp()
    }
}

/// Piecewise-constant density given by one value per lattice cell, node-ordered.
#[derive(Debug, Clone)]
pub struct DensityTable {
    domain: Domain,
    k: usize,
    values: Vec<f64>,
}

impl DensityTable {
    pub fn new(domain: Domain, k: usize, values: Vec<f64>) -> Result<Self> {
        domain.validate()?;
        let expected = k.checked_pow(domain.n as u32).unwrap_or(usize::MAX);
        if k == 0 || values.len() != expected {
            return Err(Error::InvalidInput(format!(
                "density table needs k^n = {expected} values, got {}",
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::InvalidInput(format!(
                "density values must be finite and nonnegative, got {bad}"
            )));
        }
        Ok(DensityTable { domain, k, values })
    }

    /// Reads node-ordered values from a CSV file with a header row; the last
    /// column of each record is the density value.
    pub fn from_csv(path: &Path, domain: Domain, k: usize) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_path(path)?;
        let mut values = Vec::new();
        for record in reader.records() {
            let record = record?;
            let field = record
                .iter()
                .next_back()
                .ok_or_else(|| Error::InvalidInput("empty density record".into()))?;
            let value: f64 = field.parse().map_err(|_| {
                Error::InvalidInput(format!("density value `{field}` is not a number"))
            })?;
            values.push(value);
        }
        Self::new(domain, k, values)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value_at(&self, theta: &[f64]) -> f64 {
        let h = self.domain.width() / self.k as f64;
        let idx = theta.iter().fold(0, |acc, &t| {
            let m = ((t - self.domain.a) / h)
                .floor()
                .clamp(0.0, (self.k - 1) as f64) as usize;
            acc * self.k + m
        });
        self.values[idx]
    }
}

#[derive(Debug, Clone)]
pub enum Density {
    Uniform,
    Gaussian(Gaussian),
    Table(DensityTable),
}

impl Density {
    pub fn kind(&self) -> &'static str {
        match self {
            Density::Uniform => "uniform",
            Density::Gaussian(_) => "gaussian",
            Density::Table(_) => "custom_table",
        }
    }

    pub fn value(&self, theta: &[f64]) -> f64 {
        match self {
            Density::Uniform => 1.0,
            Density::Gaussian(g) => g.pdf(theta),
            Density::Table(t) => t.value_at(theta),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sense {
    MinimizeI,
    MaximizeSurplus,
}

impl Sense {
    /// Factor converting the minimized value to the user-facing one.
    pub fn sign(self) -> f64 {
        match self {
            Sense::MinimizeI => 1.0,
            Sense::MaximizeSurplus => -1.0,
        }
    }
}

/// Reference profile `v(θ) = c‖θ − θ₀‖² + g·(θ − θ₀) + v₀` supplying boundary data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundaryProfile {
    pub center: Vec<f64>,
    #[serde(default)]
    pub curvature: f64,
    #[serde(default)]
    pub linear: Option<Vec<f64>>,
    #[serde(default)]
    pub offset: f64,
}

impl BoundaryProfile {
    pub fn value(&self, theta: &[f64]) -> f64 {
        let mut out = self.offset;
        for (j, (t, c)) in theta.iter().zip(&self.center).enumerate() {
            let d = t - c;
            out += self.curvature * d * d;
            if let Some(g) = &self.linear {
                out += g[j] * d;
            }
        }
        out
    }

    pub fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        theta
            .iter()
            .zip(&self.center)
            .enumerate()
            .map(|(j, (t, c))| {
                2.0 * self.curvature * (t - c) + self.linear.as_ref().map_or(0.0, |g| g[j])
            })
            .collect()
    }
}

/// Optional pins on boundary nodes, enforced as bands `|x − target| ≤ band`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dirichlet {
    pub profile: BoundaryProfile,
    #[serde(default)]
    pub pin_values: bool,
    #[serde(default = "default_true")]
    pub pin_gradients: bool,
    #[serde(default = "default_band")]
    pub band: f64,
}

fn default_true() -> bool {
    true
}

fn default_band() -> f64 {
    1e-7
}

#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub name: String,
    pub domain: Domain,
    pub gradient_set: GradientBox,
    pub cost: CostModel,
    pub density: Density,
    pub sense: Sense,
    pub dirichlet: Option<Dirichlet>,
    pub upper_bound_v: Option<f64>,
}

impl ProblemSpec {
    pub fn validate(&self) -> Result<()> {
        self.domain.validate()?;
        self.gradient_set.validate()?;
        let n = self.domain.n;
        if self.gradient_set.dim() != n {
            return Err(Error::InvalidInput(format!(
                "gradient box has dimension {} but domain has {n}",
                self.gradient_set.dim()
            )));
        }
        self.cost.validate(n)?;
        match &self.density {
            Density::Gaussian(g) if g.mean().len() != n => {
                return Err(Error::InvalidInput("gaussian mean dimension mismatch".into()));
            }
            Density::Table(t) if t.domain != self.domain => {
                return Err(Error::InvalidInput(
                    "density table domain differs from problem domain".into(),
                ));
            }
            _ => {}
        }
        if let Some(d) = &self.dirichlet {
            if d.profile.center.len() != n
                || d.profile.linear.as_ref().is_some_and(|g| g.len() != n)
            {
                return Err(Error::InvalidInput("dirichlet profile dimension mismatch".into()));
            }
            if !(d.band > 0.0) {
                return Err(Error::InvalidInput("dirichlet band must be positive".into()));
            }
        }
        if let Some(k) = self.upper_bound_v {
            if !(k > 0.0) {
                return Err(Error::InvalidInput("upper_bound_v must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.domain.n
    }

    pub fn density_at(&self, theta: &[f64]) -> f64 {
        self.density.value(theta)
    }

    /// `Q` intersected with the region where the cost is differentiable.
    pub fn effective_gradient_box(&self) -> GradientBox {
        match self.cost.admissible(self.dim()) {
            Some(adm) => self.gradient_set.intersect(&adm),
            None => self.gradient_set.clone(),
        }
    }

    fn check_point(&self, theta: &[f64], p: &[f64]) -> Result<()> {
        let n = self.dim();
        if theta.len() != n || p.len() != n {
            return Err(Error::InvalidInput(format!(
                "expected {n}-dimensional type and gradient"
            )));
        }
        if !self.domain.contains(theta, GRADIENT_TOL) {
            return Err(Error::Domain(format!("type {theta:?} outside the domain")));
        }
        if !self.gradient_set.contains(p, GRADIENT_TOL) {
            return Err(Error::Domain(format!("gradient {p:?} outside Q")));
        }
        Ok(())
    }

    /// Density-weighted minimized integrand `(z − θ·p + C(p))·f(θ)`.
    pub fn evaluate_integrand(&self, theta: &[f64], z: f64, p: &[f64]) -> Result<f64> {
        self.check_point(theta, p)?;
        let dot: f64 = theta.iter().zip(p).map(|(t, q)| t * q).sum();
        Ok((z - dot + self.cost.value(p)?) * self.density_at(theta))
    }

    /// The integrand in the problem's own sign convention (surplus for
    /// `MaximizeSurplus`).
    pub fn natural_integrand(&self, theta: &[f64], z: f64, p: &[f64]) -> Result<f64> {
        Ok(self.sense.sign() * self.evaluate_integrand(theta, z, p)?)
    }

    /// Partial derivatives of [`Self::evaluate_integrand`] in `z` and `p`.
    pub fn integrand_gradient(&self, theta: &[f64], z: f64, p: &[f64]) -> Result<(f64, Vec<f64>)> {
        let _ = z;
        self.check_point(theta, p)?;
        if let Some(adm) = self.cost.admissible(self.dim()) {
            if !adm.contains(p, 0.0) {
                return Err(Error::Evaluation(format!(
                    "cost not differentiable at gradient {p:?}"
                )));
            }
        }
        let f = self.density_at(theta);
        let mut grad = vec![0.0; p.len()];
        self.cost.gradient(p, &mut grad)?;
        for (g, t) in grad.iter_mut().zip(theta) {
            *g = (*g - t) * f;
        }
        Ok((f, grad))
    }
}

pub const BUILTIN_NAMES: [&str; 4] = [
    "mussa_rosen_1d",
    "rochet_chone_uniform",
    "rochet_chone_gaussian",
    "cet_sqrt",
];

#[derive(Debug, Clone)]
pub struct BuiltinProblem {
    pub spec: ProblemSpec,
    pub recommended_k: usize,
}

pub fn builtin_problem(name: &str) -> Result<BuiltinProblem> {
    let (spec, recommended_k) = match name {
        "mussa_rosen_1d" => (
            ProblemSpec {
                name: name.into(),
                domain: Domain::new(1.0, 2.0, 1)?,
                gradient_set: GradientBox::uniform(1, 0.0, ROCHET_CHONE_Q_MAX)?,
                cost: CostModel::quadratic(),
                density: Density::Uniform,
                sense: Sense::MaximizeSurplus,
                dirichlet: None,
                upper_bound_v: None,
            },
            50,
        ),
        "rochet_chone_uniform" => (rochet_chone(name, Density::Uniform)?, 17),
        "rochet_chone_gaussian" => {
            let g = Gaussian::new(vec![1.9, 1.0], vec![vec![0.3, 0.2], vec![0.2, 0.3]])?;
            (rochet_chone(name, Density::Gaussian(g))?, 17)
        }
        "cet_sqrt" => (
            ProblemSpec {
                name: name.into(),
                domain: Domain::new(0.0, 1.0, 1)?,
                gradient_set: GradientBox::uniform(1, -CET_Q_MAX, 0.0)?,
                cost: CostModel::sqrt_negative_slope(),
                density: Density::Uniform,
                sense: Sense::MaximizeSurplus,
                dirichlet: None,
                upper_bound_v: None,
            },
            25,
        ),
        other => return Err(Error::UnknownProblem(other.to_string())),
    };
    Ok(BuiltinProblem {
        spec,
        recommended_k,
    })
}

fn rochet_chone(name: &str, density: Density) -> Result<ProblemSpec> {
    Ok(ProblemSpec {
        name: name.into(),
        domain: Domain::new(1.0, 2.0, 2)?,
        gradient_set: GradientBox::uniform(2, 0.0, ROCHET_CHONE_Q_MAX)?,
        cost: CostModel::quadratic(),
        density,
        sense: Sense::MinimizeI,
        dirichlet: None,
        upper_bound_v: None,
    })
}
