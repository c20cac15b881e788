//! The linear inequality system `A x ≤ b` of the discretized program.
//!
//! The unknown vector is `x = (v, D, extras)`: one value per node, then one
//! `n`-vector of slopes per node (node-major), then any auxiliary variables.
//! Rows are emitted in a fixed order: non-negativity, gradient box, all
//! ordered convexity pairs `(i, j)`, boundary pins, upper bounds.

use std::collections::BTreeSet;
use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::lattice::{boundary_nodes, Lattice};
use crate::problem::{Dirichlet, GradientBox, ProblemSpec};

pub const DEFAULT_ROW_BUDGET: usize = 20_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecisionLayout {
    pub node_count: usize,
    pub dim: usize,
    pub extras: usize,
}

impl DecisionLayout {
    pub fn new(node_count: usize, dim: usize) -> Self {
        DecisionLayout {
            node_count,
            dim,
            extras: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.node_count * (1 + self.dim) + self.extras
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn v(&self, node: usize) -> usize {
        node
    }

    pub fn d(&self, node: usize, axis: usize) -> usize {
        self.node_count + node * self.dim + axis
    }

    pub fn extra(&self, e: usize) -> usize {
        self.node_count * (1 + self.dim) + e
    }

    pub fn v_range(&self) -> std::ops::Range<usize> {
        0..self.node_count
    }

    pub fn d_range(&self) -> std::ops::Range<usize> {
        self.node_count..self.node_count * (1 + self.dim)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RowTag {
    Nonneg { node: usize },
    FeasLower { node: usize, axis: usize },
    FeasUpper { node: usize, axis: usize },
    Convexity { i: usize, j: usize },
    Dirichlet { node: usize, component: usize, upper: bool },
    Bound { node: usize },
    Auxiliary,
}

/// Row-compressed sparse matrix.
#[derive(Debug, Clone, Default)]
pub struct SparseRows {
    cols: usize,
    row_ptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseRows {
    pub fn new(cols: usize) -> Self {
        SparseRows {
            cols,
            row_ptr: vec![0],
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn push_row(&mut self, entries: &[(usize, f64)]) {
        for &(c, v) in entries {
            debug_assert!(c < self.cols);
            self.indices.push(c);
            self.values.push(v);
        }
        self.row_ptr.push(self.indices.len());
    }

    pub fn rows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        (&self.indices[span.clone()], &self.values[span])
    }

    pub fn row_dot(&self, r: usize, x: &[f64]) -> f64 {
        let (idx, val) = self.row(r);
        idx.iter().zip(val).map(|(&c, v)| v * x[c]).sum()
    }

    /// Appends a column of zeros-free entries given per row.
    fn with_extra_column(&self, coeff: impl Fn(usize) -> f64) -> SparseRows {
        let mut out = SparseRows::new(self.cols + 1);
        let mut buf = Vec::new();
        for r in 0..self.rows() {
            let (idx, val) = self.row(r);
            buf.clear();
            buf.extend(idx.iter().copied().zip(val.iter().copied()));
            buf.push((self.cols, coeff(r)));
            out.push_row(&buf);
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct ConstraintSystem {
    pub layout: DecisionLayout,
    pub rows: SparseRows,
    pub rhs: Vec<f64>,
    pub tags: Vec<RowTag>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Violation {
    pub row: usize,
    pub tag: RowTag,
    pub excess: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FeasibilityReport {
    pub violations: Vec<Violation>,
    /// `max_r (A x − b)_r`; negative when strictly feasible.
    pub max_violation: f64,
}

impl FeasibilityReport {
    pub fn is_feasible(&self) -> bool {
        self.violations.is_empty()
    }
}

impl ConstraintSystem {
    pub fn len(&self) -> usize {
        self.rhs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rhs.is_empty()
    }

    pub fn cols(&self) -> usize {
        self.rows.cols()
    }

    /// `b − A x` per row.
    pub fn slacks(&self, x: &[f64]) -> Vec<f64> {
        (0..self.len())
            .map(|r| self.rhs[r] - self.rows.row_dot(r, x))
            .collect()
    }

    pub fn count_tagged(&self, pred: impl Fn(&RowTag) -> bool) -> usize {
        self.tags.iter().filter(|t| pred(t)).count()
    }

    /// Adds one auxiliary column with coefficient `coeff(row)` in every row.
    pub fn with_extra_column(&self, coeff: impl Fn(usize) -> f64) -> ConstraintSystem {
        let mut layout = self.layout;
        layout.extras += 1;
        ConstraintSystem {
            layout,
            rows: self.rows.with_extra_column(coeff),
            rhs: self.rhs.clone(),
            tags: self.tags.clone(),
        }
    }

    pub fn push_row(&mut self, entries: &[(usize, f64)], rhs: f64, tag: RowTag) {
        self.rows.push_row(entries);
        self.rhs.push(rhs);
        self.tags.push(tag);
    }

    /// Writes the system as text triplets:
    ///
    /// ```text
    /// # rows=R cols=N nnz=Z
    /// # A: row,col,value
    /// 0,0,-1
    /// # b: row,rhs
    /// 0,0
    /// ```
    ///
    /// Indices are zero-based; values use `{:e}` round-trip formatting.
    pub fn write_triplets<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(
            out,
            "# rows={} cols={} nnz={}",
            self.len(),
            self.cols(),
            self.rows.nnz()
        )?;
        writeln!(out, "# A: row,col,value")?;
        for r in 0..self.len() {
            let (idx, val) = self.rows.row(r);
            for (c, v) in idx.iter().zip(val) {
                writeln!(out, "{r},{c},{v:e}")?;
            }
        }
        writeln!(out, "# b: row,rhs")?;
        for (r, b) in self.rhs.iter().enumerate() {
            writeln!(out, "{r},{b:e}")?;
        }
        Ok(())
    }
}

pub fn check_feasible(system: &ConstraintSystem, x: &[f64], tol: f64) -> FeasibilityReport {
    let mut violations = Vec::new();
    let mut max_violation = f64::NEG_INFINITY;
    for r in 0..system.len() {
        let excess = system.rows.row_dot(r, x) - system.rhs[r];
        max_violation = max_violation.max(excess);
        if excess > tol || excess.is_nan() {
            violations.push(Violation {
                row: r,
                tag: system.tags[r],
                excess,
            });
        }
    }
    FeasibilityReport {
        violations,
        max_violation,
    }
}

/// Everything besides the node coordinates that determines the rows.
#[derive(Debug, Clone)]
pub struct SystemOptions {
    pub gradient_box: GradientBox,
    pub upper_bound_v: Option<f64>,
    pub pins: Option<(Dirichlet, BTreeSet<usize>)>,
    pub row_budget: usize,
}

impl SystemOptions {
    pub fn new(gradient_box: GradientBox) -> Self {
        SystemOptions {
            gradient_box,
            upper_bound_v: None,
            pins: None,
            row_budget: DEFAULT_ROW_BUDGET,
        }
    }
}

pub fn assemble(lattice: &Lattice, spec: &ProblemSpec) -> Result<ConstraintSystem> {
    assemble_with_budget(lattice, spec, DEFAULT_ROW_BUDGET)
}

pub fn assemble_with_budget(
    lattice: &Lattice,
    spec: &ProblemSpec,
    row_budget: usize,
) -> Result<ConstraintSystem> {
    spec.validate()?;
    if spec.dim() != lattice.dim() {
        return Err(Error::InvalidInput(
            "problem and lattice dimensions differ".into(),
        ));
    }
    let options = SystemOptions {
        gradient_box: spec.effective_gradient_box(),
        upper_bound_v: spec.upper_bound_v,
        pins: spec
            .dirichlet
            .clone()
            .map(|d| (d, boundary_nodes(lattice))),
        row_budget,
    };
    assemble_nodes(lattice.centers(), lattice.dim(), &options)
}

/// Builds the system for an arbitrary node set (flattened `points`, `dim` per node).
pub fn assemble_nodes(points: &[f64], dim: usize, options: &SystemOptions) -> Result<ConstraintSystem> {
    if dim == 0 || !points.len().is_multiple_of(dim) {
        return Err(Error::InvalidInput("points do not match dimension".into()));
    }
    if options.gradient_box.dim() != dim {
        return Err(Error::InvalidInput("gradient box dimension mismatch".into()));
    }
    let m = points.len() / dim;
    let layout = DecisionLayout::new(m, dim);

    let pin_rows = options.pins.as_ref().map_or(0u128, |(d, nodes)| {
        let per_node = u128::from(d.pin_values) + if d.pin_gradients { dim as u128 } else { 0 };
        2 * per_node * nodes.len() as u128
    });
    let requested = m as u128
        + 2 * (m * dim) as u128
        + (m as u128) * (m as u128).saturating_sub(1)
        + pin_rows
        + options.upper_bound_v.map_or(0, |_| m as u128);
    if requested > options.row_budget as u128 {
        return Err(Error::Capacity {
            what: "constraint rows",
            requested,
            budget: options.row_budget as u128,
        });
    }
    let total = requested as usize;

    let mut rows = SparseRows::new(layout.len());
    rows.row_ptr.reserve(total);
    let mut rhs = Vec::with_capacity(total);
    let mut tags = Vec::with_capacity(total);

    for i in 0..m {
        rows.push_row(&[(layout.v(i), -1.0)]);
        rhs.push(0.0);
        tags.push(RowTag::Nonneg { node: i });
    }
    let q = &options.gradient_box;
    for i in 0..m {
        for axis in 0..dim {
            rows.push_row(&[(layout.d(i, axis), -1.0)]);
            rhs.push(-q.lower[axis]);
            tags.push(RowTag::FeasLower { node: i, axis });
            rows.push_row(&[(layout.d(i, axis), 1.0)]);
            rhs.push(q.upper[axis]);
            tags.push(RowTag::FeasUpper { node: i, axis });
        }
    }

    append_convexity_rows(&mut rows, &mut rhs, &mut tags, points, &layout);

    if let Some((dirichlet, nodes)) = &options.pins {
        for &i in nodes {
            let theta = &points[i * dim..(i + 1) * dim];
            let mut pins: Vec<(usize, usize, f64)> = Vec::new();
            if dirichlet.pin_values {
                pins.push((layout.v(i), 0, dirichlet.profile.value(theta)));
            }
            if dirichlet.pin_gradients {
                for (axis, g) in dirichlet.profile.gradient(theta).into_iter().enumerate() {
                    pins.push((layout.d(i, axis), axis + 1, g));
                }
            }
            for (col, component, target) in pins {
                rows.push_row(&[(col, 1.0)]);
                rhs.push(target + dirichlet.band);
                tags.push(RowTag::Dirichlet { node: i, component, upper: true });
                rows.push_row(&[(col, -1.0)]);
                rhs.push(-target + dirichlet.band);
                tags.push(RowTag::Dirichlet { node: i, component, upper: false });
            }
        }
    }

    if let Some(k) = options.upper_bound_v {
        for i in 0..m {
            rows.push_row(&[(layout.v(i), 1.0)]);
            rhs.push(k);
            tags.push(RowTag::Bound { node: i });
        }
    }

    debug_assert_eq!(rhs.len(), total);
    Ok(ConstraintSystem {
        layout,
        rows,
        rhs,
        tags,
    })
}

/// `v_i − v_j + D_i·(θ_j − θ_i) ≤ 0` for every ordered pair `i ≠ j`.
fn append_convexity_rows(
    rows: &mut SparseRows,
    rhs: &mut Vec<f64>,
    tags: &mut Vec<RowTag>,
    points: &[f64],
    layout: &DecisionLayout,
) {
    let m = layout.node_count;
    let n = layout.dim;
    let width = 2 + n;
    if m < 2 {
        return;
    }
    let pair_rows = m * (m - 1);
    let block = (m - 1) * width;

    let mut indices = vec![0usize; pair_rows * width];
    let mut values = vec![0.0f64; pair_rows * width];
    indices
        .par_chunks_mut(block)
        .zip(values.par_chunks_mut(block))
        .enumerate()
        .for_each(|(i, (idx, val))| {
            let ti = &points[i * n..(i + 1) * n];
            let mut slot = 0;
            for j in (0..m).filter(|&j| j != i) {
                let tj = &points[j * n..(j + 1) * n];
                idx[slot] = layout.v(i);
                val[slot] = 1.0;
                idx[slot + 1] = layout.v(j);
                val[slot + 1] = -1.0;
                for axis in 0..n {
                    idx[slot + 2 + axis] = layout.d(i, axis);
                    val[slot + 2 + axis] = tj[axis] - ti[axis];
                }
                slot += width;
            }
        });

    let base = rows.indices.len();
    rows.indices.extend_from_slice(&indices);
    rows.values.extend_from_slice(&values);
    rows.row_ptr
        .extend((1..=pair_rows).map(|r| base + r * width));
    rhs.extend(std::iter::repeat_n(0.0, pair_rows));
    for i in 0..m {
        tags.extend((0..m).filter(|&j| j != i).map(|j| RowTag::Convexity { i, j }));
    }
}

/// Samples `v(θ) = c‖θ − center‖² + g·(θ − center) + offset` and its exact
/// gradient at every node, laid out as a decision vector.
pub fn sample_quadratic(
    points: &[f64],
    dim: usize,
    center: &[f64],
    curvature: f64,
    linear: &[f64],
    offset: f64,
) -> Vec<f64> {
    let m = points.len() / dim;
    let layout = DecisionLayout::new(m, dim);
    let mut x = vec![0.0; layout.len()];
    for i in 0..m {
        let theta = &points[i * dim..(i + 1) * dim];
        let mut value = offset;
        for axis in 0..dim {
            let d = theta[axis] - center[axis];
            value += curvature * d * d + linear[axis] * d;
            x[layout.d(i, axis)] = 2.0 * curvature * d + linear[axis];
        }
        x[layout.v(i)] = value;
    }
    x
}

/// Minimum slack the constructed start leaves on the non-negativity rows.
const START_VALUE_FLOOR: f64 = 1e-2;

/// A strictly convex quadratic sampled at the nodes, with every slope strictly
/// inside the effective gradient box and every value strictly positive.
///
/// Boundary pins are not honored here; see `solver::feasible_start`.
pub fn strictly_feasible_start(lattice: &Lattice, spec: &ProblemSpec) -> Result<Vec<f64>> {
    start_for_nodes(
        lattice.centers(),
        lattice.dim(),
        &spec.effective_gradient_box(),
        lattice.domain().a,
        lattice.domain().b,
        spec.upper_bound_v,
    )
}

/// Same construction for arbitrary nodes (flattened, `dim` per node) in the
/// cube `[a, b]^dim`.
pub fn start_for_nodes(
    points: &[f64],
    dim: usize,
    q: &GradientBox,
    a: f64,
    b: f64,
    upper_bound_v: Option<f64>,
) -> Result<Vec<f64>> {
    if !q.has_interior() {
        return Err(Error::Infeasible(
            "gradient set has empty interior".into(),
        ));
    }
    if q.lower.iter().chain(&q.upper).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("gradient set must be bounded".into()));
    }
    let mid: Vec<f64> = q.lower.iter().zip(&q.upper).map(|(l, u)| 0.5 * (l + u)).collect();
    let radius = q
        .lower
        .iter()
        .zip(&q.upper)
        .map(|(l, u)| 0.5 * (u - l))
        .fold(f64::INFINITY, f64::min);
    let width = b - a;
    // slopes span mid ± c·width, kept at half the box radius
    let curvature = 0.5 * radius / width;
    let center = vec![0.5 * (a + b); dim];

    let mut x = sample_quadratic(points, dim, &center, curvature, &mid, 0.0);
    let m = points.len() / dim;
    let lowest = x[..m].iter().copied().fold(f64::INFINITY, f64::min);
    let shift = START_VALUE_FLOOR - lowest;
    for v in &mut x[..m] {
        *v += shift;
    }
    if let Some(k) = upper_bound_v {
        let highest = x[..m].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if highest >= k {
            return Err(Error::Infeasible(format!(
                "quadratic start reaches {highest} which exceeds the value bound {k}"
            )));
        }
    }
    Ok(x)
}
