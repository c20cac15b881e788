//! Uniform cell-centered discretization of a box domain `[a, b]^n`.
//!
//! Nodes are the centers of the `k^n` equal cells, indexed row-major over
//! their multi-index `(m_1, ..., m_n)` with the last axis varying fastest.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default cap on `k^n`.
pub const DEFAULT_NODE_BUDGET: usize = 100_000;

/// Largest supported dimension.
pub const MAX_DIM: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Domain {
    pub a: f64,
    pub b: f64,
    pub n: usize,
}

impl Domain {
    pub fn new(a: f64, b: f64, n: usize) -> Result<Self> {
        let domain = Domain { a, b, n };
        domain.validate()?;
        Ok(domain)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a.is_finite() && self.b.is_finite() && self.a < self.b) {
            return Err(Error::InvalidInput(format!(
                "domain bounds must satisfy a < b, got [{}, {}]",
                self.a, self.b
            )));
        }
        if self.n == 0 || self.n > MAX_DIM {
            return Err(Error::InvalidInput(format!(
                "dimension must be in 1..={MAX_DIM}, got {}",
                self.n
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.b - self.a
    }

    pub fn volume(&self) -> f64 {
        self.width().powi(self.n as i32)
    }

    /// Whether `theta` lies in the closed box, up to `tol`.
    pub fn contains(&self, theta: &[f64], tol: f64) -> bool {
        theta.len() == self.n
            && theta
                .iter()
                .all(|&t| t >= self.a - tol && t <= self.b + tol)
    }
}

#[derive(Debug, Clone)]
pub struct Lattice {
    domain: Domain,
    k: usize,
    centers: Vec<f64>,
    cell_volume: f64,
}

/// Builds the lattice with the default node budget.
pub fn build_lattice(domain: Domain, k: usize) -> Result<Lattice> {
    build_lattice_with_budget(domain, k, DEFAULT_NODE_BUDGET)
}

pub fn build_lattice_with_budget(domain: Domain, k: usize, node_budget: usize) -> Result<Lattice> {
    domain.validate()?;
    if k == 0 {
        return Err(Error::InvalidInput("k must be at least 1".into()));
    }
    let requested = (k as u128).pow(domain.n as u32);
    if requested > node_budget as u128 {
        return Err(Error::Capacity {
            what: "lattice nodes",
            requested,
            budget: node_budget as u128,
        });
    }
    let m = requested as usize;
    let n = domain.n;
    let h = domain.width() / k as f64;

    let mut centers = Vec::with_capacity(m * n);
    let mut multi = vec![0usize; n];
    for idx in 0..m {
        unflatten_into(idx, k, &mut multi);
        centers.extend(multi.iter().map(|&mj| domain.a + (mj as f64 + 0.5) * h));
    }

    Ok(Lattice {
        domain,
        k,
        centers,
        cell_volume: h.powi(n as i32),
    })
}

fn unflatten_into(mut idx: usize, k: usize, out: &mut [usize]) {
    for slot in out.iter_mut().rev() {
        *slot = idx % k;
        idx /= k;
    }
}

impl Lattice {
    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.domain.n
    }

    pub fn len(&self) -> usize {
        self.centers.len() / self.domain.n
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    /// Cell side length `(b - a) / k`.
    pub fn spacing(&self) -> f64 {
        self.domain.width() / self.k as f64
    }

    pub fn cell_volume(&self) -> f64 {
        self.cell_volume
    }

    pub fn center(&self, i: usize) -> &[f64] {
        let n = self.domain.n;
        &self.centers[i * n..(i + 1) * n]
    }

    /// All centers, flattened node-major.
    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn multi_index(&self, i: usize) -> Vec<usize> {
        let mut out = vec![0; self.domain.n];
        unflatten_into(i, self.k, &mut out);
        out
    }

    pub fn flat_index(&self, multi: &[usize]) -> Option<usize> {
        if multi.len() != self.domain.n || multi.iter().any(|&m| m >= self.k) {
            return None;
        }
        Some(multi.iter().fold(0, |acc, &m| acc * self.k + m))
    }

    /// Index of the cell containing `theta`, clamping points outside the box
    /// to the nearest cell.
    pub fn locate(&self, theta: &[f64]) -> usize {
        let h = self.spacing();
        theta.iter().fold(0, |acc, &t| {
            let raw = ((t - self.domain.a) / h).floor();
            let m = raw.clamp(0.0, (self.k - 1) as f64) as usize;
            acc * self.k + m
        })
    }
}

/// Nodes whose multi-index touches the outer layer of cells.
pub fn boundary_nodes(lattice: &Lattice) -> BTreeSet<usize> {
    let last = lattice.k - 1;
    (0..lattice.len())
        .filter(|&i| {
            lattice
                .multi_index(i)
                .iter()
                .any(|&m| m == 0 || m == last)
        })
        .collect()
}
