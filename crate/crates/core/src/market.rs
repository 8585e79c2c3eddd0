//! Deterministic piecewise-constant market coefficients and the tail functionals
//! `v_phi(t1, t2) = ∫ |phi|^2 ds` and `y_phi(t1, t2) = ∫ phi·lambda ds`.
//!
//! Every coefficient is constant on the left-closed, right-open cells of a
//! [`TimeGrid`], so all integrals below are exact sums over (partial) cells.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative floor on the smallest singular value of sigma.
pub const SIGMA_SV_FLOOR: f64 = 1e-10;

/// Strictly increasing nodes `0 = t_0 < ... < t_N = T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    nodes: Vec<f64>,
}

impl TimeGrid {
    pub fn uniform(horizon: f64, cells: usize) -> Result<Self> {
        if cells == 0 {
            return Err(Error::InvalidGrid("at least one cell is required".into()));
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::InvalidGrid(format!("horizon must be positive, got {horizon}")));
        }
        let mut nodes: Vec<f64> = (0..=cells)
            .map(|i| horizon * (i as f64) / (cells as f64))
            .collect();
        nodes[cells] = horizon;
        Self::from_nodes(nodes)
    }

    pub fn from_nodes(nodes: Vec<f64>) -> Result<Self> {
        if nodes.len() < 2 {
            return Err(Error::InvalidGrid("need at least two nodes".into()));
        }
        if nodes[0] != 0.0 {
            return Err(Error::InvalidGrid(format!("first node must be 0, got {}", nodes[0])));
        }
        for (i, w) in nodes.windows(2).enumerate() {
            if !(w[1].is_finite() && w[1] > w[0]) {
                return Err(Error::InvalidGrid(format!(
                    "nodes must be strictly increasing (node {} = {}, node {} = {})",
                    i,
                    w[0],
                    i + 1,
                    w[1]
                )));
            }
        }
        Ok(Self { nodes })
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn horizon(&self) -> f64 {
        self.nodes[self.nodes.len() - 1]
    }

    pub fn n_cells(&self) -> usize {
        self.nodes.len() - 1
    }

    #[inline]
    pub fn dt(&self, cell: usize) -> f64 {
        self.nodes[cell + 1] - self.nodes[cell]
    }

    #[inline]
    pub fn node(&self, i: usize) -> f64 {
        self.nodes[i]
    }

    /// Cell containing `t` under the right-continuous convention; `T` maps to the last cell.
    pub fn cell_of(&self, t: f64) -> usize {
        let idx = self.nodes.partition_point(|&n| n <= t);
        idx.saturating_sub(1).min(self.n_cells() - 1)
    }

    /// Index of the node equal to `t`, if any.
    pub fn node_index(&self, t: f64) -> Option<usize> {
        self.nodes
            .binary_search_by(|n| n.partial_cmp(&t).unwrap_or(std::cmp::Ordering::Less))
            .ok()
    }

    /// Splits every cell into `factor` equal sub-cells. Original nodes are kept bit-exact.
    pub fn refine(&self, factor: usize) -> Self {
        let factor = factor.max(1);
        let mut nodes = Vec::with_capacity(self.n_cells() * factor + 1);
        for i in 0..self.n_cells() {
            let (a, b) = (self.nodes[i], self.nodes[i + 1]);
            for k in 0..factor {
                nodes.push(a + (b - a) * (k as f64) / (factor as f64));
            }
        }
        nodes.push(self.horizon());
        Self { nodes }
    }
}

/// A per-cell vector-valued path on a [`TimeGrid`], stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPath {
    dim: usize,
    values: Vec<f64>,
}

impl GridPath {
    pub fn zeros(cells: usize, dim: usize) -> Self {
        Self {
            dim,
            values: vec![0.0; cells * dim],
        }
    }

    pub fn constant(cells: usize, value: &[f64]) -> Self {
        let mut values = Vec::with_capacity(cells * value.len());
        for _ in 0..cells {
            values.extend_from_slice(value);
        }
        Self {
            dim: value.len(),
            values,
        }
    }

    pub fn from_flat(dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 || values.len() % dim != 0 {
            return Err(Error::DimensionMismatch(format!(
                "{} values cannot be split into cells of dimension {dim}",
                values.len()
            )));
        }
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "path entry {bad} is not finite"
            )));
        }
        Ok(Self { dim, values })
    }

    pub fn from_cells(cells: &[Vec<f64>]) -> Result<Self> {
        let dim = cells.first().map(Vec::len).unwrap_or(0);
        if cells.iter().any(|c| c.len() != dim) {
            return Err(Error::DimensionMismatch(
                "cells of a path must share one dimension".into(),
            ));
        }
        Self::from_flat(dim, cells.concat())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_cells(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.values.len() / self.dim
        }
    }

    #[inline]
    pub fn cell(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    #[inline]
    pub fn cell_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            dim: self.dim,
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }

    /// Repeats every cell `factor` times, matching [`TimeGrid::refine`].
    pub fn refine(&self, factor: usize) -> Self {
        let mut values = Vec::with_capacity(self.values.len() * factor);
        for i in 0..self.n_cells() {
            for _ in 0..factor {
                values.extend_from_slice(self.cell(i));
            }
        }
        Self {
            dim: self.dim,
            values,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

/// Backward tail tables `v_a(t_i)` and `y_a(t_i)` at every node, zero at `T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailTables {
    pub v: Vec<f64>,
    pub y: Vec<f64>,
}

/// Market with zero interest rate and piecewise-constant `mu`, `sigma`.
#[derive(Debug, Clone)]
pub struct MarketModel {
    grid: TimeGrid,
    dim: usize,
    mu: GridPath,
    sigma: Vec<DMatrix<f64>>,
    lambda: GridPath,
    cum_lambda_sq: Vec<f64>,
}

/// Builds the market and solves `sigma * lambda = mu` on every cell.
pub fn build_market(
    grid: TimeGrid,
    mu: &[Vec<f64>],
    sigma: Vec<DMatrix<f64>>,
) -> Result<MarketModel> {
    let n = grid.n_cells();
    if mu.len() != n || sigma.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "grid has {n} cells but got {} drift and {} volatility entries",
            mu.len(),
            sigma.len()
        )));
    }
    let dim = mu[0].len();
    if dim == 0 {
        return Err(Error::DimensionMismatch("dimension must be at least 1".into()));
    }
    let mut lambda = Vec::with_capacity(n * dim);
    for (cell, (m, s)) in mu.iter().zip(&sigma).enumerate() {
        if m.len() != dim || s.nrows() != dim || s.ncols() != dim {
            return Err(Error::DimensionMismatch(format!(
                "cell {cell}: drift has length {}, sigma is {}x{}, expected {dim}",
                m.len(),
                s.nrows(),
                s.ncols()
            )));
        }
        if m.iter().chain(s.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "cell {cell}: non-finite market coefficient"
            )));
        }
        let sv = s.clone().singular_values();
        let (smin, smax) = sv
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        if !(smax > 0.0) || smin < SIGMA_SV_FLOOR * smax {
            return Err(Error::SingularSigma {
                cell,
                condition: if smin > 0.0 { smax / smin } else { f64::INFINITY },
            });
        }
        let rhs = DVector::from_column_slice(m);
        let sol = s.clone().lu().solve(&rhs).ok_or(Error::SingularSigma {
            cell,
            condition: smax / smin,
        })?;
        lambda.extend(sol.iter());
    }
    let lambda = GridPath { dim, values: lambda };
    let mut cum_lambda_sq = Vec::with_capacity(n + 1);
    cum_lambda_sq.push(0.0);
    let mut acc = 0.0;
    for i in 0..n {
        acc += norm_sq(lambda.cell(i)) * grid.dt(i);
        cum_lambda_sq.push(acc);
    }
    let mu = GridPath::from_cells(mu)?;
    Ok(MarketModel {
        grid,
        dim,
        mu,
        sigma,
        lambda,
        cum_lambda_sq,
    })
}

impl MarketModel {
    /// Constant coefficients on every cell of `grid`.
    pub fn constant(grid: TimeGrid, mu: &[f64], sigma: DMatrix<f64>) -> Result<Self> {
        let n = grid.n_cells();
        build_market(grid, &vec![mu.to_vec(); n], vec![sigma; n])
    }

    /// One-asset market with scalar `mu` and `sigma` per cell.
    pub fn scalar(grid: TimeGrid, mu: &[f64], sigma: &[f64]) -> Result<Self> {
        let mu: Vec<Vec<f64>> = mu.iter().map(|&m| vec![m]).collect();
        let sigma = sigma
            .iter()
            .map(|&s| DMatrix::from_element(1, 1, s))
            .collect();
        build_market(grid, &mu, sigma)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_cells(&self) -> usize {
        self.grid.n_cells()
    }

    pub fn horizon(&self) -> f64 {
        self.grid.horizon()
    }

    pub fn mu(&self) -> &GridPath {
        &self.mu
    }

    pub fn sigma(&self, cell: usize) -> &DMatrix<f64> {
        &self.sigma[cell]
    }

    pub fn lambda(&self) -> &GridPath {
        &self.lambda
    }

    #[inline]
    pub fn lambda_at(&self, cell: usize) -> &[f64] {
        self.lambda.cell(cell)
    }

    /// Prefix table `∫_0^{t_i} |lambda|^2 ds`.
    pub fn cum_lambda_sq(&self) -> &[f64] {
        &self.cum_lambda_sq
    }

    /// `v_lambda(0) = ∫_0^T |lambda|^2 ds`.
    pub fn v_lambda_total(&self) -> f64 {
        self.cum_lambda_sq[self.n_cells()]
    }

    pub fn max_abs_lambda(&self) -> f64 {
        (0..self.n_cells())
            .map(|i| norm_sq(self.lambda_at(i)).sqrt())
            .fold(0.0, f64::max)
    }

    /// Same coefficients on a grid with every cell split `factor` times.
    pub fn refine(&self, factor: usize) -> MarketModel {
        let factor = factor.max(1);
        let grid = self.grid.refine(factor);
        let mu = self.mu.refine(factor);
        let lambda = self.lambda.refine(factor);
        let sigma = self
            .sigma
            .iter()
            .flat_map(|s| std::iter::repeat_n(s.clone(), factor))
            .collect();
        let mut cum_lambda_sq = Vec::with_capacity(grid.n_cells() + 1);
        cum_lambda_sq.push(0.0);
        let mut acc = 0.0;
        for i in 0..grid.n_cells() {
            acc += norm_sq(lambda.cell(i)) * grid.dt(i);
            cum_lambda_sq.push(acc);
        }
        MarketModel {
            grid,
            dim: self.dim,
            mu,
            sigma,
            lambda,
            cum_lambda_sq,
        }
    }

    fn check_range(&self, t1: f64, t2: f64) -> Result<()> {
        let horizon = self.horizon();
        if !(0.0 <= t1 && t1 <= t2 && t2 <= horizon) {
            return Err(Error::OutOfRange { t1, t2, horizon });
        }
        Ok(())
    }

    fn check_path(&self, phi: &GridPath) -> Result<()> {
        if phi.n_cells() != self.n_cells() || phi.dim() != self.dim {
            return Err(Error::DimensionMismatch(format!(
                "path has {} cells of dimension {}, market has {} cells of dimension {}",
                phi.n_cells(),
                phi.dim(),
                self.n_cells(),
                self.dim
            )));
        }
        Ok(())
    }

    /// Exact integral of a per-cell constant over `[t1, t2]`, summed from the last cell backward.
    pub(crate) fn integrate_cells(&self, t1: f64, t2: f64, mut f: impl FnMut(usize) -> f64) -> f64 {
        if t2 <= t1 {
            return 0.0;
        }
        let first = self.grid.cell_of(t1);
        let last = self.grid.cell_of(t2);
        let mut acc = 0.0;
        for i in (first..=last).rev() {
            let lo = self.grid.node(i).max(t1);
            let hi = self.grid.node(i + 1).min(t2);
            if hi > lo {
                acc += f(i) * (hi - lo);
            }
        }
        acc
    }

    pub fn v_norm(&self, phi: &GridPath, t1: f64, t2: f64) -> Result<f64> {
        self.check_range(t1, t2)?;
        self.check_path(phi)?;
        Ok(self.integrate_cells(t1, t2, |i| norm_sq(phi.cell(i))))
    }

    pub fn y_pair(&self, phi: &GridPath, t1: f64, t2: f64) -> Result<f64> {
        self.check_range(t1, t2)?;
        self.check_path(phi)?;
        Ok(self.integrate_cells(t1, t2, |i| dot(phi.cell(i), self.lambda_at(i))))
    }

    /// `v_lambda(t1, t2)`.
    pub fn v_lambda(&self, t1: f64, t2: f64) -> Result<f64> {
        self.check_range(t1, t2)?;
        Ok(self.integrate_cells(t1, t2, |i| norm_sq(self.lambda_at(i))))
    }

    pub fn tail_tables(&self, a: &GridPath) -> Result<TailTables> {
        self.check_path(a)?;
        let n = self.n_cells();
        let mut v = vec![0.0; n + 1];
        let mut y = vec![0.0; n + 1];
        for i in (0..n).rev() {
            let dt = self.grid.dt(i);
            let ai = a.cell(i);
            v[i] = v[i + 1] + norm_sq(ai) * dt;
            y[i] = y[i + 1] + dot(ai, self.lambda_at(i)) * dt;
        }
        Ok(TailTables { v, y })
    }

    /// `pi = (sigma^T)^{-1} a` on one cell; `None` when sigma^T is below the conditioning floor.
    pub fn exposure_to_weights(&self, cell: usize, a: &[f64]) -> Option<Vec<f64>> {
        let st = self.sigma[cell].transpose();
        let sv = st.clone().singular_values();
        let (smin, smax) = sv
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        if !(smax > 0.0) || smin < SIGMA_SV_FLOOR * smax {
            return None;
        }
        st.lu()
            .solve(&DVector::from_column_slice(a))
            .map(|v| v.iter().copied().collect())
    }

    /// `a = sigma^T pi` on one cell.
    pub fn weights_to_exposure(&self, cell: usize, pi: &[f64]) -> Vec<f64> {
        let st = self.sigma[cell].transpose();
        (st * DVector::from_column_slice(pi)).iter().copied().collect()
    }
}
