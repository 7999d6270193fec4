//! Uniform time grids and sampled (vector-valued) functions on them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeGrid {
    pub horizon: f64,
    pub n_steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::InvalidGrid(format!("horizon must be > 0, got {horizon}")));
        }
        if n_steps == 0 {
            return Err(Error::InvalidGrid("n_steps must be positive".into()));
        }
        Ok(Self { horizon, n_steps })
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    pub fn n_nodes(&self) -> usize {
        self.n_steps + 1
    }

    /// Node `i`; the last node is exactly the horizon.
    pub fn t(&self, i: usize) -> f64 {
        if i == self.n_steps {
            self.horizon
        } else {
            i as f64 * self.horizon / self.n_steps as f64
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|i| self.t(i)).collect()
    }

    /// Same horizon, `n_steps / factor` steps.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || !self.n_steps.is_multiple_of(factor) {
            return Err(Error::InvalidGrid(format!(
                "cannot coarsen {} steps by {factor}",
                self.n_steps
            )));
        }
        Self::new(self.horizon, self.n_steps / factor)
    }

    pub fn refine(&self, factor: usize) -> Self {
        Self { horizon: self.horizon, n_steps: self.n_steps * factor }
    }

    /// Index of the node equal to `t` (within 1e-9 dt), if any.
    pub fn node_index(&self, t: f64) -> Option<usize> {
        let x = t / self.dt();
        let i = x.round();
        if i < 0.0 || i as usize > self.n_steps || (x - i).abs() > 1e-9 {
            None
        } else {
            Some(i as usize)
        }
    }

    /// Trapezoid weights.
    pub fn trapezoid_weights(&self) -> Vec<f64> {
        let dt = self.dt();
        let mut w = vec![dt; self.n_nodes()];
        w[0] = 0.5 * dt;
        w[self.n_steps] = 0.5 * dt;
        w
    }
}

/// Samples of an R^d-valued function at the nodes of a grid, stored node-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    grid: TimeGrid,
    dim: usize,
    values: Vec<f64>,
}

impl GridFunction {
    pub fn new(grid: TimeGrid, dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Dimension("dim must be >= 1".into()));
        }
        if values.len() != grid.n_nodes() * dim {
            return Err(Error::Dimension(format!(
                "expected {} values ({} nodes x {dim}), got {}",
                grid.n_nodes() * dim,
                grid.n_nodes(),
                values.len()
            )));
        }
        Ok(Self { grid, dim, values })
    }

    pub fn zeros(grid: TimeGrid, dim: usize) -> Self {
        Self { grid, dim, values: vec![0.0; grid.n_nodes() * dim] }
    }

    pub fn constant(grid: TimeGrid, value: &[f64]) -> Self {
        let mut values = Vec::with_capacity(grid.n_nodes() * value.len());
        for _ in 0..grid.n_nodes() {
            values.extend_from_slice(value);
        }
        Self { grid, dim: value.len(), values }
    }

    pub fn scalar(grid: TimeGrid, values: Vec<f64>) -> Result<Self> {
        Self::new(grid, 1, values)
    }

    pub fn from_fn(grid: TimeGrid, f: impl Fn(f64) -> f64) -> Self {
        Self { grid, dim: 1, values: grid.nodes().into_iter().map(f).collect() }
    }

    pub fn from_fn_vec(grid: TimeGrid, dim: usize, f: impl Fn(f64, &mut [f64])) -> Self {
        let mut values = vec![0.0; grid.n_nodes() * dim];
        for (i, chunk) in values.chunks_mut(dim).enumerate() {
            f(grid.t(i), chunk);
        }
        Self { grid, dim, values }
    }

    /// Stack scalar functions on the same grid as components.
    pub fn stack(parts: &[&GridFunction]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Dimension("nothing to stack".into()))?;
        let grid = first.grid;
        let dim: usize = parts.iter().map(|p| p.dim).sum();
        let mut values = Vec::with_capacity(grid.n_nodes() * dim);
        for i in 0..grid.n_nodes() {
            for p in parts {
                if p.grid != grid {
                    return Err(Error::Dimension("stacked functions live on different grids".into()));
                }
                values.extend_from_slice(p.at(i));
            }
        }
        Self::new(grid, dim, values)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.grid.n_nodes()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn at(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn at_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn get(&self, i: usize, c: usize) -> f64 {
        self.values[i * self.dim + c]
    }

    pub fn set(&mut self, i: usize, c: usize, v: f64) {
        self.values[i * self.dim + c] = v;
    }

    pub fn component(&self, c: usize) -> GridFunction {
        let values = (0..self.len()).map(|i| self.get(i, c)).collect();
        GridFunction { grid: self.grid, dim: 1, values }
    }

    pub fn last(&self) -> &[f64] {
        self.at(self.grid.n_steps)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> GridFunction {
        GridFunction { grid: self.grid, dim: self.dim, values: self.values.iter().map(|&x| f(x)).collect() }
    }

    pub fn scale(&self, a: f64) -> GridFunction {
        self.map(|x| a * x)
    }

    pub fn add_scaled(&self, a: f64, other: &GridFunction) -> Result<GridFunction> {
        self.check_same_shape(other)?;
        let values = self.values.iter().zip(&other.values).map(|(x, y)| x + a * y).collect();
        Ok(GridFunction { grid: self.grid, dim: self.dim, values })
    }

    /// Sup-norm distance over nodes `skip..`.
    pub fn sup_distance(&self, other: &GridFunction, skip: usize) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self.values[skip * self.dim..]
            .iter()
            .zip(&other.values[skip * self.dim..])
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max))
    }

    /// Resample onto a grid whose step count divides this one's.
    pub fn subsample(&self, factor: usize) -> Result<GridFunction> {
        let grid = self.grid.coarsen(factor)?;
        let mut values = Vec::with_capacity(grid.n_nodes() * self.dim);
        for i in 0..grid.n_nodes() {
            values.extend_from_slice(self.at(i * factor));
        }
        GridFunction::new(grid, self.dim, values)
    }

    fn check_same_shape(&self, other: &GridFunction) -> Result<()> {
        if self.grid != other.grid || self.dim != other.dim {
            return Err(Error::Dimension("grid functions have different shapes".into()));
        }
        Ok(())
    }
}
