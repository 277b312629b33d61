//! Uniform tensor grids on an interval or rectangle with homogeneous Neumann
//! boundaries, plus the discrete norms of `H = L²(D)`, `V = H¹(D)` and `L⁴(D)`.
//!
//! Nodes are vertex-centred. Each node owns a dual cell whose measure is its
//! trapezoidal quadrature weight, so boundary nodes carry half (corner nodes a
//! quarter) of an interior weight. The discrete gradient lives on grid edges:
//! `‖∇a‖²` is the sum over edges of `(a_j − a_i)² · face / h`, which is exactly
//! the quadratic form of the unit-conductivity Neumann Laplacian used by
//! [`crate::operator`].

use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};

/// Largest node count accepted; the operator is dense.
pub const MAX_NODES: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Grid {
    dimension: usize,
    extent: [f64; 2],
    nodes: [usize; 2],
    spacing: [f64; 2],
    #[serde(skip)]
    weights: Vec<f64>,
}

/// One grid edge between neighbouring nodes `a` and `b` along `axis`.
#[derive(Debug, Clone, Copy)]
pub struct Edge {
    pub a: usize,
    pub b: usize,
    pub axis: usize,
    /// Length of the dual-cell face crossed by the edge (1 in 1-D).
    pub face: f64,
}

impl Grid {
    /// Builds a grid with the same node count along every axis.
    pub fn new(dimension: usize, extent: &[f64], nodes_per_axis: usize) -> Result<Self> {
        Self::with_nodes(dimension, extent, &vec![nodes_per_axis; dimension.max(1)])
    }

    /// Builds a grid with a per-axis node count.
    pub fn with_nodes(dimension: usize, extent: &[f64], nodes: &[usize]) -> Result<Self> {
        if dimension != 1 && dimension != 2 {
            return Err(Error::invalid(format!("dimension must be 1 or 2, got {dimension}")));
        }
        if extent.len() != dimension || nodes.len() != dimension {
            return Err(Error::invalid(format!(
                "expected {dimension} extents and node counts, got {} and {}",
                extent.len(),
                nodes.len()
            )));
        }
        if let Some(bad) = extent.iter().find(|&&l| !(l > 0.0 && l.is_finite())) {
            return Err(Error::invalid(format!("extent must be positive, got {bad}")));
        }
        if let Some(bad) = nodes.iter().find(|&&n| n < 3) {
            return Err(Error::invalid(format!("need at least 3 nodes per axis, got {bad}")));
        }
        let total: usize = nodes.iter().product();
        if total > MAX_NODES {
            return Err(Error::invalid(format!(
                "{total} nodes exceeds the dense-operator cap of {MAX_NODES}"
            )));
        }

        let mut ext = [1.0; 2];
        let mut n = [1usize; 2];
        let mut h = [1.0; 2];
        for d in 0..dimension {
            ext[d] = extent[d];
            n[d] = nodes[d];
            h[d] = extent[d] / (nodes[d] - 1) as f64;
        }

        let axis_weights = |d: usize| -> Vec<f64> {
            if d >= dimension {
                return vec![1.0];
            }
            (0..n[d])
                .map(|i| if i == 0 || i == n[d] - 1 { 0.5 * h[d] } else { h[d] })
                .collect()
        };
        let wx = axis_weights(0);
        let wy = axis_weights(1);
        let mut weights = Vec::with_capacity(total);
        for y in &wy {
            for x in &wx {
                weights.push(x * y);
            }
        }

        Ok(Grid {
            dimension,
            extent: ext,
            nodes: n,
            spacing: h,
            weights,
        })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn extent(&self) -> &[f64] {
        &self.extent[..self.dimension]
    }

    pub fn nodes_per_axis(&self) -> &[usize] {
        &self.nodes[..self.dimension]
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing[..self.dimension]
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Domain measure `|D|`.
    pub fn measure(&self) -> f64 {
        self.extent().iter().product()
    }

    /// Multi-index `(i, j)` of a flat node index; `j = 0` in 1-D.
    pub fn index_of(&self, node: usize) -> (usize, usize) {
        (node % self.nodes[0], node / self.nodes[0])
    }

    pub fn coords(&self, node: usize) -> [f64; 2] {
        let (i, j) = self.index_of(node);
        let y = if self.dimension == 2 { j as f64 * self.spacing[1] } else { 0.0 };
        [i as f64 * self.spacing[0], y]
    }

    /// All edges of the grid. Faces on the outer boundary are halved.
    pub fn edges(&self) -> Vec<Edge> {
        let [nx, ny] = self.nodes;
        let mut out = Vec::new();
        let half_if_boundary = |k: usize, n: usize, h: f64| {
            if k == 0 || k == n - 1 {
                0.5 * h
            } else {
                h
            }
        };
        for j in 0..ny {
            let face = if self.dimension == 2 {
                half_if_boundary(j, ny, self.spacing[1])
            } else {
                1.0
            };
            for i in 0..nx - 1 {
                let a = i + nx * j;
                out.push(Edge { a, b: a + 1, axis: 0, face });
            }
        }
        if self.dimension == 2 {
            for j in 0..ny - 1 {
                for i in 0..nx {
                    let a = i + nx * j;
                    let face = half_if_boundary(i, nx, self.spacing[0]);
                    out.push(Edge { a, b: a + nx, axis: 1, face });
                }
            }
        }
        out
    }

    /// Samples a function of the node coordinates.
    pub fn sample(self: &Arc<Self>, f: impl Fn(f64, f64) -> f64) -> Field {
        let values = (0..self.len())
            .map(|k| {
                let [x, y] = self.coords(k);
                f(x, y)
            })
            .collect();
        Field { grid: Arc::clone(self), values }
    }

    pub fn inner(&self, a: &[f64], b: &[f64]) -> f64 {
        self.weights
            .iter()
            .zip(a.iter().zip(b))
            .map(|(w, (x, y))| w * x * y)
            .sum()
    }

    pub fn norm_sq(&self, a: &[f64]) -> f64 {
        self.inner(a, a)
    }

    /// Discrete `‖∇a‖²_H` on grid edges.
    pub fn gradient_sq(&self, a: &[f64]) -> f64 {
        let h = self.spacing;
        let [nx, ny] = self.nodes;
        let mut total = 0.0;
        for j in 0..ny {
            let face = if self.dimension == 2 {
                if j == 0 || j == ny - 1 {
                    0.5 * h[1]
                } else {
                    h[1]
                }
            } else {
                1.0
            };
            let row = &a[nx * j..nx * (j + 1)];
            let s: f64 = row.windows(2).map(|p| (p[1] - p[0]) * (p[1] - p[0])).sum();
            total += s * face / h[0];
        }
        if self.dimension == 2 {
            for j in 0..ny - 1 {
                for i in 0..nx {
                    let face = if i == 0 || i == nx - 1 { 0.5 * h[0] } else { h[0] };
                    let d = a[i + nx * (j + 1)] - a[i + nx * j];
                    total += d * d * face / h[1];
                }
            }
        }
        total
    }

    /// `Σ wᵢ aᵢ⁴`.
    pub fn l4_pow4(&self, a: &[f64]) -> f64 {
        self.weights
            .iter()
            .zip(a)
            .map(|(w, x)| {
                let x2 = x * x;
                w * x2 * x2
            })
            .sum()
    }

    pub fn mean(&self, a: &[f64]) -> f64 {
        self.weights.iter().zip(a).map(|(w, x)| w * x).sum::<f64>() / self.measure()
    }

    /// Same shape (dimension, extent and node counts).
    pub fn same_shape(&self, other: &Grid) -> bool {
        self.dimension == other.dimension && self.nodes == other.nodes && self.extent == other.extent
    }
}

/// Convenience wrapper matching the `make_grid` operation.
pub fn make_grid(dimension: usize, extent: &[f64], nodes_per_axis: usize) -> Result<Arc<Grid>> {
    Grid::new(dimension, extent, nodes_per_axis).map(Arc::new)
}

/// A nodal scalar function on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    grid: Arc<Grid>,
    values: Vec<f64>,
}

impl Field {
    pub fn new(grid: Arc<Grid>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::invalid(format!(
                "field has {} values but grid has {} nodes",
                values.len(),
                grid.len()
            )));
        }
        Ok(Field { grid, values })
    }

    pub fn zeros(grid: &Arc<Grid>) -> Self {
        Self::constant(grid, 0.0)
    }

    pub fn constant(grid: &Arc<Grid>, c: f64) -> Self {
        Field {
            grid: Arc::clone(grid),
            values: vec![c; grid.len()],
        }
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field {
        Field {
            grid: Arc::clone(&self.grid),
            values: self.values.iter().map(|&x| f(x)).collect(),
        }
    }

    pub(crate) fn check_same_grid(&self, other: &Field) -> Result<()> {
        if Arc::ptr_eq(&self.grid, &other.grid) || self.grid.same_shape(&other.grid) {
            Ok(())
        } else {
            Err(Error::GridMismatch)
        }
    }

    pub fn norm_h_sq(&self) -> f64 {
        self.grid.norm_sq(&self.values)
    }

    pub fn mean(&self) -> f64 {
        self.grid.mean(&self.values)
    }
}

/// Quadrature-weighted `(a, b)_H`.
pub fn inner_product_h(a: &Field, b: &Field) -> Result<f64> {
    a.check_same_grid(b)?;
    Ok(a.grid.inner(&a.values, &b.values))
}

/// `‖a‖²_V = ‖a‖²_H + ‖∇a‖²_H`.
pub fn norm_v_sq(a: &Field) -> f64 {
    a.grid.norm_sq(&a.values) + a.grid.gradient_sq(&a.values)
}

/// `(Σ wᵢ aᵢ⁴)^{1/4}`.
pub fn norm_l4(a: &Field) -> f64 {
    a.grid.l4_pow4(&a.values).powf(0.25)
}

/// Subtracts the weighted mean, projecting onto `H₀`.
pub fn mean_zero_project(a: &Field) -> Field {
    let m = a.mean();
    a.map(|x| x - m)
}
