//! Metric bird's-eye-view grids.
//!
//! Cell `(zi, xi)` covers `z ∈ z_min + [zi, zi+1)·cell`, `x ∈ x_min + [xi, xi+1)·cell`.
//! The camera's ground point is the metric origin, which sits on the grid's
//! x-centerline (`x_min = −X·cell/2`) at or below its near edge.

use alloc::format;

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    pub z_cells: usize,
    pub x_cells: usize,
    pub cell_size: f64,
    pub z_min: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            z_cells: 64,
            x_cells: 64,
            cell_size: 0.25,
            z_min: 1.0,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.z_cells == 0 || self.x_cells == 0 || !(self.cell_size > 0.0) || !self.z_min.is_finite() {
            return Err(Error::InvalidValue(format!("bad grid spec {self:?}")));
        }
        Ok(())
    }

    pub fn x_min(&self) -> f64 {
        -(self.x_cells as f64) * self.cell_size / 2.0
    }

    pub fn x_max(&self) -> f64 {
        -self.x_min()
    }

    pub fn z_max(&self) -> f64 {
        self.z_min + self.z_cells as f64 * self.cell_size
    }

    pub fn cells(&self) -> usize {
        self.z_cells * self.x_cells
    }

    /// Metric `(x, z)` of a cell center.
    pub fn cell_center(&self, zi: usize, xi: usize) -> (f64, f64) {
        (
            self.x_min() + (xi as f64 + 0.5) * self.cell_size,
            self.z_min + (zi as f64 + 0.5) * self.cell_size,
        )
    }

    /// Cell containing metric `(x, z)`, if any.
    pub fn cell_of(&self, x: f64, z: f64) -> Option<(usize, usize)> {
        let fx = math::floor((x - self.x_min()) / self.cell_size);
        let fz = math::floor((z - self.z_min) / self.cell_size);
        if fx < 0.0 || fz < 0.0 || fx >= self.x_cells as f64 || fz >= self.z_cells as f64 {
            return None;
        }
        Some((fz as usize, fx as usize))
    }
}

/// `C×Z×X` grid of per-class values. Ground-truth grids are {0,1}; predicted
/// grids hold probabilities. Several classes may be set in the same cell.
#[derive(Clone, Debug, PartialEq)]
pub struct BevGrid {
    values: Tensor,
    spec: GridSpec,
}

impl BevGrid {
    pub fn new(values: Tensor, spec: GridSpec) -> Result<Self> {
        spec.validate()?;
        let s = values.shape();
        if s.len() != 3 || s[1] != spec.z_cells || s[2] != spec.x_cells {
            return Err(Error::ShapeMismatch {
                lhs: s.to_vec(),
                rhs: alloc::vec![0, spec.z_cells, spec.x_cells],
            });
        }
        Ok(BevGrid { values, spec })
    }

    pub fn zeros(channels: usize, spec: GridSpec) -> Self {
        BevGrid {
            values: Tensor::zeros(&[channels, spec.z_cells, spec.x_cells]),
            spec,
        }
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn into_values(self) -> Tensor {
        self.values
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    #[inline]
    fn offset(&self, c: usize, zi: usize, xi: usize) -> usize {
        (c * self.spec.z_cells + zi) * self.spec.x_cells + xi
    }

    pub fn get(&self, c: usize, zi: usize, xi: usize) -> f64 {
        self.values.data()[self.offset(c, zi, xi)]
    }

    pub fn set(&mut self, c: usize, zi: usize, xi: usize, v: f64) {
        let o = self.offset(c, zi, xi);
        self.values.data_mut()[o] = v;
    }

    pub fn is_binary(&self) -> bool {
        self.values.data().iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// Number of cells with value 1 in channel `c`.
    pub fn count(&self, c: usize) -> usize {
        let n = self.spec.cells();
        self.values.data()[c * n..(c + 1) * n].iter().filter(|&&v| v == 1.0).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_grid_extent() {
        let g = GridSpec::default();
        assert_eq!(g.z_max(), 17.0);
        assert_eq!((g.x_min(), g.x_max()), (-8.0, 8.0));
        assert_eq!(g.cell_center(0, 0), (-7.875, 1.125));
        assert_eq!(g.cell_of(-7.875, 1.125), Some((0, 0)));
        assert_eq!(g.cell_of(0.1, 16.99), Some((63, 32)));
        assert_eq!(g.cell_of(8.0, 5.0), None);
        assert_eq!(g.cell_of(0.0, 0.5), None);
    }

    #[test]
    fn cell_centers_are_mirror_symmetric() {
        let g = GridSpec::default();
        for xi in 0..g.x_cells {
            let (x, _) = g.cell_center(0, xi);
            let (xm, _) = g.cell_center(0, g.x_cells - 1 - xi);
            assert_eq!(x, -xm);
        }
    }
}
