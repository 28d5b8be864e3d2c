//! Regular grids with physical spacing.
//!
//! A grid maps integer voxel indices to physical coordinates through
//! `x_phys = origin + index * spacing` (element-wise). All registration
//! machinery works in physical millimeters; grids are the only place where
//! index/physical conversions happen.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maximum supported dimensionality. 2D slices and 3D volumes are the only
/// cases the registration protocols use.
pub const MAX_DIM: usize = 3;

/// Fixed-capacity physical point; entries past `dim` are zero.
pub type Point = [f64; MAX_DIM];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    dims: Vec<usize>,
    spacing: Vec<f64>,
    origin: Vec<f64>,
}

impl Grid {
    pub fn new(dims: Vec<usize>, spacing: Vec<f64>, origin: Vec<f64>) -> Result<Self> {
        let d = dims.len();
        if !(2..=MAX_DIM).contains(&d) || dims.iter().any(|&n| n < 2) {
            return Err(Error::InvalidDims(dims));
        }
        if spacing.len() != d || origin.len() != d {
            return Err(Error::MalformedHeader(format!(
                "spacing/origin length must match dims length {d}"
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidSpacing(spacing));
        }
        Ok(Self { dims, spacing, origin })
    }

    /// Uniform grid with unit spacing and zero origin.
    pub fn isotropic(dims: Vec<usize>) -> Result<Self> {
        let d = dims.len();
        Grid::new(dims, vec![1.0; d], vec![0.0; d])
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn origin(&self) -> &[f64] {
        &self.origin
    }

    /// Total number of grid nodes.
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false // dims >= 2 per construction
    }

    /// Physical coordinates of the node at `index` (row-major, last axis fastest).
    pub fn point_at(&self, index: usize) -> Point {
        let mut p = [0.0; MAX_DIM];
        let mut rem = index;
        for a in (0..self.ndim()).rev() {
            let i = rem % self.dims[a];
            rem /= self.dims[a];
            p[a] = self.origin[a] + i as f64 * self.spacing[a];
        }
        p
    }

    /// Row-major linear index of an integer node coordinate.
    pub fn linear_index(&self, idx: &[usize]) -> usize {
        let mut lin = 0;
        for a in 0..self.ndim() {
            lin = lin * self.dims[a] + idx[a];
        }
        lin
    }

    /// Continuous index-space coordinate of a physical point.
    pub fn to_index_space(&self, p: &Point) -> Point {
        let mut t = [0.0; MAX_DIM];
        for a in 0..self.ndim() {
            t[a] = (p[a] - self.origin[a]) / self.spacing[a];
        }
        t
    }

    /// Whether a physical point lies within the node bounding box.
    pub fn contains(&self, p: &Point) -> bool {
        let t = self.to_index_space(p);
        (0..self.ndim()).all(|a| t[a] >= 0.0 && t[a] <= (self.dims[a] - 1) as f64)
    }

    /// Physical coordinates of the grid's bounding-box minimum corner.
    pub fn phys_min(&self) -> Point {
        let mut p = [0.0; MAX_DIM];
        p[..self.ndim()].copy_from_slice(&self.origin[..self.ndim()]);
        p
    }

    /// Physical coordinates of the bounding-box maximum corner.
    pub fn phys_max(&self) -> Point {
        let mut p = [0.0; MAX_DIM];
        for a in 0..self.ndim() {
            p[a] = self.origin[a] + (self.dims[a] - 1) as f64 * self.spacing[a];
        }
        p
    }

    /// Physical center of the bounding box.
    pub fn center(&self) -> Point {
        let lo = self.phys_min();
        let hi = self.phys_max();
        let mut c = [0.0; MAX_DIM];
        for a in 0..self.ndim() {
            c[a] = 0.5 * (lo[a] + hi[a]);
        }
        c
    }

    /// The 2^d physical corner points of the bounding box.
    pub fn corners(&self) -> Vec<Point> {
        let d = self.ndim();
        let lo = self.phys_min();
        let hi = self.phys_max();
        (0..1usize << d)
            .map(|mask| {
                let mut p = [0.0; MAX_DIM];
                for a in 0..d {
                    p[a] = if mask >> a & 1 == 1 { hi[a] } else { lo[a] };
                }
                p
            })
            .collect()
    }

    /// Nearest grid node (clamped) to a physical point, as a linear index.
    pub fn nearest_index(&self, p: &Point) -> usize {
        let t = self.to_index_space(p);
        let mut idx = [0usize; MAX_DIM];
        for a in 0..self.ndim() {
            let i = t[a].round();
            idx[a] = i.clamp(0.0, (self.dims[a] - 1) as f64) as usize;
        }
        self.linear_index(&idx[..self.ndim()])
    }
}
