//! Site geometry for spatially structured coefficient priors: coordinates,
//! pairwise distances and the neighborhood graph used by the CAR family.

use ndarray::Array2;

use crate::error::{ModelError, Result};

/// Coordinates, distances and adjacency for a set of spatial sites.
///
/// Site order is the single source of truth tying design-matrix columns,
/// coefficient entries and geometry rows together. Grids enumerate sites
/// row-major over `[1..rows] x [1..cols]` with unit spacing.
#[derive(Debug, Clone)]
pub struct GridGeometry {
    coords: Vec<(f64, f64)>,
    dist: Array2<f64>,
    adjacency: Array2<f64>,
    neighbor_counts: Vec<usize>,
}

impl GridGeometry {
    /// Regular grid with rook (up/down/left/right) adjacency.
    pub fn grid(rows: usize, cols: usize) -> Result<Self> {
        if rows < 1 || cols < 1 || rows * cols < 2 {
            return Err(ModelError::InvalidParameter(format!(
                "grid must have at least two sites, got {rows}x{cols}"
            )));
        }
        let mut coords = Vec::with_capacity(rows * cols);
        for r in 1..=rows {
            for c in 1..=cols {
                coords.push((r as f64, c as f64));
            }
        }
        let mut edges = Vec::new();
        let idx = |r: usize, c: usize| (r - 1) * cols + (c - 1);
        for r in 1..=rows {
            for c in 1..=cols {
                if c < cols {
                    edges.push((idx(r, c), idx(r, c + 1)));
                }
                if r < rows {
                    edges.push((idx(r, c), idx(r + 1, c)));
                }
            }
        }
        Self::from_parts(coords, &edges)
    }

    /// Builds a geometry from explicit coordinates and an undirected edge list.
    ///
    /// An empty edge list is allowed; families that need the neighborhood
    /// graph reject such geometries when used.
    pub fn from_parts(coords: Vec<(f64, f64)>, edges: &[(usize, usize)]) -> Result<Self> {
        let d = coords.len();
        if d < 2 {
            return Err(ModelError::InvalidParameter(format!(
                "geometry needs at least two sites, got {d}"
            )));
        }
        for (i, &(x, y)) in coords.iter().enumerate() {
            if !x.is_finite() || !y.is_finite() {
                return Err(ModelError::InvalidData(format!(
                    "non-finite coordinate at site {i}"
                )));
            }
        }
        let mut dist = Array2::zeros((d, d));
        for i in 0..d {
            for j in 0..i {
                let dx = coords[i].0 - coords[j].0;
                let dy = coords[i].1 - coords[j].1;
                let h = (dx * dx + dy * dy).sqrt();
                dist[(i, j)] = h;
                dist[(j, i)] = h;
            }
        }
        let mut adjacency = Array2::zeros((d, d));
        for &(i, j) in edges {
            if i >= d || j >= d {
                return Err(ModelError::InvalidData(format!(
                    "edge ({i}, {j}) references a site outside 0..{d}"
                )));
            }
            if i == j {
                return Err(ModelError::InvalidData(format!("self-edge at site {i}")));
            }
            adjacency[(i, j)] = 1.0;
            adjacency[(j, i)] = 1.0;
        }
        let neighbor_counts = (0..d)
            .map(|i| adjacency.row(i).iter().filter(|&&a| a != 0.0).count())
            .collect();
        Ok(Self {
            coords,
            dist,
            adjacency,
            neighbor_counts,
        })
    }

    /// Number of sites d.
    pub fn n_sites(&self) -> usize {
        self.coords.len()
    }

    pub fn coords(&self) -> &[(f64, f64)] {
        &self.coords
    }

    /// Pairwise Euclidean distances in grid units.
    pub fn distances(&self) -> &Array2<f64> {
        &self.dist
    }

    /// Binary symmetric adjacency with zero diagonal.
    pub fn adjacency(&self) -> &Array2<f64> {
        &self.adjacency
    }

    /// Number of neighbors of each site.
    pub fn neighbor_counts(&self) -> &[usize] {
        &self.neighbor_counts
    }

    /// Largest pairwise distance.
    pub fn diameter(&self) -> f64 {
        self.dist.iter().cloned().fold(0.0, f64::max)
    }

    pub fn has_isolated_sites(&self) -> bool {
        self.neighbor_counts.iter().any(|&c| c == 0)
    }
}
