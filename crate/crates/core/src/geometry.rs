//! Axis-aligned box domains and their uniform partitions.

use crate::error::{FoslsError, Result};
use serde::{Deserialize, Serialize};

/// An axis-aligned box `(lower, upper)` in one to three dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxDomain {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl BoxDomain {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() || lower.len() > 3 {
            return Err(FoslsError::InvalidArgument(format!(
                "box bounds must have equal length in 1..=3, got {} and {}",
                lower.len(),
                upper.len()
            )));
        }
        for (k, (a, b)) in lower.iter().zip(&upper).enumerate() {
            if !(a.is_finite() && b.is_finite() && a < b) {
                return Err(FoslsError::InvalidArgument(format!(
                    "degenerate box along axis {k}: [{a}, {b}]"
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    /// The unit cube `(0,1)^dim`.
    pub fn unit(dim: usize) -> Self {
        Self::new(vec![0.0; dim], vec![1.0; dim]).expect("unit cube of dimension 1..=3")
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn extent(&self, axis: usize) -> f64 {
        self.upper[axis] - self.lower[axis]
    }

    pub fn volume(&self) -> f64 {
        (0..self.dim()).map(|k| self.extent(k)).product()
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(a, b)| 0.5 * (a + b))
            .collect()
    }

    /// Closed containment test.
    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (a, b))| *v >= *a && *v <= *b)
    }

    /// Maps a reference point in `(-1,1)^d` affinely onto this box.
    pub fn map_reference(&self, reference: &[f64], out: &mut [f64]) {
        for k in 0..self.dim() {
            let half = 0.5 * self.extent(k);
            out[k] = self.lower[k] + half * (1.0 + reference[k]);
        }
    }

    /// Determinant of the affine map from `(-1,1)^d`.
    pub fn reference_jacobian(&self) -> f64 {
        (0..self.dim()).map(|k| 0.5 * self.extent(k)).product()
    }
}

/// A uniform tiling of a box by congruent axis-aligned cells.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    domain: BoxDomain,
    cells_per_axis: Vec<usize>,
    cells: Vec<BoxDomain>,
}

impl Partition {
    pub fn domain(&self) -> &BoxDomain {
        &self.domain
    }

    pub fn cells_per_axis(&self) -> &[usize] {
        &self.cells_per_axis
    }

    pub fn cells(&self) -> &[BoxDomain] {
        &self.cells
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }
}

/// Splits `domain` into `Π cells_per_axis[k]` congruent cells, axis 0 varying fastest.
pub fn partition_uniform(domain: &BoxDomain, cells_per_axis: &[usize]) -> Result<Partition> {
    if cells_per_axis.len() != domain.dim() {
        return Err(FoslsError::InvalidArgument(format!(
            "expected {} cell counts, got {}",
            domain.dim(),
            cells_per_axis.len()
        )));
    }
    if let Some(axis) = cells_per_axis.iter().position(|&n| n == 0) {
        return Err(FoslsError::InvalidArgument(format!(
            "zero cells requested along axis {axis}"
        )));
    }
    let dim = domain.dim();
    let total: usize = cells_per_axis.iter().product();
    let mut cells = Vec::with_capacity(total);
    let mut index = vec![0usize; dim];
    for _ in 0..total {
        let mut lo = Vec::with_capacity(dim);
        let mut hi = Vec::with_capacity(dim);
        for k in 0..dim {
            let h = domain.extent(k) / cells_per_axis[k] as f64;
            lo.push(domain.lower[k] + h * index[k] as f64);
            // the last cell closes exactly on the upper bound
            hi.push(if index[k] + 1 == cells_per_axis[k] {
                domain.upper[k]
            } else {
                domain.lower[k] + h * (index[k] + 1) as f64
            });
        }
        cells.push(BoxDomain { lower: lo, upper: hi });
        for k in 0..dim {
            index[k] += 1;
            if index[k] < cells_per_axis[k] {
                break;
            }
            index[k] = 0;
        }
    }
    Ok(Partition {
        domain: domain.clone(),
        cells_per_axis: cells_per_axis.to_vec(),
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_interval_in_four() {
        let p = partition_uniform(&BoxDomain::unit(1), &[4]).unwrap();
        assert_eq!(p.len(), 4);
        for c in p.cells() {
            assert!((c.volume() - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn unit_square_two_by_two() {
        let p = partition_uniform(&BoxDomain::unit(2), &[2, 2]).unwrap();
        assert_eq!(p.len(), 4);
        assert!(p.cells().iter().all(|c| (c.volume() - 0.25).abs() < 1e-15));
    }

    #[test]
    fn experiment_mesh_size() {
        let p = partition_uniform(&BoxDomain::unit(2), &[100, 100]).unwrap();
        assert_eq!(p.len(), 10_000);
        let total: f64 = p.cells().iter().map(BoxDomain::volume).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_cells_rejected() {
        assert!(partition_uniform(&BoxDomain::unit(2), &[3, 0]).is_err());
        assert!(partition_uniform(&BoxDomain::unit(2), &[3]).is_err());
    }

    #[test]
    fn degenerate_box_rejected() {
        assert!(BoxDomain::new(vec![0.0], vec![0.0]).is_err());
        assert!(BoxDomain::new(vec![0.0, 1.0], vec![1.0]).is_err());
    }
}
