//! Axis-aligned boxes and tensor grids.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Closed box `[lower, upper]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Domain {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::dim("upper", lower.len(), upper.len()));
        }
        if lower.is_empty() {
            return Err(Error::invalid("domain must have at least one axis"));
        }
        for (l, u) in lower.iter().zip(&upper) {
            if !(l.is_finite() && u.is_finite() && l <= u) {
                return Err(Error::invalid(format!("invalid domain interval [{l}, {u}]")));
            }
        }
        Ok(Domain { lower, upper })
    }

    /// `[lo, hi]ⁿ`.
    pub fn cube(dim: usize, lo: f64, hi: f64) -> Self {
        Domain {
            lower: vec![lo; dim],
            upper: vec![hi; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (l, u))| *v >= *l && *v <= *u)
    }

    /// Shrinks each axis symmetrically by `margin` on both ends.
    pub fn shrink(&self, margin: f64) -> Self {
        Domain {
            lower: self.lower.iter().map(|l| l + margin).collect(),
            upper: self.upper.iter().map(|u| u - margin).collect(),
        }
    }

    pub fn diameter(&self) -> f64 {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| (u - l) * (u - l))
            .sum::<f64>()
            .sqrt()
    }

    /// `count` evenly spaced points per axis, endpoints included; axis 0 varies slowest.
    pub fn grid(&self, count: usize) -> Vec<DVector<f64>> {
        let axes: Vec<Vec<f64>> = self
            .lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| linspace(*l, *u, count))
            .collect();
        tensor(&axes)
    }

    /// The `rⁿ` equal sub-boxes, in the same order as [`Domain::cell_centers`].
    pub fn cells(&self, r: usize) -> Vec<Domain> {
        let n = self.dim();
        let total = r.pow(n as u32);
        (0..total)
            .map(|flat| {
                let idx = unflatten(flat, r, n);
                let mut lower = Vec::with_capacity(n);
                let mut upper = Vec::with_capacity(n);
                for (a, i) in idx.iter().enumerate() {
                    let w = (self.upper[a] - self.lower[a]) / r as f64;
                    lower.push(self.lower[a] + w * *i as f64);
                    upper.push(if *i + 1 == r {
                        self.upper[a]
                    } else {
                        self.lower[a] + w * (*i + 1) as f64
                    });
                }
                Domain { lower, upper }
            })
            .collect()
    }

    pub fn center(&self) -> DVector<f64> {
        DVector::from_fn(self.dim(), |i, _| 0.5 * (self.lower[i] + self.upper[i]))
    }

    pub fn cell_centers(&self, r: usize) -> Vec<DVector<f64>> {
        self.cells(r).iter().map(Domain::center).collect()
    }
}

/// Multi-index of `flat` in an `r`-per-axis grid (axis 0 slowest).
pub fn unflatten(mut flat: usize, r: usize, n: usize) -> Vec<usize> {
    let mut idx = vec![0; n];
    for a in (0..n).rev() {
        idx[a] = flat % r;
        flat /= r;
    }
    idx
}

pub fn linspace(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![0.5 * (lo + hi)],
        _ => (0..count)
            .map(|i| {
                if i + 1 == count {
                    hi
                } else {
                    lo + (hi - lo) * i as f64 / (count - 1) as f64
                }
            })
            .collect(),
    }
}

fn tensor(axes: &[Vec<f64>]) -> Vec<DVector<f64>> {
    let mut out = vec![Vec::new()];
    for axis in axes {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                axis.iter().map(move |v| {
                    let mut p = prefix.clone();
                    p.push(*v);
                    p
                })
            })
            .collect();
    }
    out.into_iter().map(DVector::from_vec).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_is_row_major_with_endpoints() {
        let d = Domain::cube(2, -2.0, 2.0);
        let g = d.grid(3);
        assert_eq!(g.len(), 9);
        assert_eq!(g[0].as_slice(), &[-2.0, -2.0]);
        assert_eq!(g[1].as_slice(), &[-2.0, 0.0]);
        assert_eq!(g[8].as_slice(), &[2.0, 2.0]);
    }

    #[test]
    fn cells_tile_the_domain() {
        let d = Domain::new(vec![0.0, -1.0], vec![4.0, 1.0]).unwrap();
        let cells = d.cells(2);
        assert_eq!(cells.len(), 4);
        assert_eq!(cells[1].lower, vec![0.0, 0.0]);
        assert_eq!(cells[1].upper, vec![2.0, 1.0]);
        assert_eq!(d.cell_centers(2)[2].as_slice(), &[3.0, -0.5]);
    }

    #[test]
    fn seven_point_grid_on_oscillator_box() {
        let g = Domain::cube(2, -2.0, 2.0).grid(7);
        assert_eq!(g.len(), 49);
        assert!((g[1][1] - (-2.0 + 4.0 / 6.0)).abs() < 1e-15);
    }
}
