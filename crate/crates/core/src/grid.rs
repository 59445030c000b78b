//! Uniform cell-centered grids on an interval, densities on them, and
//! midpoint quadrature.
//!
//! Every inner product in the crate is a midpoint sum with weight `h` per
//! cell, so integrals of constants and of affine functions of the cell
//! centers are exact.

use crate::error::{Error, Result};

/// Uniform cell-centered discretization of `[x_min, x_max]` into `m` cells.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid1D {
    x_min: f64,
    x_max: f64,
    h: f64,
    centers: Vec<f64>,
}

impl Grid1D {
    pub fn new(x_min: f64, x_max: f64, m: usize) -> Result<Self> {
        if !x_min.is_finite() || !x_max.is_finite() {
            return Err(Error::InvalidGrid(format!(
                "bounds must be finite, got [{x_min}, {x_max}]"
            )));
        }
        if x_max <= x_min {
            return Err(Error::InvalidGrid(format!(
                "x_max must exceed x_min, got [{x_min}, {x_max}]"
            )));
        }
        if m < 2 {
            return Err(Error::InvalidGrid(format!("need at least 2 cells, got {m}")));
        }
        let h = (x_max - x_min) / m as f64;
        let centers = (0..m).map(|i| x_min + (i as f64 + 0.5) * h).collect();
        Ok(Self {
            x_min,
            x_max,
            h,
            centers,
        })
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    /// Number of cells.
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    /// Cell width.
    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    /// Lebesgue measure of the interval.
    pub fn measure(&self) -> f64 {
        self.x_max - self.x_min
    }

    /// Midpoint-rule integral `h * sum(g)`.
    pub fn integrate(&self, g: &[f64]) -> Result<f64> {
        if g.len() != self.len() {
            return Err(Error::LengthMismatch {
                expected: self.len(),
                got: g.len(),
            });
        }
        Ok(self.h * g.iter().sum::<f64>())
    }

    /// Fractional cell coordinate of `x`: `0.0` at the first center, `m-1` at the last.
    pub fn cell_coordinate(&self, x: f64) -> f64 {
        (x - self.x_min) / self.h - 0.5
    }

    /// Index of the cell center closest to `x`, clamped to the grid.
    pub fn nearest_cell(&self, x: f64) -> usize {
        let s = self.cell_coordinate(x).round();
        s.clamp(0.0, (self.len() - 1) as f64) as usize
    }
}

/// A nonnegative grid function with unit midpoint integral.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityVector {
    grid: Grid1D,
    values: Vec<f64>,
}

/// Unit-mass tolerance accepted by [`DensityVector::new`].
pub const MASS_TOLERANCE: f64 = 1e-10;

impl DensityVector {
    /// Wraps `values`, checking nonnegativity and unit mass.
    pub fn new(grid: &Grid1D, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::LengthMismatch {
                expected: grid.len(),
                got: values.len(),
            });
        }
        if let Some((i, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0)
        {
            return Err(Error::InvalidDensity(format!("value {v} at cell {i}")));
        }
        let mass = grid.integrate(&values)?;
        if (mass - 1.0).abs() > MASS_TOLERANCE {
            return Err(Error::InvalidDensity(format!("mass {mass} is not 1")));
        }
        Ok(Self {
            grid: grid.clone(),
            values,
        })
    }

    /// Rescales a nonnegative grid function to unit mass.
    pub fn normalized(grid: &Grid1D, mut values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::LengthMismatch {
                expected: grid.len(),
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidDensity(
                "values must be finite and nonnegative".into(),
            ));
        }
        let mass = grid.integrate(&values)?;
        if mass < 1e-12 {
            return Err(Error::InvalidDensity(format!(
                "mass {mass:e} on the grid is too small to normalize"
            )));
        }
        values.iter_mut().for_each(|v| *v /= mass);
        Ok(Self {
            grid: grid.clone(),
            values,
        })
    }

    /// A density sampled from a Gaussian `N(mean, variance)`, truncated to
    /// the grid and renormalized.
    pub fn gaussian(grid: &Grid1D, mean: f64, variance: f64) -> Result<Self> {
        if !(variance > 0.0) || !variance.is_finite() {
            return Err(Error::InvalidDensity(format!(
                "variance must be positive, got {variance}"
            )));
        }
        if !mean.is_finite() {
            return Err(Error::InvalidDensity(format!("mean must be finite, got {mean}")));
        }
        let values = grid
            .centers()
            .iter()
            .map(|x| (-(x - mean).powi(2) / (2.0 * variance)).exp())
            .collect();
        Self::normalized(grid, values)
    }

    pub fn grid(&self) -> &Grid1D {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn mass(&self) -> f64 {
        self.grid.h() * self.values.iter().sum::<f64>()
    }

    pub fn mean(&self) -> f64 {
        let h = self.grid.h();
        self.grid
            .centers()
            .iter()
            .zip(&self.values)
            .map(|(x, r)| h * x * r)
            .sum()
    }

    /// `h * sum |a - b|`.
    pub fn l1_distance(&self, other: &DensityVector) -> Result<f64> {
        if self.values.len() != other.values.len() {
            return Err(Error::LengthMismatch {
                expected: self.values.len(),
                got: other.values.len(),
            });
        }
        Ok(self.grid.h()
            * self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>())
    }
}
