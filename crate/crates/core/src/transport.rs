//! Post-processing of a solve: feedback controllers, density pushforward,
//! path costs, and one-dimensional optimal transport references.

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;

use crate::cpsolver::{DualField, ValueField};
use crate::dynamics::{ReducedCostTensor, SystemSpec};
use crate::error::{Error, Result};
use crate::grid::{DensityVector, Grid1D};

/// Cells with density at or below this value count as empty.
pub const DENSITY_FLOOR: f64 = 1e-12;

/// Feedback control `u[k][i]` per transition and cell, with the cell it targets.
#[derive(Debug, Clone)]
pub struct ControllerTable {
    grid: Grid1D,
    u: Array2<f64>,
    target_index: Array2<usize>,
}

impl ControllerTable {
    /// Builds a table from controls, deriving each target as the cell nearest
    /// to `f_k(x_i) + u[k][i]`.
    pub fn from_controls(sys: &SystemSpec, grid: &Grid1D, u: Array2<f64>) -> Result<Self> {
        if u.ncols() != grid.len() || u.nrows() + 1 != sys.horizon() {
            return Err(Error::LengthMismatch {
                expected: grid.len(),
                got: u.ncols(),
            });
        }
        let x = grid.centers();
        let target_index =
            Array2::from_shape_fn(u.dim(), |(k, i)| grid.nearest_cell(sys.drift(k, x[i]) + u[[k, i]]));
        Ok(Self {
            grid: grid.clone(),
            u,
            target_index,
        })
    }

    pub fn grid(&self) -> &Grid1D {
        &self.grid
    }

    /// Number of transitions.
    pub fn stages(&self) -> usize {
        self.u.nrows()
    }

    pub fn controls(&self) -> &Array2<f64> {
        &self.u
    }

    pub fn targets(&self) -> &Array2<usize> {
        &self.target_index
    }

    pub fn control(&self, k: usize, i: usize) -> f64 {
        self.u[[k, i]]
    }

    pub fn target(&self, k: usize, i: usize) -> usize {
        self.target_index[[k, i]]
    }
}

/// Bellman controller: `j* = argmin_j C[k][i][j] + v[k+1][j]` and
/// `u[k][i] = x_{j*} - f_k(x_i)`.
///
/// Ties go to the smallest `|u|`, then to the smallest `j`.
pub fn extract_controller(
    v: &ValueField,
    costs: &ReducedCostTensor,
    sys: &SystemSpec,
) -> ControllerTable {
    let grid = costs.grid();
    let m = grid.len();
    let stages = costs.stages();
    let x = grid.centers();
    let picks: Vec<(usize, f64)> = (0..stages * m)
        .into_par_iter()
        .map(|row| {
            let (k, i) = (row / m, row % m);
            let fx = sys.drift(k, x[i]);
            let next = v.stage(k + 1);
            let c = costs.stage(k);
            let mut best = (0, f64::INFINITY, f64::INFINITY);
            for (j, (&cij, &vj)) in c.row(i).iter().zip(next.iter()).enumerate() {
                let obj = cij + vj;
                let u = x[j] - fx;
                if obj < best.1 || (obj == best.1 && u.abs() < best.2.abs()) {
                    best = (j, obj, u);
                }
            }
            (best.0, best.2)
        })
        .collect();
    let target_index = Array2::from_shape_fn((stages, m), |(k, i)| picks[k * m + i].0);
    let u = Array2::from_shape_fn((stages, m), |(k, i)| picks[k * m + i].1);
    ControllerTable {
        grid: grid.clone(),
        u,
        target_index,
    }
}

/// Largest amount by which a controller's chosen target misses the Bellman
/// minimum `min_j C[k][i][j] + v[k+1][j]`. Zero for [`extract_controller`].
pub fn bellman_certificate(ctrl: &ControllerTable, v: &ValueField, costs: &ReducedCostTensor) -> f64 {
    let m = costs.grid().len();
    let mut worst = 0.0_f64;
    for k in 0..costs.stages() {
        let c = costs.stage(k);
        let next = v.stage(k + 1);
        for i in 0..m {
            let chosen = c[[i, ctrl.target(k, i)]] + next[ctrl.target(k, i)];
            let best = c
                .row(i)
                .iter()
                .zip(next.iter())
                .map(|(a, b)| a + b)
                .fold(f64::INFINITY, f64::min);
            worst = worst.max(chosen - best);
        }
    }
    worst
}

/// Plan controller: sends cell `i` to the barycenter of row `i` of the plan
/// density, `y = sum_j lambda[k][i][j] x_j / sum_j lambda[k][i][j]`.
///
/// Rows carrying no plan mass fall back to the Bellman controller. Unlike
/// the grid argmin, the barycenter is not restricted to cell centers, so a
/// stretching or compressing transport is reproduced without lumping mass.
pub fn plan_controller(
    v: &ValueField,
    lam: &DualField,
    costs: &ReducedCostTensor,
    sys: &SystemSpec,
) -> ControllerTable {
    let bellman = extract_controller(v, costs, sys);
    let grid = costs.grid();
    let h = grid.h();
    let x = grid.centers();
    let mut u = bellman.u.clone();
    for k in 0..costs.stages() {
        let plan = lam.stage(k);
        for i in 0..grid.len() {
            let row = plan.row(i);
            let mass: f64 = row.sum();
            if h * mass > DENSITY_FLOOR {
                let y = row.iter().zip(x).map(|(l, xj)| l * xj).sum::<f64>() / mass;
                u[[k, i]] = y - sys.drift(k, x[i]);
            }
        }
    }
    ControllerTable::from_controls(sys, grid, u).expect("shapes come from the solve")
}

/// Output of [`push_forward`].
#[derive(Debug, Clone)]
pub struct PushForward {
    pub density: DensityVector,
    /// Mass whose destination fell outside the grid interval and was clamped
    /// onto a boundary cell.
    pub clamped_mass: f64,
}

/// Moves each cell's mass along transition `stage` of the closed-loop map and
/// splits it between the two nearest cell centers by linear interpolation.
pub fn push_forward(
    rho: &DensityVector,
    ctrl: &ControllerTable,
    stage: usize,
    sys: &SystemSpec,
) -> Result<PushForward> {
    let grid = rho.grid();
    if grid != ctrl.grid() {
        return Err(Error::InvalidDensity("density and controller grids differ".into()));
    }
    let m = grid.len();
    let h = grid.h();
    let x = grid.centers();
    let mut mass = vec![0.0; m];
    let mut clamped = 0.0;
    for (i, &r) in rho.values().iter().enumerate() {
        if r == 0.0 {
            continue;
        }
        let cell_mass = h * r;
        let y = sys.drift(stage, x[i]) + ctrl.control(stage, i);
        if y < grid.x_min() || y > grid.x_max() || !y.is_finite() {
            clamped += cell_mass;
        }
        let s = grid.cell_coordinate(y);
        if !(s > 0.0) {
            mass[0] += cell_mass;
        } else if s >= (m - 1) as f64 {
            mass[m - 1] += cell_mass;
        } else {
            let j = s.floor() as usize;
            let w = s - j as f64;
            mass[j] += cell_mass * (1.0 - w);
            mass[j + 1] += cell_mass * w;
        }
    }
    let mut values: Vec<f64> = mass.into_iter().map(|q| q / h).collect();
    let total = h * values.iter().sum::<f64>();
    if clamped > 0.0 && (total - 1.0).abs() > 1e-10 {
        values.iter_mut().for_each(|v| *v /= total);
    }
    Ok(PushForward {
        density: DensityVector::new(grid, values)?,
        clamped_mass: clamped,
    })
}

/// Stage densities generated by a controller from an initial density.
#[derive(Debug, Clone)]
pub struct DensityPath {
    pub rho: Vec<DensityVector>,
    /// Clamped mass of each transition.
    pub clamped_mass: Vec<f64>,
}

impl DensityPath {
    pub fn terminal(&self) -> &DensityVector {
        self.rho.last().expect("a path has at least one stage")
    }

    pub fn total_clamped_mass(&self) -> f64 {
        self.clamped_mass.iter().sum()
    }
}

pub fn interpolate_path(
    rho1: &DensityVector,
    ctrl: &ControllerTable,
    sys: &SystemSpec,
) -> Result<DensityPath> {
    let mut rho = vec![rho1.clone()];
    let mut clamped_mass = Vec::with_capacity(ctrl.stages());
    for k in 0..ctrl.stages() {
        let step = push_forward(&rho[k], ctrl, k, sys)?;
        rho.push(step.density);
        clamped_mass.push(step.clamped_mass);
    }
    Ok(DensityPath { rho, clamped_mass })
}

/// `sum_k h * sum_i L_k(x_i, u[k][i]) rho[k][i]`.
pub fn primal_cost_of_path(path: &DensityPath, ctrl: &ControllerTable, sys: &SystemSpec) -> f64 {
    let grid = ctrl.grid();
    let h = grid.h();
    let x = grid.centers();
    (0..ctrl.stages())
        .map(|k| {
            path.rho[k]
                .values()
                .iter()
                .enumerate()
                .filter(|(_, r)| **r > 0.0)
                .map(|(i, r)| h * sys.lagrangian(k, x[i], ctrl.control(k, i)) * r)
                .sum::<f64>()
        })
        .sum()
}

/// Quantile function of the piecewise-constant density, sampled at
/// increasing levels `s` in `(0, 1)`.
fn quantiles(rho: &DensityVector, levels: &[f64]) -> Vec<f64> {
    let grid = rho.grid();
    let h = grid.h();
    let vals = rho.values();
    let last = vals.iter().rposition(|&r| r > 0.0).unwrap_or(0);
    let mut out = Vec::with_capacity(levels.len());
    let mut cell = 0;
    let mut below = 0.0; // CDF at the left edge of `cell`
    for &s in levels {
        while cell < last && below + h * vals[cell] <= s {
            below += h * vals[cell];
            cell += 1;
        }
        let left = grid.x_min() + cell as f64 * h;
        let x = if vals[cell] > 0.0 {
            left + ((s - below) / vals[cell]).clamp(0.0, h)
        } else {
            left
        };
        out.push(x);
    }
    out
}

/// `int_0^1 |F_a^{-1}(s) - F_b^{-1}(s)|^p ds` by the midpoint rule on
/// `10 M` levels, with piecewise-linear CDFs.
pub fn monotone_ot_1d(rho_a: &DensityVector, rho_b: &DensityVector, p: f64) -> Result<f64> {
    if !(p >= 1.0) {
        return Err(Error::InvalidParams(format!("exponent must be >= 1, got {p}")));
    }
    if rho_a.grid() != rho_b.grid() {
        return Err(Error::InvalidDensity("densities live on different grids".into()));
    }
    let n = 10 * rho_a.grid().len();
    let levels: Vec<f64> = (0..n).map(|q| (q as f64 + 0.5) / n as f64).collect();
    let qa = quantiles(rho_a, &levels);
    let qb = quantiles(rho_b, &levels);
    Ok(qa
        .iter()
        .zip(&qb)
        .map(|(a, b)| (a - b).abs().powf(p))
        .sum::<f64>()
        / n as f64)
}

/// Cost of the monotone (north-west corner) coupling of the cell masses
/// `h rho_a` and `h rho_b` under `cost[i][j]`. Optimal whenever `cost` has
/// the Monge property, e.g. a convex function of `x_j - x_i`.
pub fn monotone_coupling_cost(
    rho_a: &DensityVector,
    rho_b: &DensityVector,
    cost: ArrayView2<'_, f64>,
) -> Result<f64> {
    let m = rho_a.grid().len();
    if rho_b.grid().len() != m || cost.dim() != (m, m) {
        return Err(Error::LengthMismatch {
            expected: m,
            got: cost.nrows(),
        });
    }
    let h = rho_a.grid().h();
    let mut a: Vec<f64> = rho_a.values().iter().map(|r| h * r).collect();
    let mut b: Vec<f64> = rho_b.values().iter().map(|r| h * r).collect();
    let (mut i, mut j) = (0, 0);
    let mut total = 0.0;
    while i < m && j < m {
        let q = a[i].min(b[j]);
        total += q * cost[[i, j]];
        a[i] -= q;
        b[j] -= q;
        if a[i] <= b[j] {
            i += 1;
        } else {
            j += 1;
        }
    }
    Ok(total)
}
