//! Full-input dynamics `x[k+1] = f_k(x[k]) + u[k]`, stage costs, and the
//! grid-restricted dynamic-programming oracle.
//!
//! Stage indices are 0-based throughout the crate: a horizon of `T` time
//! stamps has states `0..T` and transitions `0..T-1`.

use std::fmt;
use std::ops::Range;
use std::sync::Arc;

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::Grid1D;

type Drift = dyn Fn(usize, f64) -> f64 + Send + Sync;
type Lagrangian = dyn Fn(usize, f64, f64) -> f64 + Send + Sync;

/// A controlled system over a finite horizon together with its running cost.
#[derive(Clone)]
pub struct SystemSpec {
    horizon: usize,
    drift: Arc<Drift>,
    lagrangian: Arc<Lagrangian>,
}

impl fmt::Debug for SystemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SystemSpec")
            .field("horizon", &self.horizon)
            .finish_non_exhaustive()
    }
}

impl SystemSpec {
    /// `drift(k, x)` is `f_k(x)`, `lagrangian(k, x, u)` is `L_k(x, u) >= 0`.
    pub fn new<F, L>(horizon: usize, drift: F, lagrangian: L) -> Result<Self>
    where
        F: Fn(usize, f64) -> f64 + Send + Sync + 'static,
        L: Fn(usize, f64, f64) -> f64 + Send + Sync + 'static,
    {
        if horizon < 2 {
            return Err(Error::InvalidSystem(format!(
                "horizon must be at least 2, got {horizon}"
            )));
        }
        Ok(Self {
            horizon,
            drift: Arc::new(drift),
            lagrangian: Arc::new(lagrangian),
        })
    }

    /// `x[k+1] = x[k] + u[k]` with cost `u^2`.
    pub fn free_quadratic(horizon: usize) -> Result<Self> {
        Self::new(horizon, |_, x| x, |_, _, u| u * u)
    }

    /// Number of time stamps `T`.
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn drift(&self, stage: usize, x: f64) -> f64 {
        (self.drift)(stage, x)
    }

    pub fn lagrangian(&self, stage: usize, x: f64, u: f64) -> f64 {
        (self.lagrangian)(stage, x, u)
    }
}

/// Transition costs `C[k][i][j] = L_k(x_i, x_j - f_k(x_i))` between grid cells.
#[derive(Debug, Clone)]
pub struct ReducedCostTensor {
    grid: Grid1D,
    costs: Array3<f64>,
}

impl ReducedCostTensor {
    pub fn build(sys: &SystemSpec, grid: &Grid1D) -> Result<Self> {
        let m = grid.len();
        let stages = sys.horizon() - 1;
        let centers = grid.centers();
        let mut flat = vec![0.0; stages * m * m];
        flat.par_chunks_mut(m).enumerate().for_each(|(row, out)| {
            let (k, i) = (row / m, row % m);
            let x = centers[i];
            let fx = sys.drift(k, x);
            for (o, y) in out.iter_mut().zip(centers) {
                *o = sys.lagrangian(k, x, y - fx);
            }
        });
        if let Some(pos) = flat.iter().position(|c| !c.is_finite() || *c < 0.0) {
            return Err(Error::BadCost {
                stage: pos / (m * m),
                i: (pos / m) % m,
                j: pos % m,
                value: flat[pos],
            });
        }
        let costs = Array3::from_shape_vec((stages, m, m), flat).expect("shape matches");
        Ok(Self {
            grid: grid.clone(),
            costs,
        })
    }

    /// Wraps a precomputed `(T-1) x M x M` array.
    pub fn from_array(grid: &Grid1D, costs: Array3<f64>) -> Result<Self> {
        let (_, a, b) = costs.dim();
        if a != grid.len() || b != grid.len() || costs.len_of(Axis(0)) == 0 {
            return Err(Error::LengthMismatch {
                expected: grid.len(),
                got: a,
            });
        }
        if let Some(((k, i, j), c)) = costs
            .indexed_iter()
            .find(|(_, c)| !c.is_finite() || **c < 0.0)
        {
            return Err(Error::BadCost {
                stage: k,
                i,
                j,
                value: *c,
            });
        }
        Ok(Self {
            grid: grid.clone(),
            costs,
        })
    }

    pub fn grid(&self) -> &Grid1D {
        &self.grid
    }

    /// Number of transitions `T - 1`.
    pub fn stages(&self) -> usize {
        self.costs.len_of(Axis(0))
    }

    pub fn horizon(&self) -> usize {
        self.stages() + 1
    }

    pub fn as_array(&self) -> &Array3<f64> {
        &self.costs
    }

    pub fn stage(&self, k: usize) -> ArrayView2<'_, f64> {
        self.costs.index_axis(Axis(0), k)
    }

    pub fn get(&self, k: usize, i: usize, j: usize) -> f64 {
        self.costs[[k, i, j]]
    }
}

/// Minimal grid-path cost `c[i][j]` from cell `i` at the first stage of a
/// range to cell `j` at its last.
#[derive(Debug, Clone)]
pub struct CostToGoTable {
    grid: Grid1D,
    table: Array2<f64>,
}

impl CostToGoTable {
    /// Backward value iteration over transitions `stages` of `costs`.
    pub fn from_stages(costs: &ReducedCostTensor, stages: Range<usize>) -> Result<Self> {
        if stages.is_empty() || stages.end > costs.stages() {
            return Err(Error::InvalidSystem(format!(
                "stage range {stages:?} outside 0..{}",
                costs.stages()
            )));
        }
        let mut table = costs.stage(stages.end - 1).to_owned();
        for k in stages.clone().rev().skip(1) {
            table = bellman_step(costs.stage(k), table.view());
        }
        Ok(Self {
            grid: costs.grid().clone(),
            table,
        })
    }

    pub fn grid(&self) -> &Grid1D {
        &self.grid
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.table
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.table[[i, j]]
    }
}

/// One min-plus step: `out[i][j] = min_l stage[i][l] + next[l][j]`.
pub fn bellman_step(stage: ArrayView2<'_, f64>, next: ArrayView2<'_, f64>) -> Array2<f64> {
    let m = stage.nrows();
    let mut out = Array2::from_elem((m, next.ncols()), f64::INFINITY);
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(i, mut row)| {
            for (l, &c) in stage.row(i).iter().enumerate() {
                for (o, &n) in row.iter_mut().zip(next.row(l)) {
                    let cand = c + n;
                    if cand < *o {
                        *o = cand;
                    }
                }
            }
        });
    out
}

/// `c_1^T` on the grid: the cheapest grid path between every pair of cells.
pub fn cost_to_go(sys: &SystemSpec, grid: &Grid1D) -> Result<CostToGoTable> {
    let costs = ReducedCostTensor::build(sys, grid)?;
    CostToGoTable::from_stages(&costs, 0..costs.stages())
}
