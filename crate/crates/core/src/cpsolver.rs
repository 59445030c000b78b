//! Primal-dual proximal splitting for the grid problem.
//!
//! The unknowns are a value field `v` (one grid function per time stamp)
//! and a plan density `lambda` (one `M x M` matrix per transition). The
//! saddle problem is
//!
//! ```text
//! min_v max_{lambda >= 0}  F(v) + <K v, lambda> - <C, lambda>
//! F(v)            = h * sum_i (rho_T[i] v[T-1][i] - rho_1[i] v[0][i])
//! (K v)[k][i][j]  = v[k][i] - v[k+1][j]
//! ```
//!
//! with inner products `h * sum` on value fields and `h^2 * sum` on plan
//! densities. `K` carries no quadrature weight; its adjoint carries `h`.
//! At a saddle point `-F(v)` equals `<C, lambda>`, the optimal transport
//! cost, and `v` is a sub-solution of the Bellman inequality
//! `v[k][i] <= C[k][i][j] + v[k+1][j]`.

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rayon::prelude::*;

use crate::dynamics::{ReducedCostTensor, SystemSpec};
use crate::error::{Error, Result};
use crate::grid::{DensityVector, Grid1D};

/// Value functions `v[k][i]`, one row per time stamp.
#[derive(Debug, Clone)]
pub struct ValueField {
    grid: Grid1D,
    values: Array2<f64>,
}

impl ValueField {
    pub fn new(grid: &Grid1D, values: Array2<f64>) -> Result<Self> {
        if values.ncols() != grid.len() || values.nrows() < 2 {
            return Err(Error::LengthMismatch {
                expected: grid.len(),
                got: values.ncols(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParams("value field must be finite".into()));
        }
        Ok(Self {
            grid: grid.clone(),
            values,
        })
    }

    pub fn grid(&self) -> &Grid1D {
        &self.grid
    }

    pub fn horizon(&self) -> usize {
        self.values.nrows()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn stage(&self, k: usize) -> ndarray::ArrayView1<'_, f64> {
        self.values.row(k)
    }
}

/// Plan densities `lambda[k][i][j] >= 0`, one matrix per transition.
#[derive(Debug, Clone)]
pub struct DualField {
    grid: Grid1D,
    values: Array3<f64>,
}

impl DualField {
    pub fn new(grid: &Grid1D, values: Array3<f64>) -> Result<Self> {
        let (_, a, b) = values.dim();
        if a != grid.len() || b != grid.len() {
            return Err(Error::LengthMismatch {
                expected: grid.len(),
                got: a,
            });
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidParams(
                "plan density must be finite and nonnegative".into(),
            ));
        }
        Ok(Self {
            grid: grid.clone(),
            values,
        })
    }

    pub fn grid(&self) -> &Grid1D {
        &self.grid
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn stage(&self, k: usize) -> ArrayView2<'_, f64> {
        self.values.index_axis(Axis(0), k)
    }

    /// Marginal of transition `k` on its source stage: `h * sum_j lambda[k][i][j]`.
    pub fn source_marginal(&self, k: usize) -> Vec<f64> {
        let h = self.grid.h();
        self.stage(k).rows().into_iter().map(|r| h * r.sum()).collect()
    }

    /// Marginal of transition `k` on its target stage: `h * sum_i lambda[k][i][j]`.
    pub fn target_marginal(&self, k: usize) -> Vec<f64> {
        let h = self.grid.h();
        self.stage(k).sum_axis(Axis(0)).iter().map(|s| h * s).collect()
    }
}

/// `(K v)[k][i][j] = v[k][i] - v[k+1][j]`.
pub fn op_k(v: &Array2<f64>) -> Array3<f64> {
    let (t, m) = v.dim();
    Array3::from_shape_fn((t - 1, m, m), |(k, i, j)| v[[k, i]] - v[[k + 1, j]])
}

/// Adjoint of [`op_k`] for the weighted inner products:
/// `out[k][i] = h * (sum_j lam[k][i][j] - sum_j lam[k-1][j][i])`, with the
/// out-of-range transitions taken as zero.
pub fn op_k_adjoint(lam: &Array3<f64>, h: f64) -> Array2<f64> {
    let (s, m, _) = lam.dim();
    let mut out = Array2::zeros((s + 1, m));
    for k in 0..s {
        let stage = lam.index_axis(Axis(0), k);
        let rows = stage.sum_axis(Axis(1));
        let cols = stage.sum_axis(Axis(0));
        for i in 0..m {
            out[[k, i]] += h * rows[i];
            out[[k + 1, i]] -= h * cols[i];
        }
    }
    out
}

/// `K* K v` in `O(T M)`: rows and columns of `K v` are affine in `v` and
/// its per-stage sums.
fn normal_operator(v: &Array2<f64>, h: f64) -> Array2<f64> {
    let (t, m) = v.dim();
    let mf = m as f64;
    let sums: Vec<f64> = v.rows().into_iter().map(|r| r.sum()).collect();
    let mut out = Array2::zeros((t, m));
    for k in 0..t - 1 {
        for i in 0..m {
            // row i of (Kv)[k] sums to M v[k][i] - S[k+1]
            out[[k, i]] += h * (mf * v[[k, i]] - sums[k + 1]);
            // column i of (Kv)[k] sums to S[k] - M v[k+1][i]
            out[[k + 1, i]] -= h * (sums[k] - mf * v[[k + 1, i]]);
        }
    }
    out
}

const POWER_MAX_STEPS: usize = 10_000;
const POWER_TOL: f64 = 1e-6;

/// Power-iteration estimate of `|K|^2` for the weighted inner products.
pub fn operator_norm_sq(grid: &Grid1D, horizon: usize) -> Result<f64> {
    if horizon < 2 {
        return Err(Error::InvalidParams(format!(
            "horizon must be at least 2, got {horizon}"
        )));
    }
    let h = grid.h();
    let m = grid.len();
    // fixed pseudo-random start so the estimate is reproducible
    let mut state = 0x9E37_79B9_7F4A_7C15_u64;
    let mut v = Array2::from_shape_fn((horizon, m), |_| {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
    });
    let norm = |a: &Array2<f64>| (h * a.iter().map(|x| x * x).sum::<f64>()).sqrt();
    let n0 = norm(&v);
    v.mapv_inplace(|x| x / n0);
    let mut estimate = 0.0;
    for _ in 0..POWER_MAX_STEPS {
        let w = normal_operator(&v, h);
        let next = h * v.iter().zip(w.iter()).map(|(a, b)| a * b).sum::<f64>();
        let nw = norm(&w);
        if nw == 0.0 {
            return Ok(0.0);
        }
        v = w / nw;
        if (next - estimate).abs() <= POWER_TOL * next {
            return Ok(next);
        }
        estimate = next;
    }
    Err(Error::PowerIteration(POWER_MAX_STEPS))
}

/// Exact `|K|^2 = 2 |X| (1 + cos(pi / T))`.
///
/// Stage-constant fields see `|X|` times the path-graph Laplacian on `T`
/// nodes, whose top eigenvalue is `2 + 2 cos(pi/T)`; fields with zero mean
/// in every stage see at most `2 |X|`. The bound `4 |X|` is approached only
/// as `T` grows.
pub fn operator_norm_sq_closed_form(grid: &Grid1D, horizon: usize) -> f64 {
    2.0 * grid.measure() * (1.0 + (std::f64::consts::PI / horizon as f64).cos())
}

/// `prox_F`: shifts the first stage by `+tau rho_1` and the last by `-tau rho_T`.
pub fn prox_f(
    v: &Array2<f64>,
    tau: f64,
    rho1: &DensityVector,
    rho_t: &DensityVector,
) -> Array2<f64> {
    let mut out = v.clone();
    let last = out.nrows() - 1;
    out.row_mut(0)
        .iter_mut()
        .zip(rho1.values())
        .for_each(|(o, r)| *o += tau * r);
    out.row_mut(last)
        .iter_mut()
        .zip(rho_t.values())
        .for_each(|(o, r)| *o -= tau * r);
    out
}

/// `prox_G`: `max(0, lam - sigma C)` entrywise.
pub fn prox_g(lam: &Array3<f64>, sigma: f64, costs: &ReducedCostTensor) -> Array3<f64> {
    let mut out = lam.clone();
    out.zip_mut_with(costs.as_array(), |l, c| *l = (*l - sigma * c).max(0.0));
    out
}

/// Dual objective `h * (sum v[0] rho_1 - sum v[T-1] rho_T)`.
pub fn dual_objective(v: &Array2<f64>, rho1: &DensityVector, rho_t: &DensityVector) -> f64 {
    let h = rho1.grid().h();
    let last = v.nrows() - 1;
    let a: f64 = v.row(0).iter().zip(rho1.values()).map(|(x, r)| x * r).sum();
    let b: f64 = v.row(last).iter().zip(rho_t.values()).map(|(x, r)| x * r).sum();
    h * (a - b)
}

/// Primal cost `h^2 * sum C lambda`.
pub fn primal_cost(lam: &Array3<f64>, costs: &ReducedCostTensor, h: f64) -> f64 {
    let per_stage: Vec<f64> = lam
        .outer_iter()
        .zip(costs.as_array().outer_iter())
        .map(|(l, c)| l.iter().zip(c.iter()).map(|(a, b)| a * b).sum::<f64>())
        .collect();
    h * h * per_stage.iter().sum::<f64>()
}

/// Largest violation of `v[k][i] <= C[k][i][j] + v[k+1][j]`, floored at zero.
pub fn bellman_residual(v: &Array2<f64>, costs: &ReducedCostTensor) -> f64 {
    let s = costs.stages();
    (0..s)
        .into_par_iter()
        .map(|k| {
            let c = costs.stage(k);
            let next = v.row(k + 1);
            let mut worst = 0.0_f64;
            for (i, &vi) in v.row(k).iter().enumerate() {
                for (cij, vj) in c.row(i).iter().zip(next.iter()) {
                    worst = worst.max(vi - vj - cij);
                }
            }
            worst
        })
        .reduce(|| 0.0, f64::max)
}

/// L1 residual of the flow constraints `K* lambda = (rho_1, 0, ..., 0, -rho_T)`,
/// i.e. the plan's first marginal, stage-to-stage mass balance, and last marginal.
pub fn marginal_residual(
    lam: &Array3<f64>,
    h: f64,
    rho1: &DensityVector,
    rho_t: &DensityVector,
) -> f64 {
    let mut kt = op_k_adjoint(lam, h);
    let last = kt.nrows() - 1;
    kt.row_mut(0)
        .iter_mut()
        .zip(rho1.values())
        .for_each(|(o, r)| *o -= r);
    kt.row_mut(last)
        .iter_mut()
        .zip(rho_t.values())
        .for_each(|(o, r)| *o += r);
    h * kt.iter().map(|x| x.abs()).sum::<f64>()
}

/// Step sizes, extrapolation, and stopping rules.
#[derive(Debug, Clone, PartialEq)]
pub struct CPParams {
    /// Primal (value field) step.
    pub tau: f64,
    /// Dual (plan density) step.
    pub sigma: f64,
    /// Extrapolation weight in `[0, 1]`.
    pub theta: f64,
    pub max_iter: usize,
    /// Target for `|P - D| / max(1, |P|)`.
    pub tol_gap: f64,
    /// Target for the feasibility residual (see [`SolveReport`]).
    pub tol_feas: f64,
    /// Iterations between diagnostics.
    pub check_every: usize,
}

/// Fraction of the stability limit used by the default steps.
pub const STEP_SAFETY: f64 = 0.95;

impl CPParams {
    /// `tau = sigma = 0.95 / |K|`, `theta = 1`, 20 000 iterations,
    /// tolerances `1e-3`, diagnostics every 10 iterations.
    pub fn for_grid(grid: &Grid1D, horizon: usize) -> Result<Self> {
        let norm_sq = operator_norm_sq(grid, horizon)?;
        let s = STEP_SAFETY / norm_sq.sqrt();
        Ok(Self {
            tau: s,
            sigma: s,
            theta: 1.0,
            max_iter: 20_000,
            tol_gap: 1e-3,
            tol_feas: 1e-3,
            check_every: 10,
        })
    }

    /// Rescales to `tau * ratio`, `sigma / ratio`, keeping `tau * sigma`.
    pub fn with_step_ratio(mut self, ratio: f64) -> Self {
        self.tau *= ratio;
        self.sigma /= ratio;
        self
    }

    fn validate(&self, grid: &Grid1D, horizon: usize) -> Result<f64> {
        let bad = |msg: &str| Err(Error::InvalidParams(msg.into()));
        if !(self.tau > 0.0 && self.tau.is_finite()) || !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad("tau and sigma must be positive");
        }
        if !(0.0..=1.0).contains(&self.theta) {
            return bad("theta must lie in [0, 1]");
        }
        if self.max_iter == 0 || self.check_every == 0 {
            return bad("max_iter and check_every must be positive");
        }
        if !(self.tol_gap > 0.0) || !(self.tol_feas > 0.0) {
            return bad("tolerances must be positive");
        }
        let norm_sq = operator_norm_sq(grid, horizon)?;
        if self.tau * self.sigma * norm_sq >= 1.0 {
            return Err(Error::StepSize {
                tau: self.tau,
                sigma: self.sigma,
                norm_sq,
            });
        }
        Ok(norm_sq)
    }
}

/// Per-checkpoint diagnostics of a solve.
///
/// The feasibility residual is the larger of the Bellman violation of `v`
/// and the L1 flow residual of `lambda`; both vanish at a saddle point.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SolveReport {
    pub checkpoints: Vec<usize>,
    pub dual_objective_trace: Vec<f64>,
    pub primal_cost_trace: Vec<f64>,
    pub gap_trace: Vec<f64>,
    pub feas_residual_trace: Vec<f64>,
    pub bellman_residual_trace: Vec<f64>,
    pub marginal_residual_trace: Vec<f64>,
    pub iterations_run: usize,
    pub converged: bool,
    pub step_norm_sq: f64,
}

impl SolveReport {
    pub fn final_dual_objective(&self) -> f64 {
        self.dual_objective_trace.last().copied().unwrap_or(f64::NAN)
    }

    pub fn final_primal_cost(&self) -> f64 {
        self.primal_cost_trace.last().copied().unwrap_or(f64::NAN)
    }

    pub fn final_gap(&self) -> f64 {
        self.gap_trace.last().copied().unwrap_or(f64::NAN)
    }

    pub fn final_feas_residual(&self) -> f64 {
        self.feas_residual_trace.last().copied().unwrap_or(f64::NAN)
    }
}

/// Result of [`solve`].
#[derive(Debug, Clone)]
pub struct Solution {
    pub values: ValueField,
    pub duals: DualField,
    pub report: SolveReport,
}

impl Solution {
    /// The dual objective at the last checkpoint.
    pub fn optimal_value(&self) -> f64 {
        self.report.final_dual_objective()
    }
}

/// Solves the grid problem for `sys` between `rho1` and `rho_t`.
pub fn solve(
    sys: &SystemSpec,
    grid: &Grid1D,
    rho1: &DensityVector,
    rho_t: &DensityVector,
    params: &CPParams,
) -> Result<Solution> {
    let costs = ReducedCostTensor::build(sys, grid)?;
    solve_with_costs(&costs, rho1, rho_t, params)
}

/// Rows of the plan density handled by one parallel task.
const BLOCK_ROWS: usize = 16;

/// [`solve`] on a prebuilt cost tensor.
pub fn solve_with_costs(
    costs: &ReducedCostTensor,
    rho1: &DensityVector,
    rho_t: &DensityVector,
    params: &CPParams,
) -> Result<Solution> {
    let grid = costs.grid();
    if rho1.grid() != grid || rho_t.grid() != grid {
        return Err(Error::InvalidDensity(
            "marginals must live on the solver grid".into(),
        ));
    }
    let horizon = costs.horizon();
    let norm_sq = params.validate(grid, horizon)?;

    let m = grid.len();
    let h = grid.h();
    let stages = horizon - 1;
    let (tau, sigma, theta) = (params.tau, params.sigma, params.theta);
    let cflat = costs.as_array().as_slice().expect("standard layout");

    let mut v = Array2::<f64>::zeros((horizon, m));
    let mut lam = vec![0.0; stages * m * m];
    let mut row_sum = Array2::<f64>::zeros((stages, m));
    let mut col_sum = Array2::<f64>::zeros((stages, m));
    let mut report = SolveReport {
        step_norm_sq: norm_sq,
        ..SolveReport::default()
    };

    // (stage, first row) of every block, in memory order
    let blocks: Vec<(usize, usize)> = (0..stages)
        .flat_map(|k| (0..m).step_by(BLOCK_ROWS).map(move |i0| (k, i0)))
        .collect();

    for n in 1..=params.max_iter {
        // v <- prox_F(v - tau K* lambda)
        let mut v_new = v.clone();
        for k in 0..horizon {
            for i in 0..m {
                let mut kt = 0.0;
                if k < stages {
                    kt += row_sum[[k, i]];
                }
                if k > 0 {
                    kt -= col_sum[[k - 1, i]];
                }
                v_new[[k, i]] -= tau * h * kt;
            }
        }
        for i in 0..m {
            v_new[[0, i]] += tau * rho1.values()[i];
            v_new[[horizon - 1, i]] -= tau * rho_t.values()[i];
        }
        if v_new.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { iteration: n });
        }
        let v_bar = &v_new + &((&v_new - &v) * theta);
        v = v_new;

        // lambda <- prox_G(lambda + sigma K v_bar), accumulating marginals per block
        let mut chunks: Vec<&mut [f64]> = Vec::with_capacity(blocks.len());
        let mut rest = lam.as_mut_slice();
        for &(_, i0) in &blocks {
            let rows = BLOCK_ROWS.min(m - i0);
            let (head, tail) = rest.split_at_mut(rows * m);
            chunks.push(head);
            rest = tail;
        }
        let partials: Vec<(Vec<f64>, Vec<f64>)> = chunks
            .into_par_iter()
            .zip(blocks.par_iter())
            .map(|(chunk, &(k, i0))| {
                let next = v_bar.row(k + 1);
                let mut rows = Vec::with_capacity(BLOCK_ROWS);
                let mut cols = vec![0.0; m];
                for (r, lrow) in chunk.chunks_mut(m).enumerate() {
                    let i = i0 + r;
                    let a = v_bar[[k, i]];
                    let base = (k * m + i) * m;
                    let crow = &cflat[base..base + m];
                    let mut s = 0.0;
                    for ((l, c), (vn, col)) in lrow
                        .iter_mut()
                        .zip(crow)
                        .zip(next.iter().zip(cols.iter_mut()))
                    {
                        *l = (*l + sigma * (a - vn - c)).max(0.0);
                        s += *l;
                        *col += *l;
                    }
                    rows.push(s);
                }
                (rows, cols)
            })
            .collect();
        col_sum.fill(0.0);
        for (&(k, i0), (rows, cols)) in blocks.iter().zip(&partials) {
            for (r, s) in rows.iter().enumerate() {
                row_sum[[k, i0 + r]] = *s;
            }
            for (acc, c) in col_sum.row_mut(k).iter_mut().zip(cols) {
                *acc += c;
            }
        }

        if n % params.check_every == 0 || n == params.max_iter {
            let d = dual_objective(&v, rho1, rho_t);
            let p = primal_cost_flat(&lam, cflat, h);
            if !d.is_finite() || !p.is_finite() {
                return Err(Error::NonFinite { iteration: n });
            }
            let gap = (p - d).abs() / p.abs().max(1.0);
            let bell = bellman_residual(&v, costs);
            let marg = flow_residual(&row_sum, &col_sum, h, rho1, rho_t);
            let feas = bell.max(marg);
            report.checkpoints.push(n);
            report.dual_objective_trace.push(d);
            report.primal_cost_trace.push(p);
            report.gap_trace.push(gap);
            report.feas_residual_trace.push(feas);
            report.bellman_residual_trace.push(bell);
            report.marginal_residual_trace.push(marg);
            report.iterations_run = n;
            if gap <= params.tol_gap && feas <= params.tol_feas {
                report.converged = true;
                break;
            }
        }
    }

    let lam = Array3::from_shape_vec((stages, m, m), lam).expect("shape matches");
    Ok(Solution {
        values: ValueField {
            grid: grid.clone(),
            values: v,
        },
        duals: DualField {
            grid: grid.clone(),
            values: lam,
        },
        report,
    })
}

fn primal_cost_flat(lam: &[f64], costs: &[f64], h: f64) -> f64 {
    let partial: Vec<f64> = lam
        .par_chunks(4096)
        .zip(costs.par_chunks(4096))
        .map(|(l, c)| l.iter().zip(c).map(|(a, b)| a * b).sum::<f64>())
        .collect();
    h * h * partial.iter().sum::<f64>()
}

fn flow_residual(
    row_sum: &Array2<f64>,
    col_sum: &Array2<f64>,
    h: f64,
    rho1: &DensityVector,
    rho_t: &DensityVector,
) -> f64 {
    let (stages, m) = row_sum.dim();
    let mut total = 0.0;
    for k in 0..=stages {
        for i in 0..m {
            let mut r = 0.0;
            if k < stages {
                r += h * row_sum[[k, i]];
            }
            if k > 0 {
                r -= h * col_sum[[k - 1, i]];
            }
            if k == 0 {
                r -= rho1.values()[i];
            }
            if k == stages {
                r += rho_t.values()[i];
            }
            total += r.abs();
        }
    }
    h * total
}
