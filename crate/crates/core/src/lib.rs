//! Dynamical optimal transport for discrete-time systems.
//!
//! A density `rho_1` is steered to `rho_T` in `T - 1` steps of
//! `x_{k+1} = f_k(x_k) + u_k`, minimizing the expected running cost
//! `L_k(x, u)`. On a uniform grid the problem is a linear program whose dual
//! is a chain of Bellman inequalities; [`cpsolver`] solves the saddle form by
//! primal-dual splitting and [`transport`] turns the result into a feedback
//! controller and a density path. [`gausslq`] handles the linear-quadratic
//! case with Gaussian marginals exactly.
//!
//! ```
//! use ddot::{cpsolver, grid::{DensityVector, Grid1D}, dynamics::SystemSpec};
//!
//! let grid = Grid1D::new(0.0, 3.0, 40)?;
//! let sys = SystemSpec::free_quadratic(2)?;
//! let a = DensityVector::gaussian(&grid, 1.0, 0.05)?;
//! let b = DensityVector::gaussian(&grid, 2.0, 0.05)?;
//! let params = cpsolver::CPParams::for_grid(&grid, 2)?;
//! let sol = cpsolver::solve(&sys, &grid, &a, &b, &params)?;
//! assert!((sol.optimal_value() - 1.0).abs() < 0.05);
//! # Ok::<(), ddot::Error>(())
//! ```

pub mod cli;
pub mod cpsolver;
pub mod dynamics;
pub mod error;
pub mod gausslq;
pub mod grid;
pub mod transport;

pub use error::{Error, Result};
