//! Configuration-driven experiment runner behind the `ddot` binary.
//!
//! A run validates the whole configuration before touching the output
//! directory, then writes CSV results (and optionally SVG charts) there.

pub mod config;
pub mod plot;

use std::fs;
use std::path::{Path, PathBuf};

use crate::cpsolver::{self, CPParams, Solution};
use crate::dynamics::{self, ReducedCostTensor};
use crate::error::Result;
use crate::gausslq::{self, GaussianLQProblem, Matrix};
use crate::grid::DensityVector;
use crate::transport::{self, ControllerTable, DensityPath};

pub use config::{Experiment, ExperimentConfig, GridExperiment, Mode};
use plot::Series;

/// Command-line overrides of configuration keys.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub plots: bool,
    pub output_dir: Option<PathBuf>,
    pub max_iter: Option<usize>,
}

/// What a run produced.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub mode: Mode,
    pub converged: bool,
    pub output_dir: PathBuf,
    /// The rows of `summary.csv`.
    pub summary: Vec<(String, String)>,
}

impl RunOutcome {
    /// 0 on convergence, 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.converged {
            0
        } else {
            2
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.summary.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

/// Loads `config_path`, applies `opts`, and runs the experiment.
pub fn run(config_path: &Path, opts: &RunOptions) -> Result<RunOutcome> {
    let cfg = ExperimentConfig::load(config_path)?;
    run_config(cfg, opts)
}

pub fn run_config(mut cfg: ExperimentConfig, opts: &RunOptions) -> Result<RunOutcome> {
    if let Some(dir) = &opts.output_dir {
        cfg.output_dir = dir.clone();
    }
    if let Some(n) = opts.max_iter {
        match &mut cfg.experiment {
            Experiment::GridSolve(e) | Experiment::Oracle(e) => e.cp.max_iter = Some(n),
            Experiment::Gaussian(_) => {}
        }
    }
    fs::create_dir_all(&cfg.output_dir)?;
    let out = Output {
        dir: cfg.output_dir.clone(),
        plots: opts.plots,
    };
    let (converged, summary) = match &cfg.experiment {
        Experiment::GridSolve(e) => grid_solve(e, &out)?,
        Experiment::Oracle(e) => oracle(e, &out)?,
        Experiment::Gaussian(e) => gaussian(&e.problem, &out)?,
    };
    Ok(RunOutcome {
        mode: cfg.mode(),
        converged,
        output_dir: cfg.output_dir,
        summary,
    })
}

struct Output {
    dir: PathBuf,
    plots: bool,
}

fn fmt(x: f64) -> String {
    format!("{x}")
}

impl Output {
    fn csv(&self, name: &str, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(self.dir.join(name))?;
        w.write_record(header)?;
        for row in rows {
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    fn svg(&self, name: &str, title: &str, x: &str, y: &str, series: &[Series<'_>]) -> Result<()> {
        if self.plots {
            fs::write(self.dir.join(name), plot::line_chart(title, x, y, series))?;
        }
        Ok(())
    }

    fn summary(&self, rows: &[(String, String)]) -> Result<()> {
        self.csv(
            "summary.csv",
            &["key", "value"],
            rows.iter().map(|(k, v)| vec![k.clone(), v.clone()]),
        )
    }
}

fn kv(rows: &mut Vec<(String, String)>, key: &str, value: impl ToString) {
    rows.push((key.to_string(), value.to_string()));
}

fn write_trace(out: &Output, sol: &Solution) -> Result<()> {
    let r = &sol.report;
    out.csv(
        "cost_trace.csv",
        &["iteration", "dual_objective", "primal_cost", "gap", "feas_residual"],
        (0..r.checkpoints.len()).map(|n| {
            vec![
                r.checkpoints[n].to_string(),
                fmt(r.dual_objective_trace[n]),
                fmt(r.primal_cost_trace[n]),
                fmt(r.gap_trace[n]),
                fmt(r.feas_residual_trace[n]),
            ]
        }),
    )?;
    let it = |v: &[f64]| -> Vec<(f64, f64)> {
        r.checkpoints.iter().zip(v).map(|(&i, &y)| (i as f64, y)).collect()
    };
    out.svg(
        "cost_trace.svg",
        "Dual objective and primal cost",
        "iteration",
        "cost",
        &[
            Series { label: "dual objective", points: it(&r.dual_objective_trace) },
            Series { label: "primal cost", points: it(&r.primal_cost_trace) },
        ],
    )?;
    let log = |v: &[f64]| -> Vec<f64> { v.iter().map(|x| x.max(1e-300).log10()).collect() };
    out.svg(
        "residuals.svg",
        "Relative gap and feasibility residual",
        "iteration",
        "log10",
        &[
            Series { label: "gap", points: it(&log(&r.gap_trace)) },
            Series { label: "feasibility", points: it(&log(&r.feas_residual_trace)) },
        ],
    )
}

fn write_path(out: &Output, path: &DensityPath, ctrl: &ControllerTable, target: &DensityVector) -> Result<()> {
    let grid = ctrl.grid();
    let x = grid.centers();
    let last = path.rho.len() - 1;
    for (k, rho) in path.rho.iter().enumerate() {
        out.csv(
            &format!("density_{}.csv", k + 1),
            &["x", "rho"],
            x.iter().zip(rho.values()).map(|(&xi, &r)| vec![fmt(xi), fmt(r)]),
        )?;
        let pts = |d: &DensityVector| x.iter().copied().zip(d.values().iter().copied()).collect();
        let mut series = vec![Series { label: "rho", points: pts(rho) }];
        if k == last {
            series.push(Series { label: "target", points: pts(target) });
        }
        out.svg(&format!("density_{}.svg", k + 1), &format!("Density at stage {}", k + 1), "x", "rho", &series)?;
    }
    for k in 0..ctrl.stages() {
        let rho = path.rho[k].values();
        out.csv(
            &format!("control_{}.csv", k + 1),
            &["x", "u", "rho_mass_weight"],
            (0..grid.len()).map(|i| vec![fmt(x[i]), fmt(ctrl.control(k, i)), fmt(grid.h() * rho[i])]),
        )?;
        out.svg(
            &format!("control_{}.svg", k + 1),
            &format!("Feedback control at stage {}", k + 1),
            "x",
            "u",
            &[Series {
                label: "u",
                points: (0..grid.len()).map(|i| (x[i], ctrl.control(k, i))).collect(),
            }],
        )?;
    }
    Ok(())
}

fn grid_solve(exp: &GridExperiment, out: &Output) -> Result<(bool, Vec<(String, String)>)> {
    let grid = exp.grid()?;
    let sys = exp.system()?;
    let rho1 = exp.marginal1.discretize(&grid)?;
    let rho_t = exp.marginal2.discretize(&grid)?;
    let costs = ReducedCostTensor::build(&sys, &grid)?;
    let params = exp.cp.apply(CPParams::for_grid(&grid, exp.horizon)?);
    let sol = cpsolver::solve_with_costs(&costs, &rho1, &rho_t, &params)?;

    let ctrl = transport::plan_controller(&sol.values, &sol.duals, &costs, &sys);
    let path = transport::interpolate_path(&rho1, &ctrl, &sys)?;
    let bellman = transport::extract_controller(&sol.values, &costs, &sys);
    let bellman_path = transport::interpolate_path(&rho1, &bellman, &sys)?;

    write_trace(out, &sol)?;
    write_path(out, &path, &ctrl, &rho_t)?;

    let r = &sol.report;
    let mut rows = Vec::new();
    kv(&mut rows, "mode", "grid-solve");
    kv(&mut rows, "optimal_value", fmt(sol.optimal_value()));
    kv(&mut rows, "primal_cost", fmt(r.final_primal_cost()));
    kv(&mut rows, "gap", fmt(r.final_gap()));
    kv(&mut rows, "feas_residual", fmt(r.final_feas_residual()));
    kv(&mut rows, "iterations", r.iterations_run);
    kv(&mut rows, "converged", r.converged);
    kv(&mut rows, "clamped_mass", fmt(path.total_clamped_mass()));
    kv(&mut rows, "path_cost", fmt(transport::primal_cost_of_path(&path, &ctrl, &sys)));
    kv(&mut rows, "terminal_l1", fmt(path.terminal().l1_distance(&rho_t)?));
    kv(&mut rows, "bellman_path_cost", fmt(transport::primal_cost_of_path(&bellman_path, &bellman, &sys)));
    kv(&mut rows, "bellman_terminal_l1", fmt(bellman_path.terminal().l1_distance(&rho_t)?));
    kv(&mut rows, "tau", fmt(params.tau));
    kv(&mut rows, "sigma", fmt(params.sigma));
    kv(&mut rows, "theta", fmt(params.theta));
    kv(&mut rows, "operator_norm_sq", fmt(r.step_norm_sq));
    kv(&mut rows, "marginal1_second_param_is", exp.marginal1.second_param_is.as_str());
    kv(&mut rows, "marginal2_second_param_is", exp.marginal2.second_param_is.as_str());
    out.summary(&rows)?;
    Ok((r.converged, rows))
}

fn oracle(exp: &GridExperiment, out: &Output) -> Result<(bool, Vec<(String, String)>)> {
    let grid = exp.grid()?;
    let sys = exp.system()?;
    let rho1 = exp.marginal1.discretize(&grid)?;
    let rho_t = exp.marginal2.discretize(&grid)?;
    let table = dynamics::cost_to_go(&sys, &grid)?;
    let value = transport::monotone_coupling_cost(&rho1, &rho_t, table.as_array().view())?;
    let t = table.as_array();
    let mut rows = Vec::new();
    kv(&mut rows, "mode", "oracle");
    kv(&mut rows, "dp_table_size", grid.len());
    kv(&mut rows, "dp_table_min", fmt(t.iter().copied().fold(f64::INFINITY, f64::min)));
    kv(&mut rows, "dp_table_max", fmt(t.iter().copied().fold(f64::NEG_INFINITY, f64::max)));
    kv(&mut rows, "dp_monotone_value", fmt(value));
    if exp.is_free_quadratic() {
        // straight-line paths split W2^2 evenly over the T - 1 steps
        let w2 = transport::monotone_ot_1d(&rho1, &rho_t, 2.0)?;
        kv(&mut rows, "monotone_ot_value", fmt(w2 / (exp.horizon - 1) as f64));
    }
    kv(&mut rows, "marginal1_second_param_is", exp.marginal1.second_param_is.as_str());
    kv(&mut rows, "marginal2_second_param_is", exp.marginal2.second_param_is.as_str());
    out.summary(&rows)?;
    Ok((true, rows))
}

fn is_free_transport(p: &GaussianLQProblem) -> bool {
    let n = p.state_dim();
    let id = Matrix::identity(n, n);
    p.horizon() == 2 && p.a() == &id && p.b() == &id && p.r() == &id && p.q() == &Matrix::zeros(n, n)
}

fn gaussian(prob: &GaussianLQProblem, out: &Output) -> Result<(bool, Vec<(String, String)>)> {
    let sol = gausslq::solve_gaussian(prob)?;
    let lmi = gausslq::verify_lmi(prob, &sol);
    let syn = gausslq::gain_synthesis(&sol, prob);
    let err = syn.terminal_error(prob);
    let converged = lmi.feasible && err <= 1e-4;

    let mut records = Vec::new();
    let mut push = |stage: usize, name: &str, m: &Matrix| {
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                records.push(vec![stage.to_string(), name.to_string(), i.to_string(), j.to_string(), fmt(m[(i, j)])]);
            }
        }
    };
    for (k, p) in sol.p.iter().enumerate() {
        push(k + 1, "P", p);
    }
    for (k, g) in sol.gains.iter().enumerate() {
        push(k + 1, "G", g);
    }
    for (k, s) in syn.covariances.iter().enumerate() {
        push(k + 1, "Sigma", s);
    }
    out.csv("gaussian_solution.csv", &["stage", "matrix", "row", "col", "value"], records)?;
    out.svg(
        "lmi_margins.svg",
        "LMI minimum eigenvalue per stage",
        "stage",
        "margin",
        &[Series {
            label: "margin",
            points: lmi.margins.iter().enumerate().map(|(k, &m)| ((k + 1) as f64, m)).collect(),
        }],
    )?;

    let mut rows = Vec::new();
    kv(&mut rows, "mode", "gaussian");
    kv(&mut rows, "optimal_value", fmt(sol.value));
    kv(&mut rows, "converged", converged);
    kv(&mut rows, "lmi_feasible", lmi.feasible);
    kv(&mut rows, "lmi_worst_margin", fmt(lmi.worst_margin));
    kv(&mut rows, "terminal_covariance_error", fmt(err));
    if is_free_transport(prob) {
        kv(&mut rows, "bures_value", fmt(gausslq::bures_wasserstein_sq(prob.sigma1(), prob.sigma_t())));
    }
    out.summary(&rows)?;
    Ok((converged, rows))
}
