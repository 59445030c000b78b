//! Acceptance suite: one test and one printed PASS/FAIL line per criterion.

use std::path::Path;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use ddot::cli::{self, ExperimentConfig, RunOptions};
use ddot::cpsolver::{self, CPParams, Solution};
use ddot::dynamics::{self, ReducedCostTensor, SystemSpec};
use ddot::gausslq::{self, GaussianLQProblem, Matrix, RiccatiSolution};
use ddot::grid::{DensityVector, Grid1D};
use ddot::transport;
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SIN_DRIFT_CONFIG: &str = include_str!("../configs/sin_drift.cfg");

// criterion 1
const REGRESSION_TOL: f64 = 1e-3;
const REGRESSION_MAX_ITER: usize = 20_000;
const TRACE_WINDOW: f64 = 0.10;
const TRACE_DRIFT: f64 = 1e-3;
const TERMINAL_L1: f64 = 0.1;
const CONTROL_SUPPORT: (f64, f64) = (0.0, 1.7);
const SUPPORT_LEAK: f64 = 1e-3;
const REGRESSION_BUDGET: Duration = Duration::from_secs(180);
// criteria 2 and 3
const EQUIVALENCE_TOL: f64 = 0.02;
const QUADRATIC_VALUE: f64 = 1.45;
const QUADRATIC_BUDGET: Duration = Duration::from_secs(120);
const SPREADING_TOL: f64 = 0.03;
const SPREADING_STEP_RATIO: f64 = 0.3;
const SPREADING_MAX_ITER: usize = 50_000;
// criterion 4
const BURES_REL_TOL: f64 = 1e-3;
const SCALAR_TOL: f64 = 1e-4;
const STEERING_TOL: f64 = 1e-4;
const GAUSSIAN_PAIRS: usize = 20;
const GAUSSIAN_BUDGET: Duration = Duration::from_secs(60);
// criterion 5
const ADJOINT_TOL: f64 = 1e-10;
const ADJOINT_INSTANCES: usize = 100;
// criterion 6
const LMI_MARGIN: f64 = -1e-8;

fn report(id: u32, name: &str, pass: bool, detail: String) {
    let tag = if pass { "PASS" } else { "FAIL" };
    println!("criterion {id} [{tag}] {name}: {detail}");
}

fn single_threaded<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(f)
}

fn read_csv(path: &Path) -> Vec<Vec<f64>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records()
        .map(|rec| rec.unwrap().iter().map(|s| s.parse().unwrap()).collect())
        .collect()
}

#[test]
fn criterion_1_sin_drift_regression() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::parse(SIN_DRIFT_CONFIG, Path::new("sin_drift.cfg")).unwrap();
    let start = Instant::now();
    let outcome = single_threaded(|| {
        cli::run_config(
            cfg,
            &RunOptions {
                output_dir: Some(dir.path().to_path_buf()),
                ..Default::default()
            },
        )
        .unwrap()
    });
    let elapsed = start.elapsed();
    let num = |k: &str| outcome.get(k).unwrap().parse::<f64>().unwrap();

    let iterations = num("iterations") as usize;
    let converged = outcome.get("converged") == Some("true")
        && num("gap") <= REGRESSION_TOL
        && num("feas_residual") <= REGRESSION_TOL
        && iterations <= REGRESSION_MAX_ITER;

    let trace = read_csv(&dir.path().join("cost_trace.csv"));
    let from = ((1.0 - TRACE_WINDOW) * iterations as f64).floor() as usize;
    let window: Vec<f64> = trace.iter().filter(|r| r[0] as usize >= from).map(|r| r[1]).collect();
    let (lo, hi) = window.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &d| (a.min(d), b.max(d)));
    let drift = (hi - lo) / window.last().unwrap().abs();

    let terminal_l1 = num("terminal_l1");

    let control = read_csv(&dir.path().join("control_1.csv"));
    let total: f64 = control.iter().map(|r| r[2]).sum();
    let leak: f64 = control
        .iter()
        .filter(|r| r[0] < CONTROL_SUPPORT.0 || r[0] > CONTROL_SUPPORT.1)
        .map(|r| r[2])
        .sum::<f64>()
        / total;
    let densities = (1..=5).filter(|k| dir.path().join(format!("density_{k}.csv")).exists()).count();
    let controls = (1..=4).filter(|k| dir.path().join(format!("control_{k}.csv")).exists()).count();

    let pass = converged
        && drift <= TRACE_DRIFT
        && terminal_l1 <= TERMINAL_L1
        && leak <= SUPPORT_LEAK
        && elapsed < REGRESSION_BUDGET
        && densities == 5
        && controls == 4;
    report(
        1,
        "sin-drift regression",
        pass,
        format!(
            "value={:.6} gap={:.2e} feas={:.2e} iters={iterations} trace_drift={drift:.2e} \
             terminal_l1={terminal_l1:.4} (argmin controller {:.4}) support_leak={leak:.1e} \
             files={densities}+{controls} time={:.1}s",
            num("optimal_value"),
            num("gap"),
            num("feas_residual"),
            num("bellman_terminal_l1"),
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

type FreeQuadratic = (Grid1D, SystemSpec, DensityVector, DensityVector, ReducedCostTensor, Solution);

fn free_quadratic_solve(m: usize, horizon: usize, tune: impl FnOnce(CPParams) -> CPParams) -> FreeQuadratic {
    let grid = Grid1D::new(-1.0, 4.0, m).unwrap();
    let sys = SystemSpec::free_quadratic(horizon).unwrap();
    let a = DensityVector::gaussian(&grid, 0.8, 0.04).unwrap();
    let b = DensityVector::gaussian(&grid, 2.0, 0.09).unwrap();
    let costs = ReducedCostTensor::build(&sys, &grid).unwrap();
    let params = tune(CPParams::for_grid(&grid, horizon).unwrap());
    let sol = cpsolver::solve_with_costs(&costs, &a, &b, &params).unwrap();
    (grid, sys, a, b, costs, sol)
}

fn spread(values: &[f64]) -> f64 {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    hi / lo - 1.0
}

#[test]
fn criterion_2_quadratic_oracle_equivalence() {
    let start = Instant::now();
    let (_, sys, a, b, costs, sol) = free_quadratic_solve(300, 2, |p| p);
    let ctrl = transport::plan_controller(&sol.values, &sol.duals, &costs, &sys);
    let path = transport::interpolate_path(&a, &ctrl, &sys).unwrap();
    let dual = sol.optimal_value();
    let primal = sol.report.final_primal_cost();
    let path_cost = transport::primal_cost_of_path(&path, &ctrl, &sys);
    let monotone = transport::monotone_ot_1d(&a, &b, 2.0).unwrap();
    let elapsed = start.elapsed();

    let values = [dual, primal, path_cost, monotone];
    let worst = spread(&values);
    let pass = worst <= EQUIVALENCE_TOL && elapsed < QUADRATIC_BUDGET;
    report(
        2,
        "quadratic oracle equivalence",
        pass,
        format!(
            "dual={dual:.5} primal={primal:.5} path={path_cost:.5} monotone={monotone:.5} \
             (closed form {QUADRATIC_VALUE}) max pairwise={worst:.2e} gap={:.1e} time={:.1}s",
            sol.report.final_gap(),
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_3_multi_step_spreading() {
    let (_, _, _, _, _, one_step) = free_quadratic_solve(300, 2, |p| p);
    // the default steps need about 50 000 iterations at this size
    let (_, _, _, _, _, five_step) = free_quadratic_solve(300, 5, |p| CPParams {
        max_iter: SPREADING_MAX_ITER,
        ..p.with_step_ratio(SPREADING_STEP_RATIO)
    });
    let target = one_step.optimal_value() / 4.0;
    let value = five_step.optimal_value();
    let rel = (value - target).abs() / target;

    let (grid, sys, a, b, _, coarse) = free_quadratic_solve(60, 5, |p| CPParams {
        max_iter: SPREADING_MAX_ITER,
        ..p.with_step_ratio(SPREADING_STEP_RATIO)
    });
    let table = dynamics::cost_to_go(&sys, &grid).unwrap();
    let dp = transport::monotone_coupling_cost(&a, &b, table.as_array().view()).unwrap();
    let dp_rel = (coarse.optimal_value() - dp).abs() / dp;

    let pass = five_step.report.converged && coarse.report.converged && rel <= SPREADING_TOL && dp_rel <= SPREADING_TOL;
    report(
        3,
        "multi-step spreading",
        pass,
        format!(
            "T=5 value={value:.5} vs one-step/4={target:.5} (rel {rel:.2e}); \
             M=60 solve={:.5} vs DP oracle={dp:.5} (rel {dp_rel:.2e}); iters {} and {}",
            coarse.optimal_value(),
            five_step.report.iterations_run,
            coarse.report.iterations_run
        ),
    );
    assert!(pass);
}

fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> Matrix {
    let g = Matrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    &g * g.transpose() + Matrix::identity(n, n) * 0.1
}

struct GaussianCase {
    problem: GaussianLQProblem,
    solution: RiccatiSolution,
    bures: f64,
}

/// The 20 random pairs followed by the scalar (1, 4) case, solved once.
fn gaussian_cases() -> &'static (Vec<GaussianCase>, Duration) {
    static CASES: OnceLock<(Vec<GaussianCase>, Duration)> = OnceLock::new();
    CASES.get_or_init(|| {
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut pairs: Vec<(Matrix, Matrix)> = (0..GAUSSIAN_PAIRS)
            .map(|i| {
                let n = 1 + i % 3;
                (random_spd(&mut rng, n), random_spd(&mut rng, n))
            })
            .collect();
        pairs.push((Matrix::from_element(1, 1, 1.0), Matrix::from_element(1, 1, 4.0)));
        let cases = pairs
            .into_iter()
            .map(|(s1, s2)| {
                let problem = GaussianLQProblem::free_transport(s1.clone(), s2.clone()).unwrap();
                let solution = gausslq::solve_gaussian(&problem).unwrap();
                assert_eq!(gausslq::wasserstein_sdp(&s1, &s2).unwrap(), solution.value);
                GaussianCase {
                    bures: gausslq::bures_wasserstein_sq(&s1, &s2),
                    problem,
                    solution,
                }
            })
            .collect();
        (cases, start.elapsed())
    })
}

#[test]
fn criterion_4_gaussian_against_bures() {
    let (cases, elapsed) = gaussian_cases();
    let (random, scalar) = cases.split_at(GAUSSIAN_PAIRS);
    let worst_rel = random
        .iter()
        .map(|c| (c.solution.value - c.bures).abs() / c.bures.abs())
        .fold(0.0, f64::max);
    let scalar_err = (scalar[0].solution.value - 1.0).abs();
    let worst_steer = cases
        .iter()
        .map(|c| gausslq::gain_synthesis(&c.solution, &c.problem).terminal_error(&c.problem))
        .fold(0.0, f64::max);
    let pass = worst_rel <= BURES_REL_TOL
        && scalar_err <= SCALAR_TOL
        && worst_steer <= STEERING_TOL
        && *elapsed < GAUSSIAN_BUDGET;
    report(
        4,
        "Gaussian transport vs Bures",
        pass,
        format!(
            "{GAUSSIAN_PAIRS} pairs worst rel err={worst_rel:.2e}; scalar value={:.8}; \
             worst terminal covariance err={worst_steer:.2e}; time={:.2}s",
            scalar[0].solution.value,
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_5_operator_certificates() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0_f64;
    for _ in 0..ADJOINT_INSTANCES {
        let m = rng.gen_range(2..40);
        let t = rng.gen_range(2..8);
        let width = rng.gen_range(0.1..10.0);
        let grid = Grid1D::new(-1.0, -1.0 + width, m).unwrap();
        let h = grid.h();
        let v = Array2::from_shape_fn((t, m), |_| rng.gen_range(-1.0..1.0));
        let lam = Array3::from_shape_fn((t - 1, m, m), |_| rng.gen_range(-1.0..1.0));
        let lhs = h * h * (&cpsolver::op_k(&v) * &lam).sum();
        let rhs = h * (&v * &cpsolver::op_k_adjoint(&lam, h)).sum();
        worst = worst.max((lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(f64::MIN_POSITIVE));
    }
    let grid = Grid1D::new(0.0, 3.0, 400).unwrap();
    let mu = grid.measure();
    let norm_sq = cpsolver::operator_norm_sq(&grid, 5).unwrap();
    let upper = norm_sq <= 4.0 * mu * (1.0 + 1e-3);
    let lower = norm_sq >= 3.9 * mu;
    let pass = worst <= ADJOINT_TOL && upper && lower;
    report(
        5,
        "operator certificates",
        pass,
        format!(
            "adjoint worst rel err={worst:.2e} over {ADJOINT_INSTANCES}; |K|^2={norm_sq:.6} \
             (upper 4mu(1+1e-3)={:.4}: {}, lower 3.9mu={:.4}: {}; exact 2mu(1+cos(pi/5))={:.6})",
            4.0 * mu * (1.0 + 1e-3),
            if upper { "ok" } else { "violated" },
            3.9 * mu,
            if lower { "ok" } else { "violated" },
            cpsolver::operator_norm_sq_closed_form(&grid, 5)
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_6_lmi_post_verification() {
    let (cases, _) = gaussian_cases();
    let margins: Vec<f64> = cases
        .iter()
        .map(|c| gausslq::verify_lmi(&c.problem, &c.solution).worst_margin)
        .collect();
    let worst = margins.iter().copied().fold(f64::INFINITY, f64::min);
    let pass = worst >= LMI_MARGIN;
    report(
        6,
        "LMI post-verification",
        pass,
        format!("{} solutions, worst block eigenvalue={worst:.2e}", margins.len()),
    );
    assert!(pass);
}
