//! Line-oriented `key = value` experiment configuration.
//!
//! ```text
//! # comments start with '#'
//! mode = grid-solve
//! system = sin-drift
//! system.amplitude = 0.3
//! marginal1.mean = 0.7
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::cpsolver::CPParams;
use crate::dynamics::SystemSpec;
use crate::error::{Error, Result};
use crate::gausslq::{self, GaussianLQProblem, Matrix};
use crate::grid::{DensityVector, Grid1D};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    GridSolve,
    Gaussian,
    Oracle,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SystemChoice {
    /// `f(x) = x`
    Identity,
    /// `f(x) = x + amplitude * sin(x)`
    SinDrift { amplitude: f64 },
    /// `f(x) = c_0 + c_1 x + c_2 x^2 + ...`
    Poly { coeffs: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub enum LagrangianChoice {
    /// `L = u_weight * u^2`
    QuadraticU { u_weight: f64 },
    /// `L = x_weight * x^4 + u_weight * u^2`
    QuarticXQuadraticU { x_weight: f64, u_weight: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SecondParam {
    Variance,
    Stddev,
}

impl SecondParam {
    pub fn as_str(self) -> &'static str {
        match self {
            SecondParam::Variance => "variance",
            SecondParam::Stddev => "stddev",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarginalSpec {
    pub mean: f64,
    pub second_param: f64,
    pub second_param_is: SecondParam,
}

impl MarginalSpec {
    pub fn variance(&self) -> f64 {
        match self.second_param_is {
            SecondParam::Variance => self.second_param,
            SecondParam::Stddev => self.second_param * self.second_param,
        }
    }

    pub fn discretize(&self, grid: &Grid1D) -> Result<DensityVector> {
        DensityVector::gaussian(grid, self.mean, self.variance())
    }
}

/// Optional overrides of the default [`CPParams`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CpOverrides {
    pub tau: Option<f64>,
    pub sigma: Option<f64>,
    pub theta: Option<f64>,
    pub max_iter: Option<usize>,
    pub tol_gap: Option<f64>,
    pub tol_feas: Option<f64>,
    pub check_every: Option<usize>,
    /// Multiplies `tau` and divides `sigma` after the defaults are set.
    pub step_ratio: Option<f64>,
}

impl CpOverrides {
    pub fn apply(&self, mut p: CPParams) -> CPParams {
        if let Some(r) = self.step_ratio {
            p = p.with_step_ratio(r);
        }
        p.tau = self.tau.unwrap_or(p.tau);
        p.sigma = self.sigma.unwrap_or(p.sigma);
        p.theta = self.theta.unwrap_or(p.theta);
        p.max_iter = self.max_iter.unwrap_or(p.max_iter);
        p.tol_gap = self.tol_gap.unwrap_or(p.tol_gap);
        p.tol_feas = self.tol_feas.unwrap_or(p.tol_feas);
        p.check_every = self.check_every.unwrap_or(p.check_every);
        p
    }
}

/// Grid-based experiment (modes `grid-solve` and `oracle`).
#[derive(Debug, Clone, PartialEq)]
pub struct GridExperiment {
    pub system: SystemChoice,
    pub lagrangian: LagrangianChoice,
    pub x_min: f64,
    pub x_max: f64,
    pub m: usize,
    pub horizon: usize,
    pub marginal1: MarginalSpec,
    pub marginal2: MarginalSpec,
    pub cp: CpOverrides,
}

impl GridExperiment {
    pub fn grid(&self) -> Result<Grid1D> {
        Grid1D::new(self.x_min, self.x_max, self.m)
    }

    pub fn system(&self) -> Result<SystemSpec> {
        let drift: Arc<dyn Fn(usize, f64) -> f64 + Send + Sync> = match &self.system {
            SystemChoice::Identity => Arc::new(|_, x| x),
            SystemChoice::SinDrift { amplitude } => {
                let a = *amplitude;
                Arc::new(move |_, x| x + a * x.sin())
            }
            SystemChoice::Poly { coeffs } => {
                let c = coeffs.clone();
                Arc::new(move |_, x| c.iter().rev().fold(0.0, |acc, ci| acc * x + ci))
            }
        };
        let lag: Arc<dyn Fn(usize, f64, f64) -> f64 + Send + Sync> = match self.lagrangian {
            LagrangianChoice::QuadraticU { u_weight } => Arc::new(move |_, _, u| u_weight * u * u),
            LagrangianChoice::QuarticXQuadraticU { x_weight, u_weight } => {
                Arc::new(move |_, x, u| x_weight * x.powi(4) + u_weight * u * u)
            }
        };
        SystemSpec::new(self.horizon, move |k, x| drift(k, x), move |k, x, u| lag(k, x, u))
    }

    /// Free transport with `L = |u|^2`, for which monotone rearrangement is a reference.
    pub fn is_free_quadratic(&self) -> bool {
        self.system == SystemChoice::Identity
            && self.lagrangian == LagrangianChoice::QuadraticU { u_weight: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Experiment {
    GridSolve(GridExperiment),
    Oracle(GridExperiment),
    Gaussian(GaussianExperiment),
}

#[derive(Debug, Clone)]
pub struct GaussianExperiment {
    pub problem: GaussianLQProblem,
}

impl PartialEq for GaussianExperiment {
    fn eq(&self, other: &Self) -> bool {
        let p = (&self.problem, &other.problem);
        p.0.a() == p.1.a()
            && p.0.b() == p.1.b()
            && p.0.q() == p.1.q()
            && p.0.r() == p.1.r()
            && p.0.sigma1() == p.1.sigma1()
            && p.0.sigma_t() == p.1.sigma_t()
            && p.0.horizon() == p.1.horizon()
    }
}

/// A fully validated configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn mode(&self) -> Mode {
        match self.experiment {
            Experiment::GridSolve(_) => Mode::GridSolve,
            Experiment::Oracle(_) => Mode::Oracle,
            Experiment::Gaussian(_) => Mode::Gaussian,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
            path: path.to_path_buf(),
            line: 0,
            msg: format!("cannot read config: {e}"),
        })?;
        Self::parse(&text, path)
    }

    /// Parses and validates `text`; `path` only labels error messages.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        Parser::new(text, path)?.finish()
    }
}

const KEYS: &[&str] = &[
    "mode",
    "system",
    "system.amplitude",
    "system.coeffs",
    "lagrangian",
    "lagrangian.x_weight",
    "lagrangian.u_weight",
    "grid.x_min",
    "grid.x_max",
    "grid.m",
    "horizon",
    "marginal1.type",
    "marginal1.mean",
    "marginal1.second_param",
    "marginal1.second_param_is",
    "marginal2.type",
    "marginal2.mean",
    "marginal2.second_param",
    "marginal2.second_param_is",
    "cp.tau",
    "cp.sigma",
    "cp.theta",
    "cp.max_iter",
    "cp.tol_gap",
    "cp.tol_feas",
    "cp.check_every",
    "cp.step_ratio",
    "gaussian.a",
    "gaussian.b",
    "gaussian.q",
    "gaussian.r",
    "gaussian.sigma1",
    "gaussian.sigma_t",
    "gaussian.mean1",
    "gaussian.mean2",
    "output_dir",
];

struct Parser<'a> {
    path: &'a Path,
    entries: BTreeMap<String, (usize, String)>,
}

impl<'a> Parser<'a> {
    fn new(text: &str, path: &'a Path) -> Result<Self> {
        let err = |line, msg: String| Error::Config {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| err(line, format!("expected `key = value`, got `{content}`")))?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(err(line, format!("unknown key `{key}`")));
            }
            if value.is_empty() {
                return Err(err(line, format!("empty value for `{key}`")));
            }
            if let Some((first, _)) = entries.get(key) {
                return Err(err(line, format!("duplicate key `{key}` (first set on line {first})")));
            }
            entries.insert(key.to_string(), (line, value.to_string()));
        }
        Ok(Self { path, entries })
    }

    fn err(&self, key: &str, msg: String) -> Error {
        Error::Config {
            path: self.path.to_path_buf(),
            line: self.entries.get(key).map_or(0, |(l, _)| *l),
            msg,
        }
    }

    fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(_, v)| v.as_str())
    }

    fn required(&self, key: &str) -> Result<&str> {
        self.raw(key).ok_or_else(|| self.err(key, format!("missing required key `{key}`")))
    }

    fn real(&self, key: &str) -> Result<Option<f64>> {
        self.raw(key)
            .map(|v| match v.parse::<f64>() {
                Ok(x) if x.is_finite() => Ok(x),
                _ => Err(self.err(key, format!("`{key}` must be a finite number, got `{v}`"))),
            })
            .transpose()
    }

    fn real_req(&self, key: &str) -> Result<f64> {
        self.required(key)?;
        Ok(self.real(key)?.expect("checked above"))
    }

    fn count(&self, key: &str) -> Result<Option<usize>> {
        self.raw(key)
            .map(|v| {
                v.parse::<usize>()
                    .map_err(|_| self.err(key, format!("`{key}` must be a nonnegative integer, got `{v}`")))
            })
            .transpose()
    }

    fn reals(&self, key: &str, sep: char) -> Result<Vec<f64>> {
        self.required(key)?
            .split(sep)
            .map(|s| match s.trim().parse::<f64>() {
                Ok(x) if x.is_finite() => Ok(x),
                _ => Err(self.err(key, format!("`{key}`: cannot read `{}` as a number", s.trim()))),
            })
            .collect()
    }

    /// Rows separated by `;`, entries by `,`.
    fn matrix(&self, key: &str) -> Result<Matrix> {
        let rows: Vec<Vec<f64>> = self
            .required(key)?
            .split(';')
            .map(|row| {
                row.split(',')
                    .map(|s| match s.trim().parse::<f64>() {
                        Ok(x) if x.is_finite() => Ok(x),
                        _ => Err(self.err(key, format!("`{key}`: cannot read `{}` as a number", s.trim()))),
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        let ncols = rows[0].len();
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(self.err(key, format!("`{key}`: rows have different lengths")));
        }
        Ok(Matrix::from_row_iterator(rows.len(), ncols, rows.into_iter().flatten()))
    }

    /// Rejects keys that do not belong to the selected mode or builtin.
    fn forbid(&self, prefix: &str, allowed: &[&str], why: &str) -> Result<()> {
        for (key, (line, _)) in &self.entries {
            if key.starts_with(prefix) && !allowed.contains(&key.as_str()) {
                return Err(Error::Config {
                    path: self.path.to_path_buf(),
                    line: *line,
                    msg: format!("key `{key}` is not used {why}"),
                });
            }
        }
        Ok(())
    }

    fn marginal(&self, which: &str) -> Result<MarginalSpec> {
        let key = |s: &str| format!("{which}.{s}");
        if let Some(t) = self.raw(&key("type")) {
            if t != "gaussian" {
                return Err(self.err(&key("type"), format!("unsupported marginal type `{t}`")));
            }
        }
        let second_param_is = match self.raw(&key("second_param_is")).unwrap_or("variance") {
            "variance" => SecondParam::Variance,
            "stddev" => SecondParam::Stddev,
            other => {
                return Err(self.err(
                    &key("second_param_is"),
                    format!("expected `variance` or `stddev`, got `{other}`"),
                ))
            }
        };
        let spec = MarginalSpec {
            mean: self.real_req(&key("mean"))?,
            second_param: self.real_req(&key("second_param"))?,
            second_param_is,
        };
        if spec.second_param <= 0.0 {
            return Err(self.err(&key("second_param"), "must be positive".into()));
        }
        Ok(spec)
    }

    fn grid_experiment(&self) -> Result<GridExperiment> {
        self.forbid("gaussian.", &[], "in grid modes")?;
        let system = match self.required("system")? {
            "identity" => {
                self.forbid("system.", &[], "by system `identity`")?;
                SystemChoice::Identity
            }
            "sin-drift" => {
                self.forbid("system.", &["system.amplitude"], "by system `sin-drift`")?;
                SystemChoice::SinDrift {
                    amplitude: self.real_req("system.amplitude")?,
                }
            }
            "poly" => {
                self.forbid("system.", &["system.coeffs"], "by system `poly`")?;
                SystemChoice::Poly {
                    coeffs: self.reals("system.coeffs", ',')?,
                }
            }
            other => return Err(self.err("system", format!("unknown system `{other}`"))),
        };
        let u_weight = self.real("lagrangian.u_weight")?.unwrap_or(1.0);
        let lagrangian = match self.raw("lagrangian").unwrap_or("quadratic-u") {
            "quadratic-u" => {
                self.forbid("lagrangian.", &["lagrangian.u_weight"], "by lagrangian `quadratic-u`")?;
                LagrangianChoice::QuadraticU { u_weight }
            }
            "quartic-x-quadratic-u" => LagrangianChoice::QuarticXQuadraticU {
                x_weight: self.real_req("lagrangian.x_weight")?,
                u_weight,
            },
            other => return Err(self.err("lagrangian", format!("unknown lagrangian `{other}`"))),
        };
        if u_weight <= 0.0 {
            return Err(self.err("lagrangian.u_weight", "must be positive".into()));
        }
        let exp = GridExperiment {
            system,
            lagrangian,
            x_min: self.real_req("grid.x_min")?,
            x_max: self.real_req("grid.x_max")?,
            m: self
                .count("grid.m")?
                .ok_or_else(|| self.err("grid.m", "missing required key `grid.m`".into()))?,
            horizon: self
                .count("horizon")?
                .ok_or_else(|| self.err("horizon", "missing required key `horizon`".into()))?,
            marginal1: self.marginal("marginal1")?,
            marginal2: self.marginal("marginal2")?,
            cp: CpOverrides {
                tau: self.real("cp.tau")?,
                sigma: self.real("cp.sigma")?,
                theta: self.real("cp.theta")?,
                max_iter: self.count("cp.max_iter")?,
                tol_gap: self.real("cp.tol_gap")?,
                tol_feas: self.real("cp.tol_feas")?,
                check_every: self.count("cp.check_every")?,
                step_ratio: self.real("cp.step_ratio")?,
            },
        };
        if let Some(r) = exp.cp.step_ratio {
            if r <= 0.0 {
                return Err(self.err("cp.step_ratio", "must be positive".into()));
            }
        }
        // surface grid, system, and marginal errors now rather than mid-run
        let relabel = |key: &str, e: Error| self.err(key, e.to_string());
        let grid = exp.grid().map_err(|e| relabel("grid.m", e))?;
        exp.system().map_err(|e| relabel("horizon", e))?;
        exp.marginal1.discretize(&grid).map_err(|e| relabel("marginal1.mean", e))?;
        exp.marginal2.discretize(&grid).map_err(|e| relabel("marginal2.mean", e))?;
        Ok(exp)
    }

    fn gaussian_experiment(&self) -> Result<GaussianExperiment> {
        for prefix in ["system", "lagrangian", "grid.", "marginal", "cp."] {
            self.forbid(prefix, &[], "in gaussian mode")?;
        }
        for key in ["gaussian.mean1", "gaussian.mean2"] {
            if self.raw(key).is_some() {
                gausslq::require_zero_mean(&self.reals(key, ',')?)
                    .map_err(|e| self.err(key, e.to_string()))?;
            }
        }
        let sigma1 = self.matrix("gaussian.sigma1")?;
        let n = sigma1.nrows();
        let or_default = |key: &str, dflt: Matrix| -> Result<Matrix> {
            if self.raw(key).is_some() {
                self.matrix(key)
            } else {
                Ok(dflt)
            }
        };
        let a = or_default("gaussian.a", Matrix::identity(n, n))?;
        let b = or_default("gaussian.b", Matrix::identity(n, n))?;
        let q = or_default("gaussian.q", Matrix::zeros(n, n))?;
        let r = or_default("gaussian.r", Matrix::identity(b.ncols(), b.ncols()))?;
        let sigma_t = self.matrix("gaussian.sigma_t")?;
        let horizon = self.count("horizon")?.unwrap_or(2);
        let problem = GaussianLQProblem::new(a, b, q, r, sigma1, sigma_t, horizon)
            .map_err(|e| self.err("gaussian.sigma1", e.to_string()))?;
        Ok(GaussianExperiment { problem })
    }

    fn finish(self) -> Result<ExperimentConfig> {
        let experiment = match self.raw("mode").unwrap_or("grid-solve") {
            "grid-solve" => Experiment::GridSolve(self.grid_experiment()?),
            "oracle" => Experiment::Oracle(self.grid_experiment()?),
            "gaussian" => Experiment::Gaussian(self.gaussian_experiment()?),
            other => return Err(self.err("mode", format!("unknown mode `{other}`"))),
        };
        let output_dir = PathBuf::from(self.raw("output_dir").unwrap_or("output"));
        Ok(ExperimentConfig {
            experiment,
            output_dir,
        })
    }
}
