use std::path::PathBuf;

/// Errors raised while building problems, solving them, or running experiments.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid density: {0}")]
    InvalidDensity(String),

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("invalid system: {0}")]
    InvalidSystem(String),

    #[error("lagrangian is {value} at stage {stage}, cells ({i}, {j})")]
    BadCost {
        stage: usize,
        i: usize,
        j: usize,
        value: f64,
    },

    #[error("step sizes violate tau*sigma*|K|^2 < 1 (tau={tau}, sigma={sigma}, |K|^2={norm_sq})")]
    StepSize { tau: f64, sigma: f64, norm_sq: f64 },

    #[error("invalid solver parameters: {0}")]
    InvalidParams(String),

    #[error("non-finite iterate at iteration {iteration}")]
    NonFinite { iteration: usize },

    #[error("power iteration did not converge after {0} steps")]
    PowerIteration(usize),

    #[error("invalid Gaussian/LQ problem: {0}")]
    InvalidGaussian(String),

    #[error("no feasible ascent from any initialization")]
    InfeasibleStart,

    #[error("{path}:{line}: {msg}")]
    Config {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
