use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("grid: {0}")]
    Grid(String),
    #[error("hamiltonian: {0}")]
    Hamiltonian(String),
    #[error("problem: {0}")]
    Problem(String),
    #[error("singular system: {0}")]
    Singular(String),
    #[error("{solver} did not converge after {iterations} iterations (residual {residual:e})")]
    NotConverged { solver: &'static str, iterations: usize, residual: f64 },
    #[error("breakdown in {0}")]
    Breakdown(&'static str),
    #[error("no sign change of {what} on [{lo}, {hi}]")]
    Bracket { what: &'static str, lo: f64, hi: f64 },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
