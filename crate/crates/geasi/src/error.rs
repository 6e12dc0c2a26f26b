use thiserror::Error;

/// Errors produced by mesh construction, solvers and the fitting loops.
#[derive(Debug, Error)]
pub enum GeasiError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("mesh error: {0}")]
    Mesh(String),

    #[error("invalid activation site: {0}")]
    InvalidSite(String),

    #[error("solver failed: {0}")]
    Solver(String),

    #[error("solver did not converge: {0}")]
    NonConvergence(String),

    #[error("undefined gradient (zero source tangent)")]
    UndefinedGradient,

    #[error("VTK format error: {0}")]
    Vtk(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, GeasiError>;
