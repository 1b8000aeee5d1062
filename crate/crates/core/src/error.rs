use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("curve {name} covers [{lo}, {hi}] keV but [{need_lo}, {need_hi}] keV is required")]
    CurveCoverage {
        name: String,
        lo: f64,
        hi: f64,
        need_lo: f64,
        need_hi: f64,
    },

    #[error("matrix {name} is singular (sigma_min = {sigma_min:e}, ||.||_F = {frobenius:e})")]
    Singular {
        name: &'static str,
        sigma_min: f64,
        frobenius: f64,
    },

    #[error("insufficient angular coverage: {0}")]
    InsufficientCoverage(String),

    #[error("{solver}: non-finite iterate at iteration {iteration}, spectrum {spectrum}")]
    NonFinite {
        solver: &'static str,
        iteration: usize,
        spectrum: usize,
    },

    #[error("dense matrix of {rows}x{cols} exceeds the cap of {cap} entries")]
    DenseCapExceeded { rows: usize, cols: usize, cap: usize },

    #[error("zero-norm input: {0}")]
    ZeroNorm(&'static str),

    #[error("config field `{field}`: {message}")]
    Config { field: String, message: String },

    /// A solver stopped early; `partial` holds the iterations completed before.
    #[error("{error}")]
    SolverAborted {
        error: Box<Error>,
        partial: Box<crate::solvers::SolveResult>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Short machine-readable category used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidGrid(_) => "invalid_grid",
            Error::InvalidGeometry(_) => "invalid_geometry",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::InvalidParameter(_) => "invalid_parameter",
            Error::Parse { .. } => "parse",
            Error::Io { .. } => "io",
            Error::CurveCoverage { .. } => "curve_coverage",
            Error::Singular { .. } => "singular",
            Error::InsufficientCoverage(_) => "insufficient_coverage",
            Error::NonFinite { .. } => "non_finite",
            Error::DenseCapExceeded { .. } => "dense_cap_exceeded",
            Error::ZeroNorm(_) => "zero_norm",
            Error::Config { .. } => "config",
            Error::SolverAborted { error, .. } => error.kind(),
        }
    }
}

pub(crate) fn check_len(what: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            what,
            expected,
            found,
        })
    }
}
