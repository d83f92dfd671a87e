use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("mesh is not nested: {fine} fine cells along {axis} not divisible by {coarse} coarse cells")]
    NotNested {
        axis: &'static str,
        fine: usize,
        coarse: usize,
    },

    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("coefficient `{field}` must be strictly positive, found {value} at element {element}")]
    CoefficientPositivity {
        field: &'static str,
        element: usize,
        value: f64,
    },

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("requested {requested} expansion terms but only {available} modes are available")]
    Truncation { requested: usize, available: usize },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("element {element} has zero or negative area")]
    ZeroArea { element: usize },

    #[error("patch {0} is empty")]
    EmptyPatch(usize),

    #[error("patch problem has {dofs} dofs which exceeds the dense solver limit of {limit}")]
    DofLimit { dofs: usize, limit: usize },

    #[error("weighted mass matrix is not positive definite on patch {patch}; check the coefficient field")]
    MassNotSpd { patch: usize },

    #[error("eigensolver failed: {0}")]
    Eigensolver(String),

    #[error("spectrum does not match the basis request: {0}")]
    SpectrumMismatch(String),

    #[error("linear solver failed: {0}")]
    LinearSolver(String),

    #[error(
        "coarse operator of dimension {dim} is numerically rank deficient (pivot ratio {ratio:e}); \
         rebuild the basis with dependent columns dropped"
    )]
    RankDeficient { dim: usize, ratio: f64 },

    #[error("constraint error: {0}")]
    Constraint(String),

    #[error("relative error undefined: reference {0} energy is zero")]
    UndefinedRatio(&'static str),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("parse error in {file}: {message}")]
    Parse { file: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}
