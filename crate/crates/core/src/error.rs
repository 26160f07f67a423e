use std::path::PathBuf;

/// Errors raised anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("coefficient is not coercive: eigenvalue {eigenvalue} at x = ({x:.6}, {y:.6}), mu = {mu}")]
    NotCoercive {
        eigenvalue: f64,
        x: f64,
        y: f64,
        mu: f64,
    },

    #[error("singular matrix: {0}")]
    SingularMatrix(String),

    #[error("degenerate patch around coarse element {element}: {reason}")]
    DegeneratePatch { element: usize, reason: String },

    #[error("division by a vanishing reference norm")]
    ZeroReference,

    #[error("reduced system is ill-conditioned at node {node}: {reason}")]
    IllConditioned { node: usize, reason: String },

    #[error("inconsistent offline database: {0}")]
    InconsistentDatabase(String),

    #[error("incompatible offline database: {0}")]
    IncompatibleDatabase(String),

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("newton iteration did not converge after {iterations} iterations (last relative update {last_update:e})")]
    NewtonNotConverged { iterations: usize, last_update: f64 },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
