use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("degenerate geometry: {0}")]
    Geometry(String),
    #[error("singular material: poisson ratio {0} must be below 0.5")]
    SingularMaterial(f64),
    #[error("conjugate gradient did not converge after {iterations} iterations (residual {residual:e})")]
    Solver { iterations: usize, residual: f64 },
    #[error("simulation has diverged; refusing to step")]
    Diverged,
    #[error("rank-deficient correspondences: {0}")]
    Rank(String),
    #[error("registration failed: {0}")]
    Registration(String),
    #[error("filter removed every point")]
    EmptyResult,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("training diverged at epoch {epoch}: {reason}")]
    Training { epoch: usize, reason: String },
    #[error("dataset generation failed for sequence {sequence}: {reason}")]
    Dataset { sequence: String, reason: String },
    #[error("probe script error: {0}")]
    Script(String),
    #[error("observation generation error: {0}")]
    Generation(String),
    #[error("parameter search failed: {0}")]
    Search(String),
    #[error("parse error in {path}: {reason}")]
    Parse { path: String, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Tensor(#[from] softcorr_autodiff::TensorError),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.display().to_string(),
        source,
    }
}

pub(crate) fn parse_err(path: &std::path::Path, reason: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}
