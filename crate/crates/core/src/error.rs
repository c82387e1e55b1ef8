use crate::rigid::RigidTransform;
use thiserror::Error;

/// Crate-wide error type. Variants map onto the CLI exit codes: input
/// problems exit with 2, numerical failures with 3.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed mesh or labeling structure (bad indices, degenerate
    /// triangles, empty parts, ...).
    #[error("structural input error: {0}")]
    Structural(String),

    /// Out-of-range configuration value.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// A rigid fit could not determine a rotation. Carries the best
    /// partial solution (identity rotation, centroid translation).
    #[error("degenerate rigid fit: {detail}")]
    DegenerateFit {
        detail: String,
        fallback: RigidTransform,
        residual: f64,
    },

    /// The LP solver hit its iteration bound or lost its basis; distinct
    /// from an infeasible program, which is a regular solution status.
    #[error("LP solver failure: {0}")]
    SolverFailure(String),

    /// Joint estimation with gamma = 0 and identical transforms on both
    /// sides: every point satisfies the articulation constraint.
    #[error("joint between parts {0} and {1} is fully ambiguous")]
    AmbiguousJoint(usize, usize),

    /// Instance mesh does not correspond vertex-by-vertex to the template.
    #[error("correspondence error: {0}")]
    Correspondence(String),

    /// Mesh or model file could not be parsed.
    #[error("{file}:{line}: {msg}")]
    Format {
        file: String,
        line: usize,
        msg: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
