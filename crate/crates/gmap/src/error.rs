use thiserror::Error;

/// Crate-wide error type. Messages name the offending entity (vertex id,
/// pixel, file line) so callers can report failures without extra context.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),

    /// OBJ parse failure with the 1-based source line.
    #[error("{name}:{line}: {msg}")]
    ObjParse {
        name: String,
        line: usize,
        msg: String,
    },

    /// Mesh connectivity violates an operation's requirements.
    #[error("topology: {0}")]
    Topology(String),

    /// Key-vertex spec is inconsistent with the mesh it targets.
    #[error("key vertex spec: {0}")]
    KeySpec(String),

    /// A linear solve failed or left too large a residual.
    #[error("solve: {0}")]
    Solve(String),

    /// Array or layer dimensions do not match.
    #[error("shape: {0}")]
    Shape(String),

    /// A binary or JSON payload violates its format.
    #[error("format: {0}")]
    Format(String),

    /// An input or result that must be finite is NaN or infinite.
    #[error("non-finite: {0}")]
    NonFinite(String),
}

pub type Result<T> = std::result::Result<T, Error>;
