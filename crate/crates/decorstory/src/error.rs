use thiserror::Error;

/// Errors produced by every stage of the conditioning pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Bad magic, unsupported version/dtype code, or truncated payload.
    #[error("malformed embedding file: {0}")]
    MalformedFile(String),

    /// Layout descriptor indices are out of range, overlapping, or misordered.
    #[error("layout inconsistent: {0}")]
    LayoutInconsistent(String),

    /// A matrix entry is NaN or infinite.
    #[error("non-finite entry at row {row}, column {col}")]
    NonFiniteEntry { row: usize, col: usize },

    /// A pooled frame representative has (near-)zero norm.
    #[error("frame {frame} pools to a zero embedding (norm {norm:e})")]
    ZeroFrameEmbedding { frame: usize, norm: f64 },

    /// A span with no tokens was passed to a pooling operation.
    #[error("empty token span")]
    EmptySpan,

    /// Underlying I/O failure.
    #[error("i/o failure: {0}")]
    IoFailure(#[from] std::io::Error),

    /// Frame `1 ≤ k ≤ N` is linearly dependent on frames `1..k-1`.
    #[error("frame {0} is linearly dependent on earlier frames")]
    DegenerateFrame(usize),

    /// A row with zero norm reached an operation that must normalize it.
    #[error("row {0} has zero norm")]
    ZeroRow(usize),

    /// Matrix dimensions do not conform.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Target frame index outside `1..=N`.
    #[error("frame index {index} out of range 1..={n_frames}")]
    FrameIndexOutOfRange { index: usize, n_frames: usize },

    /// Attention scores left the finite range.
    #[error("non-finite attention score at query {query}, key {key}")]
    NonFiniteScore { query: usize, key: usize },

    /// Latent state decoded before the step counter reached zero.
    #[error("{0} denoising steps remaining, cannot decode")]
    StepsRemaining(usize),

    /// Mixing coefficient outside `[0, 1]`.
    #[error("rho {0} outside [0, 1]")]
    InvalidRho(f64),

    /// Any other argument violating a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, Error>;
