//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    /// The stream does not start with the `HKVT` magic.
    #[error("bad magic: expected \"HKVT\", found {found:?}")]
    BadMagic { found: [u8; 4] },

    #[error("version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u32, found: u32 },

    /// The stream ended before the declared payload was fully read.
    #[error("truncated payload: {0}")]
    Truncated(&'static str),

    /// Header fields or tensor lengths disagree with each other.
    #[error("shape inconsistency: {0}")]
    Shape(String),

    /// A tensor contains NaN or infinity.
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    /// An argument is outside its documented domain.
    #[error("invalid argument: {0}")]
    InvalidArg(String),

    /// The requested attention concentration cannot be planted.
    #[error(
        "infeasible concentration {concentration} for context_len {context_len} \
         and focus_set_size {focus_set_size}"
    )]
    InfeasibleConcentration {
        concentration: f64,
        context_len: usize,
        focus_set_size: usize,
    },

    /// The dynamic share coefficient would push B_dyna past the total budget.
    #[error(
        "share coefficient out of range: r = {r} exceeds the feasible maximum \
         {max:.6} for this budget split"
    )]
    ShareOutOfRange { r: f64, max: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;
