use std::fmt;

/// Crate-wide error type.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A caller violated an operation's precondition (shape mismatch,
    /// non-finite input, nonpositive variance, ...).
    Contract(String),
    /// Dense inversion hit a pivot below the singularity threshold.
    Singular { pivot_col: usize, pivot_abs: f64 },
    /// The k-by-k capacitance matrix of a dyadic transform is singular.
    SingularCapacitance { det_abs: f64 },
    /// det(B) <= 0: the transformed posterior is not positive definite.
    /// `datapoint` is attached when the error surfaces from a minibatch.
    NonPdPosterior {
        sign: i8,
        log_abs: f64,
        datapoint: Option<usize>,
    },
    /// A dense diagnostic was asked for on a problem too large to densify.
    DiagnosticCap { n: usize, cap: usize },
    /// Non-finite gradient reached the optimizer; training must abort.
    PoisonedUpdate { block: String },
    /// Malformed IDX payload; `offset` is the byte position of the problem.
    Format { offset: usize, message: String },
    /// Underlying I/O failure (message keeps the error cloneable).
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Error {
        Error::Contract(msg.into())
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::Singular {
                pivot_col,
                pivot_abs,
            } => write!(
                f,
                "singular matrix: pivot {pivot_abs:.3e} in column {pivot_col} below threshold"
            ),
            Error::SingularCapacitance { det_abs } => write!(
                f,
                "singular capacitance matrix (|det C| ~ {det_abs:.3e}); inverse apply undefined"
            ),
            Error::NonPdPosterior {
                sign,
                log_abs,
                datapoint,
            } => {
                write!(
                    f,
                    "transformed posterior not positive definite (det sign {sign}, log|det| {log_abs:.3e})"
                )?;
                if let Some(i) = datapoint {
                    write!(f, " at datapoint {i}")?;
                }
                Ok(())
            }
            Error::DiagnosticCap { n, cap } => write!(
                f,
                "dense diagnostic refused: dimension {n} exceeds cap {cap}"
            ),
            Error::PoisonedUpdate { block } => write!(
                f,
                "non-finite gradient in block {block}; update aborted"
            ),
            Error::Format { offset, message } => {
                write!(f, "format error at byte {offset}: {message}")
            }
            Error::Io(msg) => write!(f, "i/o error: {msg}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Error {
        Error::Io(e.to_string())
    }
}

impl Error {
    /// Attach a datapoint index to a posterior-definiteness error.
    pub fn at_datapoint(self, index: usize) -> Error {
        match self {
            Error::NonPdPosterior { sign, log_abs, .. } => Error::NonPdPosterior {
                sign,
                log_abs,
                datapoint: Some(index),
            },
            other => other,
        }
    }
}
