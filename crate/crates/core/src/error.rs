use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Array sizes do not match the operation's contract.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A physical or solver parameter is outside its valid range.
    #[error("configuration error: {0}")]
    Config(String),

    /// An input violates a value-level invariant (negativity, NaN, zeros).
    #[error("invalid input: {0}")]
    Input(String),

    /// The solver produced a non-finite value and aborted.
    #[error("numerical abort: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, Error>;
