//! Process-level error taxonomy, mapped onto the documented exit codes:
//! 2 configuration, 3 I/O, 4 numerical abort, 5 invariant violation.

use std::fmt;

#[derive(Debug)]
pub enum AppError {
    Config(String),
    Io(String),
    Numerical(String),
    Invariant(String),
}

pub type AppResult<T> = Result<T, AppError>;

impl AppError {
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Config(_) => 2,
            AppError::Io(_) => 3,
            AppError::Numerical(_) => 4,
            AppError::Invariant(_) => 5,
        }
    }
}

impl fmt::Display for AppError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AppError::Config(m) => write!(f, "configuration error: {m}"),
            AppError::Io(m) => write!(f, "i/o error: {m}"),
            AppError::Numerical(m) => write!(f, "numerical error: {m}"),
            AppError::Invariant(m) => write!(f, "invariant violation: {m}"),
        }
    }
}

impl From<speckle_sim::error::Error> for AppError {
    fn from(e: speckle_sim::error::Error) -> Self {
        use speckle_sim::error::Error as E;
        match e {
            E::Config(m) | E::Input(m) => AppError::Config(m),
            E::Dimension(m) => AppError::Invariant(m),
            E::Numerical(m) => AppError::Numerical(m),
        }
    }
}

impl From<std::io::Error> for AppError {
    fn from(e: std::io::Error) -> Self {
        AppError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for AppError {
    fn from(e: serde_json::Error) -> Self {
        AppError::Io(format!("json: {e}"))
    }
}

impl From<csv::Error> for AppError {
    fn from(e: csv::Error) -> Self {
        AppError::Io(format!("csv: {e}"))
    }
}

impl From<image::ImageError> for AppError {
    fn from(e: image::ImageError) -> Self {
        AppError::Io(format!("png: {e}"))
    }
}
