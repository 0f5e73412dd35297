use thiserror::Error;

/// Errors raised by tensor construction, block evaluation and the harnesses.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("construction error: expected {expected} values for shape {shape:?}, got {actual}")]
    Construction {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("resource error: {0}")]
    Resource(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Shape(format!($($arg)*))
    };
}

macro_rules! param_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Parameter(format!($($arg)*))
    };
}

pub(crate) use param_err;
pub(crate) use shape_err;
