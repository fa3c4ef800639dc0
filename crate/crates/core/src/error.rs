use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch in {dim}: expected {expected}, found {found}")]
    Shape {
        op: &'static str,
        dim: String,
        expected: usize,
        found: usize,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("backward: {0}")]
    Backward(String),
    #[error("grad_check: forward is not deterministic ({0})")]
    NonDeterministic(String),
    /// `line` is 1-based; 0 when the problem is not tied to one line.
    #[error("config error{}: {msg}", at_line(*.line))]
    Config { line: usize, msg: String },
    #[error("data error: {0}")]
    Data(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("numeric abort at step {step}: {detail}")]
    NumericAbort { step: usize, detail: String },
}

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Invalid { op, msg: msg.into() }
    }

    pub(crate) fn shape(op: &'static str, dim: impl Into<String>, expected: usize, found: usize) -> Self {
        Error::Shape {
            op,
            dim: dim.into(),
            expected,
            found,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 2,
            Error::Data(_) | Error::Io { .. } => 3,
            Error::NumericAbort { .. } | Error::NonFinite { .. } => 4,
            _ => 1,
        }
    }
}

fn at_line(line: usize) -> String {
    if line == 0 {
        String::new()
    } else {
        format!(" (line {line})")
    }
}

pub type Result<T> = std::result::Result<T, Error>;
