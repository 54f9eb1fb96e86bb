//! Error constants shared by every service and by the wire protocol.

use serde::{Deserialize, Serialize};
use std::fmt;

/// The closed set of error constants that may appear in a wire response.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ErrorCode {
    #[serde(rename = "E_PERM")]
    Perm,
    #[serde(rename = "E_NOENT")]
    NoEnt,
    #[serde(rename = "E_EXISTS")]
    Exists,
    #[serde(rename = "E_NOSPACE")]
    NoSpace,
    #[serde(rename = "E_PINNED")]
    Pinned,
    #[serde(rename = "E_BADREQ")]
    BadReq,
    #[serde(rename = "E_UNAVAIL")]
    Unavail,
}

impl ErrorCode {
    pub const ALL: [ErrorCode; 7] = [
        ErrorCode::Perm,
        ErrorCode::NoEnt,
        ErrorCode::Exists,
        ErrorCode::NoSpace,
        ErrorCode::Pinned,
        ErrorCode::BadReq,
        ErrorCode::Unavail,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCode::Perm => "E_PERM",
            ErrorCode::NoEnt => "E_NOENT",
            ErrorCode::Exists => "E_EXISTS",
            ErrorCode::NoSpace => "E_NOSPACE",
            ErrorCode::Pinned => "E_PINNED",
            ErrorCode::BadReq => "E_BADREQ",
            ErrorCode::Unavail => "E_UNAVAIL",
        }
    }

    pub fn parse(s: &str) -> Option<ErrorCode> {
        Self::ALL.into_iter().find(|c| c.as_str() == s)
    }

    /// Process exit code used by the CLI for this error.
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCode::Perm => 10,
            ErrorCode::NoEnt => 11,
            ErrorCode::Exists => 12,
            ErrorCode::NoSpace => 13,
            ErrorCode::Pinned => 14,
            ErrorCode::BadReq => 15,
            ErrorCode::Unavail => 16,
        }
    }
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// An error carrying one of the protocol error constants plus a human readable message.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{code}: {message}")]
pub struct GvfError {
    pub code: ErrorCode,
    pub message: String,
}

impl GvfError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        GvfError {
            code,
            message: message.into(),
        }
    }

    pub fn perm(msg: impl Into<String>) -> Self {
        Self::new(ErrorCode::Perm, msg)
    }
    pub fn noent(msg: impl Into<String>) -> Self {
        Self::new(ErrorCode::NoEnt, msg)
    }
    pub fn exists(msg: impl Into<String>) -> Self {
        Self::new(ErrorCode::Exists, msg)
    }
    pub fn nospace(msg: impl Into<String>) -> Self {
        Self::new(ErrorCode::NoSpace, msg)
    }
    pub fn pinned(msg: impl Into<String>) -> Self {
        Self::new(ErrorCode::Pinned, msg)
    }
    pub fn badreq(msg: impl Into<String>) -> Self {
        Self::new(ErrorCode::BadReq, msg)
    }
    pub fn unavail(msg: impl Into<String>) -> Self {
        Self::new(ErrorCode::Unavail, msg)
    }
}

// Local I/O failures (journal, blob directory, sockets) surface as unavailability.
impl From<std::io::Error> for GvfError {
    fn from(e: std::io::Error) -> Self {
        GvfError::unavail(format!("io: {e}"))
    }
}

impl From<serde_json::Error> for GvfError {
    fn from(e: serde_json::Error) -> Self {
        GvfError::badreq(format!("malformed object: {e}"))
    }
}

pub type Result<T> = std::result::Result<T, GvfError>;
