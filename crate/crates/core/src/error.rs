use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("integrity failure: {0}")]
    Integrity(String),

    #[error("misuse: {0}")]
    Misuse(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code used by the command-line front-end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_) | Error::InvalidGeometry(_) => 2,
            Error::Numerical(_) => 3,
            // unparsable artifacts; configuration text is reported as InvalidConfig
            Error::Integrity(_) | Error::Format(_) | Error::Json(_) => 4,
            Error::Contract(_) | Error::Shape { .. } | Error::Misuse(_) | Error::Io(_) => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidConfig(_) => "invalid_config",
            Error::InvalidGeometry(_) => "invalid_geometry",
            Error::Contract(_) => "contract",
            Error::Shape { .. } => "shape",
            Error::Numerical(_) => "numerical",
            Error::Integrity(_) => "integrity",
            Error::Misuse(_) => "misuse",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
