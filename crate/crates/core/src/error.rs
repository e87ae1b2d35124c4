use thiserror::Error;

/// Process exit codes used by the CLI: 0 ok, 2 config, 3 data, 4 numeric.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config syntax: {0}")]
    ConfigSyntax(String),
    #[error("config unknown key: {0}")]
    ConfigUnknownKey(String),
    #[error("config validation: {0}")]
    ConfigValidation(String),
    #[error("shape: {0}")]
    Shape(String),
    #[error("numeric: {0}")]
    Numeric(String),
    #[error("teacher data: {0}")]
    TeacherData(String),
    #[error("empty stats: usage counts are all zero")]
    EmptyStats,
    #[error("state: {0}")]
    State(String),
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
    #[error("ingest: {0}")]
    Ingest(String),
    #[error("probe data: {0}")]
    ProbeData(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("tensor: {0}")]
    Candle(#[from] candle_core::Error),
}

impl Error {
    /// Stable machine-parsable code prefix for CLI error lines.
    pub fn code(&self) -> &'static str {
        match self {
            Error::ConfigSyntax(_) => "E_CONFIG_SYNTAX",
            Error::ConfigUnknownKey(_) => "E_CONFIG_UNKNOWN_KEY",
            Error::ConfigValidation(_) => "E_CONFIG_VALIDATION",
            Error::Shape(_) => "E_SHAPE",
            Error::Numeric(_) => "E_NUMERIC",
            Error::TeacherData(_) => "E_TEACHER_DATA",
            Error::EmptyStats => "E_EMPTY_STATS",
            Error::State(_) => "E_STATE",
            Error::CheckpointMismatch(_) => "E_CKPT_MISMATCH",
            Error::Ingest(_) => "E_INGEST",
            Error::ProbeData(_) => "E_PROBE_DATA",
            Error::Io(_) => "E_IO",
            Error::Candle(_) => "E_TENSOR",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Error::ConfigSyntax(_)
            | Error::ConfigUnknownKey(_)
            | Error::ConfigValidation(_)
            | Error::State(_) => 2,
            Error::TeacherData(_)
            | Error::Ingest(_)
            | Error::ProbeData(_)
            | Error::EmptyStats
            | Error::CheckpointMismatch(_)
            | Error::Io(_) => 3,
            Error::Numeric(_) | Error::Shape(_) | Error::Candle(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
