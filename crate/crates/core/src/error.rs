//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("coordinate out of range: lat={lat}, lon={lon}")]
    Coordinate { lat: f64, lon: f64 },

    #[error("point ({lat}, {lon}) is outside the {window_deg}-degree window around the grid origin ({origin_lat}, {origin_lon})")]
    OutOfWindow {
        lat: f64,
        lon: f64,
        origin_lat: f64,
        origin_lon: f64,
        window_deg: f64,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("missing column `{column}` in {path}")]
    Schema { path: String, column: String },

    #[error("{malformed} of {total} rows malformed in {path}")]
    DataQuality {
        path: String,
        malformed: usize,
        total: usize,
    },

    #[error("trajectory `{0}` has no records")]
    EmptyTrajectory(String),

    #[error("empty corpus: {0}")]
    EmptyCorpus(String),

    #[error("shape mismatch in {op}: {details}")]
    Shape { op: &'static str, details: String },

    #[error("non-finite value produced by {op}")]
    NumericGuard { op: &'static str },

    #[error("token {token} outside vocabulary of size {vocab_size}")]
    Vocab { token: usize, vocab_size: usize },

    #[error("required side channel `{0}` is missing")]
    Channel(&'static str),

    #[error("unknown user label `{0}`")]
    Label(String),

    #[error("invalid synthetic corpus spec: {0}")]
    Synth(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed file {path}: {details}")]
    Format { path: String, details: String },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Exit code the CLI maps this error to: 3 for numeric guard trips,
    /// 2 for everything else (validation / data problems).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NumericGuard { .. } => 3,
            _ => 2,
        }
    }
}
