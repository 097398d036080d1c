use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("degenerate heatmap: weight sum {0} is not positive")]
    DegenerateHeatmap(f64),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    /// A configuration value failed validation; `key` is the dotted config path.
    #[error("invalid config `{key}`: {msg}")]
    Config { key: String, msg: String },
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("empty {0} split")]
    EmptySplit(&'static str),
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }
}
