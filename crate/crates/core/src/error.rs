use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("coincident elements: propagation distance {0} m is not positive")]
    CoincidentElements(f64),
    #[error("angle out of range: theta = {theta} rad, phi = {phi} rad")]
    AngleOutOfRange { theta: f64, phi: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid state file: {0}")]
    InvalidState(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("config parse error: {0}")]
    TomlDe(#[from] toml::de::Error),
    #[error("config write error: {0}")]
    TomlSer(#[from] toml::ser::Error),
}
