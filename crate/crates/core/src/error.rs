use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("unreachable state: p(x_t = {xt} | x_0 = {from}) is exactly zero")]
    Unreachable { xt: usize, from: usize },
    #[error("non-positive score {value} at index {index} where a logarithm is required")]
    NonPositiveScore { index: usize, value: f64 },
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("empty estimate: at least one sample is required")]
    EmptyEstimate,
    #[error("size guard: {0}")]
    TooLarge(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}
