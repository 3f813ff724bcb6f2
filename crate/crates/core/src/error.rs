use alloc::string::String;

/// Errors raised by the allocation-only core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("position ({x}, {y}) lies outside the service region")]
    OutOfRegion { x: f64, y: f64 },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("distribution error: {0}")]
    Distribution(String),
    #[error("weight calibration error: {0}")]
    Calibration(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("state invariant violated: {0}")]
    Invariant(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
