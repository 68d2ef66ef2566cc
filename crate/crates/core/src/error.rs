use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("need at least 3 points, got {0}")]
    TooFewPoints(usize),

    #[error("all points are collinear; the hull has no interior")]
    CollinearInput,

    #[error("ray origin ({x}, {y}) is not strictly inside the polygon")]
    OriginOutside { x: f64, y: f64 },

    #[error("quadrature resolution {resolution} yields only {nodes} nodes (need at least 16)")]
    ResolutionTooCoarse { resolution: f64, nodes: usize },

    #[error("target {0} lies on the hull boundary")]
    TargetOnHullBoundary(usize),

    #[error("two crossings of guard `{guard}` inside one minimum-size step near t = {time}")]
    StepTooLarge { guard: String, time: f64 },

    #[error("tangential crossing (|denominator| = {denominator:e})")]
    TangentialCrossing { denominator: f64 },

    #[error("non-finite gradient at iteration {iteration}")]
    NonFiniteGradient { iteration: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
