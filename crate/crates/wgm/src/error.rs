use thiserror::Error;

/// Errors raised by the numerical pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("unsupported parabolic cylinder order {0}")]
    UnsupportedOrder(i64),
    #[error("curve not closed: closure defect {defect:.3e}")]
    CurveNotClosed { defect: f64 },
    #[error("invalid curvature profile: {0}")]
    InvalidProfile(String),
    #[error("point ({xi}, {z}) lies outside the chart region")]
    OutOfChart { xi: f64, z: f64 },
    #[error("stability condition violated at s = {s:.6}: A^3 = {value:.3e}")]
    StabilityViolation { s: f64, value: f64 },
    #[error("unsupported regime: {0}")]
    UnsupportedRegime(String),
    #[error("regime error: {0}")]
    Regime(String),
    #[error("no mode: {0}")]
    NoMode(String),
    #[error("quantization mismatch: periodicity defect {defect:.3e}")]
    QuantizationMismatch { defect: f64 },
    #[error("extension collar too wide: reflected node {node:.6} leaves ({lo:.6}, {hi:.6})")]
    CollarTooWide { node: f64, lo: f64, hi: f64 },
    #[error("geometry assumption violated: {0}")]
    GeometryAssumption(String),
    #[error("localization failure: relative norm change {change:.3e} exceeds {limit:.1e}")]
    LocalizationFailure { change: f64, limit: f64 },
    #[error("oracle failure: {0}")]
    OracleFailure(String),
    #[error("integration failure: {0}")]
    Integration(String),
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("audit failure in `{check}`: value {value:.3e}, tolerance {tol:.1e}")]
    AuditFailure { check: String, value: f64, tol: f64 },
    #[error("quadrature did not converge: estimated error {estimate:.3e}")]
    Quadrature { estimate: f64 },
    #[error("root finding failed: {0}")]
    Root(String),
}

pub type Result<T> = std::result::Result<T, Error>;
