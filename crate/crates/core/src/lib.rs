//! An adversarial-example laboratory built around a small dense-network
//! engine with manual backpropagation.
//!
//! The crate trains a victim classifier, generates adversarial examples
//! with gradient-based attacks (FGSM, JSMA, the three CW attacks and a
//! detector-aware adaptive variant), and detects them with HOLMES: an
//! ensemble of light-weight binary detectors that read only the victim's
//! logits and vote under the `Any` / `Major` / `All` policies.
//!
//! Core math ([`tensor`], [`nn`]) is generic over the scalar type via
//! `num-traits`; everything else works on the `f64` aliases exported at
//! the crate root ([`Tensor`], [`Network`], ...).

pub mod attacks;
pub mod data;
pub mod detectors;
pub mod holmes;
pub mod nn;
pub mod scalar;
pub mod tensor;
pub mod victim;

pub use scalar::Scalar;

/// Scalar type used by the lab: attack optimizers and finite-difference
/// gradient checks need the headroom of 64-bit floats.
pub type Real = f64;

/// Concrete aliases over [`Real`] for the generic core types.
pub type Tensor = tensor::Tensor<Real>;
pub type Layer = nn::Layer<Real>;
pub type Network = nn::Network<Real>;
pub type ActivationTrace = nn::ActivationTrace<Real>;
pub type Gradients = nn::Gradients<Real>;
pub type TrainHistory = nn::train::TrainHistory;

/// Pixel domain: raw byte intensities are mapped to `[-0.5, 0.5]`.
pub const PIXEL_MIN: Real = -0.5;
/// Upper edge of the pixel domain.
pub const PIXEL_MAX: Real = 0.5;

/// Errors shared by every module in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shape does not match what an operation requires.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// A layer received an input of the wrong dimension.
    #[error("dimension error at layer {layer}: expected {expected}, got {got}")]
    Dimension {
        layer: usize,
        expected: usize,
        got: usize,
    },
    /// A trace or gradient bundle does not line up with the network.
    #[error("structural error: {0}")]
    Structure(String),
    /// Caller passed an invalid argument.
    #[error("invalid argument: {0}")]
    Argument(String),
    /// Input outside the allowed pixel domain.
    #[error("domain error: {0}")]
    Domain(String),
    /// Operation does not support the requested mode.
    #[error("unsupported mode: {0}")]
    UnsupportedMode(String),
    /// A file could not be parsed; reports the failing byte offset.
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    /// File declares a format version this build cannot read.
    #[error("unsupported format version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    /// A computation produced NaN or infinity.
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
