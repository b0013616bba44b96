//! Error type shared by the numeric modules.

use alloc::string::String;
use core::fmt;

/// Errors produced by tensor ops, the CTC lattice and the samplers.
#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// Operand shapes are inconsistent for the named op.
    Shape { op: &'static str, detail: String },
    /// An op produced NaN or infinity.
    NonFinite { op: &'static str },
    /// An argument violates the op's precondition.
    InvalidArgument { op: &'static str, detail: String },
    /// The CTC target cannot be aligned within the given number of frames.
    InfeasibleTarget { input_len: usize, required: usize },
    /// Sampling temperature below the schedule's lower bound of 1.
    TemperatureOutOfRange { t: f64 },
    /// A serialized container is malformed.
    Corrupt { detail: String },
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::Shape { op, detail } => write!(f, "{op}: shape mismatch: {detail}"),
            CoreError::NonFinite { op } => write!(f, "{op}: produced a non-finite value"),
            CoreError::InvalidArgument { op, detail } => write!(f, "{op}: {detail}"),
            CoreError::InfeasibleTarget {
                input_len,
                required,
            } => write!(
                f,
                "ctc: target needs at least {required} frames but only {input_len} are available"
            ),
            CoreError::TemperatureOutOfRange { t } => {
                write!(f, "mixture: temperature {t} is below the minimum of 1")
            }
            CoreError::Corrupt { detail } => write!(f, "container: {detail}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for CoreError {}
