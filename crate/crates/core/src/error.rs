use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

/// Failure categories surfaced by the core.
///
/// The companion crate maps each variant onto a process exit code, so new
/// variants should stay coarse.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Invalid network, demand or timing parameters.
    Config(String),
    /// A network failed validation; every violation is listed.
    InvalidNetwork(Vec<String>),
    /// A controller or caller produced a phase index outside the plan.
    InvalidPhase { intersection: usize, phase: usize, phases: usize },
    /// A controller kept the current phase although max green forced a switch.
    MaxGreenViolated { intersection: usize, clock: u32 },
    /// Vector or matrix shapes disagree.
    Dimension { expected: usize, found: usize, context: &'static str },
    /// A checkpoint or observation layout does not match the expected one.
    LayoutMismatch { expected: u64, found: u64 },
    /// NaN or infinity in a gradient, loss or parameter.
    NonFinite(&'static str),
    /// Relative importance found no weight above the threshold.
    ThresholdTooHigh(f64),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::InvalidNetwork(v) => {
                write!(f, "invalid network ({} violation(s))", v.len())?;
                for msg in v {
                    write!(f, "\n  - {msg}")?;
                }
                Ok(())
            }
            Error::InvalidPhase { intersection, phase, phases } => {
                write!(f, "intersection {intersection}: phase {phase} outside plan of {phases} phase(s)")
            }
            Error::MaxGreenViolated { intersection, clock } => {
                write!(f, "intersection {intersection}: controller kept the current phase past max green at t={clock}")
            }
            Error::Dimension { expected, found, context } => {
                write!(f, "{context}: expected length {expected}, found {found}")
            }
            Error::LayoutMismatch { expected, found } => {
                write!(f, "observation layout fingerprint mismatch: expected {expected:016x}, found {found:016x}")
            }
            Error::NonFinite(what) => write!(f, "non-finite value in {what}"),
            Error::ThresholdTooHigh(t) => write!(f, "threshold too high: no weight above {t}"),
        }
    }
}

impl core::error::Error for Error {}
