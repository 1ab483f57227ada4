//! Preconditioned delta-rule recurrences.
//!
//! Sequential reference loops, chunkwise parallel kernels, a diagonal and
//! exact key-Gram preconditioner, reverse-mode gradients, numerical
//! verifiers for the underlying least-squares theory, and a small
//! multi-query associative recall (MQAR) harness.

pub mod error;
pub mod numerics;
pub mod precond;
pub mod autograd;
pub mod bench;
pub mod chunkwise;
pub mod cli;
pub mod mqar;
pub mod recurrence;
pub mod theory;
pub mod verify;

#[doc(hidden)]
pub mod testutil;

pub use error::{Error, Result};
pub use numerics::{Matrix, Vector};
pub use recurrence::{
    run_sequential, Decay, DecayKind, PrecondKind, RecurrenceConfig, SequenceBatch, Solve, StateMatrix, Variant,
};

/// Scientific notation with 17 significant digits, enough to round-trip
/// any `f64`.
pub fn format_f64(x: f64) -> String {
    format!("{x:.16e}")
}
